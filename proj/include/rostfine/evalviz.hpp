#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>
#include <nlohmann/json.hpp>

#include "rostfine/errors.hpp"
#include "rostfine/grades.hpp"
#include "rostfine/image_io.hpp"
#include "rostfine/objectives.hpp"
#include "rostfine/tensor.hpp"

namespace rostfine {

// ---------------------------------------------------------------------------
// Metrics

/// Mean per-class recall over the classes that occur in `truth`, in percent.
inline double balanced_accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> truth,
                                std::size_t classes = 5) {
    if (pred.size() != truth.size())
        throw DimensionError("balanced_accuracy: " + std::to_string(pred.size()) + " predictions for " +
                             std::to_string(truth.size()) + " labels");
    if (truth.empty()) throw ValueError("balanced_accuracy: empty input");
    std::vector<std::size_t> hits(classes, 0), support(classes, 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= classes || pred[i] >= classes) throw ValueError("balanced_accuracy: class index out of range");
        ++support[truth[i]];
        if (pred[i] == truth[i]) ++hits[truth[i]];
    }
    double sum = 0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < classes; ++c)
        if (support[c] > 0) {
            sum += static_cast<double>(hits[c]) / static_cast<double>(support[c]);
            ++present;
        }
    return 100.0 * sum / static_cast<double>(present);
}

struct SetMetrics {
    std::size_t count = 0;
    double mse = 0;
    double js = 0;
    /// Balanced accuracy of the n-th most selected grade, n = 1..5.
    std::array<double, 5> ba{};
    double ba_mean = 0;
};

/// Set-level MSE and JS (means over samples) plus balanced accuracy of the
/// n-th most selected grade for every n.
inline SetMetrics dataset_metrics(const std::vector<std::vector<double>>& preds,
                                  const std::vector<std::vector<double>>& labels, double js_eps = 1e-8) {
    if (preds.size() != labels.size())
        throw DimensionError("dataset_metrics: " + std::to_string(preds.size()) + " predictions for " +
                             std::to_string(labels.size()) + " labels");
    if (preds.empty()) throw ValueError("dataset_metrics: empty input");
    SetMetrics m;
    m.count = preds.size();
    for (std::size_t i = 0; i < preds.size(); ++i) {
        m.mse += mse_value(preds[i], labels[i]);
        m.js += js_value(preds[i], labels[i], js_eps);
    }
    m.mse /= static_cast<double>(m.count);
    m.js /= static_cast<double>(m.count);
    std::vector<std::size_t> p(m.count), t(m.count);
    for (std::size_t n = 1; n <= 5; ++n) {
        for (std::size_t i = 0; i < m.count; ++i) {
            p[i] = nth_grade(preds[i], n);
            t[i] = nth_grade(labels[i], n);
        }
        m.ba[n - 1] = balanced_accuracy(p, t);
    }
    m.ba_mean = std::accumulate(m.ba.begin(), m.ba.end(), 0.0) / 5.0;
    return m;
}

struct KruskalWallis {
    double h = 0;
    double p = 1;
    std::size_t df = 0;
};

/// Rank-based one-way test with tie correction; p from the chi-square tail.
inline KruskalWallis kruskal_wallis(const std::vector<std::vector<double>>& groups) {
    if (groups.size() < 2) throw ValueError("kruskal_wallis: needs at least two groups");
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].empty()) throw ValueError("kruskal_wallis: group " + std::to_string(g) + " is empty");
        for (double v : groups[g]) {
            if (!std::isfinite(v)) throw ValueError("kruskal_wallis: non-finite value");
            all.emplace_back(v, g);
        }
    }
    std::sort(all.begin(), all.end());
    const double n = static_cast<double>(all.size());
    std::vector<double> rank_sum(groups.size(), 0.0);
    double tie_term = 0;
    for (std::size_t i = 0; i < all.size();) {
        std::size_t j = i;
        while (j < all.size() && all[j].first == all[i].first) ++j;
        const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) rank_sum[all[k].second] += avg;
        const double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        i = j;
    }
    KruskalWallis r;
    r.df = groups.size() - 1;
    const double correction = 1.0 - tie_term / (n * n * n - n);
    if (correction <= 0) return r; // every value identical
    double s = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) s += rank_sum[g] * rank_sum[g] / static_cast<double>(groups[g].size());
    r.h = std::max(0.0, (12.0 / (n * (n + 1)) * s - 3 * (n + 1)) / correction);
    r.p = boost::math::gamma_q(static_cast<double>(r.df) / 2.0, r.h / 2.0);
    return r;
}

// ---------------------------------------------------------------------------
// Attention rollout

namespace detail {

inline void check_square(const Tensor<double>& a, std::size_t side, std::size_t layer) {
    if (a.rank() != 2 || a.dim(0) != side || a.dim(1) != side)
        throw DimensionError("rollout: layer " + std::to_string(layer) + " map has shape " + shape_str(a.shape()) +
                             ", expected " + std::to_string(side) + "x" + std::to_string(side));
}

inline Tensor<double> matmul_dense(const Tensor<double>& a, const Tensor<double>& b) {
    const std::size_t n = a.dim(0);
    Tensor<double> c(Shape{n, n});
    kernel::gemm_nn(a.data().data(), b.data().data(), c.storage().data(), n, n, n, false);
    return c;
}

} // namespace detail

/// Cumulative rollout after each layer: stage l is A~_l ... A~_1 with
/// A~ = row-normalize(A/2 + I/2).
inline std::vector<Tensor<double>> rollout_stages(const std::vector<Tensor<double>>& layers) {
    if (layers.empty()) throw ValueError("rollout: no attention layers");
    const std::size_t side = layers[0].rank() == 2 ? layers[0].dim(0) : 0;
    if (side < 2) throw DimensionError("rollout: maps must be (1+N) x (1+N) with N >= 1");
    std::vector<Tensor<double>> stages;
    Tensor<double> acc = Tensor<double>::identity(side);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& a = layers[l];
        detail::check_square(a, side, l);
        Tensor<double> adj(Shape{side, side});
        for (std::size_t i = 0; i < side; ++i) {
            double row = 0;
            for (std::size_t j = 0; j < side; ++j) {
                if (!(a(i, j) >= 0) || !std::isfinite(a(i, j)))
                    throw ValueError("rollout: layer " + std::to_string(l) + " has a negative or non-finite entry");
                row += a(i, j);
            }
            if (std::abs(row - 1.0) > 1e-4)
                throw ValueError("rollout: layer " + std::to_string(l) + " row " + std::to_string(i) +
                                 " is not stochastic (sums to " + std::to_string(row) + ")");
            double z = 0;
            for (std::size_t j = 0; j < side; ++j) {
                adj(i, j) = 0.5 * a(i, j) + (i == j ? 0.5 : 0.0);
                z += adj(i, j);
            }
            for (std::size_t j = 0; j < side; ++j) adj(i, j) /= z;
        }
        acc = detail::matmul_dense(adj, acc);
        stages.push_back(acc);
    }
    return stages;
}

/// Patch heatmap of one frame: [CLS] row of the rollout over patch columns,
/// renormalized to sum 1. Throws when no mass reaches any patch.
inline std::vector<double> attention_rollout(const std::vector<Tensor<double>>& layers) {
    const Tensor<double> r = rollout_stages(layers).back();
    const std::size_t n = r.dim(0) - 1;
    std::vector<double> heat(n);
    double total = 0;
    for (std::size_t p = 0; p < n; ++p) total += heat[p] = r(0, 1 + p);
    if (!(total > 1e-12)) throw ValueError("rollout: degenerate heatmap, all attention stays on [CLS]");
    for (double& v : heat) v /= total;
    return heat;
}

/// Spatial maps of frame t from encoder attention stored as T x (1+N) x (1+N)
/// per layer.
inline std::vector<Tensor<double>> frame_maps(const std::vector<Tensor<double>>& encoder_attn, std::size_t t) {
    std::vector<Tensor<double>> out;
    for (const auto& a : encoder_attn) {
        if (a.rank() != 3 || t >= a.dim(0)) throw DimensionError("frame_maps: frame index out of range");
        const std::size_t side = a.dim(1);
        std::vector<double> m(a.data().begin() + static_cast<std::ptrdiff_t>(t * side * side),
                              a.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * side * side));
        out.emplace_back(Shape{side, side}, std::move(m));
    }
    return out;
}

/// Nearest-neighbour upsampling of a grid_rows x grid_cols heatmap by
/// `patch`, min-max scaled to 0..255. A constant heatmap maps to mid gray.
inline Image heatmap_image(std::span<const double> heat, std::size_t grid_rows, std::size_t grid_cols, std::size_t patch) {
    if (heat.size() != grid_rows * grid_cols)
        throw DimensionError("heatmap has " + std::to_string(heat.size()) + " values for a " + std::to_string(grid_rows) +
                             "x" + std::to_string(grid_cols) + " grid");
    const auto [lo_it, hi_it] = std::minmax_element(heat.begin(), heat.end());
    const double lo = *lo_it, range = *hi_it - *lo_it;
    Image img{grid_cols * patch, grid_rows * patch, 1, {}};
    img.pixels.resize(img.width * img.height);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const double v = heat[(y / patch) * grid_cols + x / patch];
            const double s = range > 0 ? (v - lo) / range : 0.5;
            img.at(x, y) = static_cast<std::uint8_t>(std::lround(s * 255.0));
        }
    return img;
}

inline void export_heatmap(std::span<const double> heat, std::size_t grid_rows, std::size_t grid_cols, std::size_t patch,
                           const std::filesystem::path& path) {
    write_pnm(path, heatmap_image(heat, grid_rows, grid_cols, patch));
}

// ---------------------------------------------------------------------------
// Reports

struct SamplePrediction {
    std::string id;
    std::size_t fold = 0;
    std::vector<double> pred;
    std::vector<double> label;
};

struct EvalReport {
    std::vector<SetMetrics> folds;
    SetMetrics average;
    /// Constant predictor of the training-set mean distribution, per fold.
    std::vector<SetMetrics> baseline_folds;
    SetMetrics baseline;
    std::vector<SamplePrediction> samples;
};

/// Averages each field over folds.
inline SetMetrics average_metrics(const std::vector<SetMetrics>& folds) {
    if (folds.empty()) throw ValueError("average_metrics: no folds");
    SetMetrics m;
    const double k = static_cast<double>(folds.size());
    for (const auto& f : folds) {
        m.count += f.count;
        m.mse += f.mse / k;
        m.js += f.js / k;
        for (std::size_t i = 0; i < 5; ++i) m.ba[i] += f.ba[i] / k;
        m.ba_mean += f.ba_mean / k;
    }
    return m;
}

inline nlohmann::json to_json(const SetMetrics& m) {
    return {{"count", m.count}, {"mse", m.mse}, {"js", m.js}, {"balanced_accuracy", m.ba}, {"balanced_accuracy_avg", m.ba_mean}};
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["folds"] = nlohmann::json::array();
    for (const auto& f : r.folds) j["folds"].push_back(to_json(f));
    j["average"] = to_json(r.average);
    j["baseline_folds"] = nlohmann::json::array();
    for (const auto& f : r.baseline_folds) j["baseline_folds"].push_back(to_json(f));
    j["baseline"] = to_json(r.baseline);
    j["samples"] = nlohmann::json::array();
    for (const auto& s : r.samples)
        j["samples"].push_back({{"id", s.id}, {"fold", s.fold}, {"pred", s.pred}, {"label", s.label}});
    return j;
}

} // namespace rostfine
