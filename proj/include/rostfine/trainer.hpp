#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rostfine/binary_io.hpp"
#include "rostfine/config.hpp"
#include "rostfine/dataset.hpp"
#include "rostfine/evalviz.hpp"
#include "rostfine/model.hpp"
#include "rostfine/parallel.hpp"

namespace rostfine {

// ---------------------------------------------------------------------------
// Optimizer

/// Momentum buffers aligned with the parameter order.
struct SgdState {
    std::vector<Tensor<double>> momentum;
};

/// buf <- momentum * buf + (grad + weight_decay * param); param <- param - lr * buf.
/// In checked mode a non-finite gradient is rejected before anything changes.
inline void sgd_step(ParameterSet<double>& params, const std::vector<Tensor<double>>& grads, SgdState& state,
                     const TrainConfig& cfg, bool checked = true) {
    if (grads.size() != params.size())
        throw DimensionError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                             std::to_string(params.size()) + " parameters");
    if (state.momentum.empty())
        for (const auto& p : params.tensors()) state.momentum.emplace_back(p.shape());
    if (state.momentum.size() != params.size()) throw DimensionError("sgd_step: optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& shape = params.tensors()[i].shape();
        if (grads[i].shape() != shape || state.momentum[i].shape() != shape)
            throw DimensionError("sgd_step: shape mismatch for parameter '" + params.names()[i] + "'");
        if (checked && !grads[i].all_finite())
            throw NonFiniteError("sgd_step: non-finite gradient for parameter '" + params.names()[i] + "'");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params.tensors()[i].data();
        auto g = grads[i].data();
        auto b = state.momentum[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            b[j] = cfg.momentum * b[j] + (g[j] + cfg.weight_decay * p[j]);
            p[j] -= cfg.lr * b[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-validation folds

/// Fold index per sample (aligned with `ds`). Samples are grouped by their
/// most-selected grade, ordered by id, shuffled per grade, and dealt
/// round-robin, so every fold gets floor or ceil of each grade's share.
inline std::vector<std::size_t> kfold_split(const Dataset& ds, std::size_t folds, std::uint64_t seed) {
    if (ds.empty()) throw ValueError("kfold_split: empty dataset");
    if (folds < 2) throw ValueError("kfold_split: folds must be at least 2", "train.folds");
    if (folds > ds.size())
        throw ValueError("kfold_split: " + std::to_string(folds) + " folds for " + std::to_string(ds.size()) + " samples",
                         "train.folds");
    std::array<std::vector<std::size_t>, 5> by_grade;
    for (std::size_t i = 0; i < ds.size(); ++i) by_grade[most_selected(ds[i].label)].push_back(i);
    std::vector<std::size_t> order;
    for (std::size_t g = 0; g < 5; ++g) {
        auto& v = by_grade[g];
        std::sort(v.begin(), v.end(), [&](std::size_t a, std::size_t b) { return ds[a].id < ds[b].id; });
        Rng rng(derive_seed(seed, 0xf01d0 + g));
        shuffle(v, rng);
        order.insert(order.end(), v.begin(), v.end());
    }
    std::vector<std::size_t> fold(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) fold[order[i]] = i % folds;
    return fold;
}

// ---------------------------------------------------------------------------
// Training

/// Per-epoch record. Cosines are mean |cos| over the epoch's samples and NaN
/// when the pair is not active.
struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0;
    double cos_gs = std::numeric_limits<double>::quiet_NaN();
    double cos_gt = std::numeric_limits<double>::quiet_NaN();
    double cos_st = std::numeric_limits<double>::quiet_NaN();
};

struct SampleStep {
    double loss = 0;
    std::vector<Tensor<double>> grads;
    std::array<double, 3> cos{};
};

/// Forward, loss and backward for one sample.
inline SampleStep sample_step(const Model<double>& model, const Tensor<double>& clip, const GradeDistribution& label,
                              const LossConfig& loss_cfg, bool checked) {
    Tape<double> tape(checked);
    Context<double> ctx(tape, model.params());
    const auto out = model.forward(ctx, clip);
    const auto probs = label.probs();
    Var<double> y = tape.constant(Tensor<double>(Shape{1, 5}, std::vector<double>(probs.begin(), probs.end())));
    Var<double> loss = total_loss(out.triple, out.prediction, y, model.config().aggregation, loss_cfg);
    SampleStep s;
    s.loss = loss.value().item();
    if (!std::isfinite(s.loss)) return s;
    tape.backward(loss);
    s.grads = ctx.gradients();
    const auto& t = out.triple;
    auto abs_cos = [](const std::optional<Var<double>>& a, const std::optional<Var<double>>& b) {
        if (!a || !b) return std::numeric_limits<double>::quiet_NaN();
        return std::abs(cosine_value(a->value().data(), b->value().data()));
    };
    s.cos = {abs_cos(t.v_g, t.v_s), abs_cos(t.v_g, t.v_t), abs_cos(t.v_s, t.v_t)};
    return s;
}

struct FitOptions {
    /// Reject non-finite intermediate values and gradients as they appear.
    bool checked = false;
    std::function<void(const EpochLog&)> on_epoch;
};

/// Minibatch SGD over `train`. Samples within a batch run in parallel and
/// their gradients are summed in batch order.
inline std::vector<EpochLog> fit(Model<double>& model, const Dataset& train, const TrainConfig& cfg,
                                 const LossConfig& loss_cfg, SgdState& state, const FitOptions& opts = {}) {
    cfg.validate();
    loss_cfg.validate();
    if (train.empty()) throw ValueError("fit: empty training set");
    std::vector<Tensor<double>> clips;
    clips.reserve(train.size());
    for (const auto& s : train) clips.push_back(s.clip.cast<double>());

    std::vector<EpochLog> logs;
    Rng rng(derive_seed(cfg.seed, 0x7a11));
    std::vector<std::size_t> order(train.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle(order, rng);
        EpochLog log;
        log.epoch = epoch;
        double loss_sum = 0;
        std::array<double, 3> cos_sum{};
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            std::vector<SampleStep> steps(n);
            try {
                parallel_for(n, [&](std::size_t b) {
                    const std::size_t i = order[start + b];
                    steps[b] = sample_step(model, clips[i], train[i].label, loss_cfg, opts.checked);
                });
            } catch (const NonFiniteError& e) {
                throw NonFiniteError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
            }
            std::vector<Tensor<double>> grads;
            double batch_loss = 0;
            for (std::size_t b = 0; b < n; ++b) {
                if (!std::isfinite(steps[b].loss))
                    throw NonFiniteError("training diverged at epoch " + std::to_string(epoch) + ": loss is not finite");
                batch_loss += steps[b].loss;
                for (std::size_t k = 0; k < 3; ++k) cos_sum[k] += steps[b].cos[k];
                if (grads.empty()) {
                    grads = std::move(steps[b].grads);
                    continue;
                }
                for (std::size_t p = 0; p < grads.size(); ++p) {
                    auto dst = grads[p].data();
                    auto src = steps[b].grads[p].data();
                    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                }
            }
            const double inv = 1.0 / static_cast<double>(n);
            for (auto& g : grads)
                for (double& v : g.data()) v *= inv;
            sgd_step(model.params(), grads, state, cfg, opts.checked);
            loss_sum += batch_loss;
        }
        const double count = static_cast<double>(order.size());
        log.loss = loss_sum / count;
        log.cos_gs = cos_sum[0] / count;
        log.cos_gt = cos_sum[1] / count;
        log.cos_st = cos_sum[2] / count;
        if (!std::isfinite(log.loss))
            throw NonFiniteError("training diverged at epoch " + std::to_string(epoch) + ": loss is not finite");
        logs.push_back(log);
        if (opts.on_epoch) opts.on_epoch(log);
    }
    return logs;
}

/// Mean label distribution of a set: the constant baseline predictor.
inline std::vector<double> mean_distribution(const Dataset& ds) {
    if (ds.empty()) throw ValueError("mean_distribution: empty dataset");
    std::vector<double> m(5, 0.0);
    for (const auto& s : ds) {
        const auto p = s.label.probs();
        for (std::size_t i = 0; i < 5; ++i) m[i] += p[i];
    }
    for (double& v : m) v /= static_cast<double>(ds.size());
    return m;
}

inline std::vector<std::vector<double>> label_probs(const Dataset& ds) {
    std::vector<std::vector<double>> out;
    for (const auto& s : ds) {
        const auto p = s.label.probs();
        out.emplace_back(p.begin(), p.end());
    }
    return out;
}

inline std::vector<std::vector<double>> predict_all(const Model<double>& model, const Dataset& ds) {
    std::vector<std::vector<double>> out(ds.size());
    parallel_for(ds.size(), [&](std::size_t i) { out[i] = model.predict(ds[i].clip.cast<double>()); });
    return out;
}

/// Splits `ds` into (train, test) by fold assignment.
inline std::pair<Dataset, Dataset> split_fold(const Dataset& ds, const std::vector<std::size_t>& fold, std::size_t k) {
    std::pair<Dataset, Dataset> out;
    for (std::size_t i = 0; i < ds.size(); ++i) (fold[i] == k ? out.second : out.first).push_back(ds[i]);
    return out;
}

/// Adds one evaluated fold (model and baseline) to a report.
inline void add_fold(EvalReport& report, std::size_t k, const Model<double>& model, const Dataset& train,
                     const Dataset& test, double js_eps) {
    const auto preds = predict_all(model, test);
    const auto labels = label_probs(test);
    report.folds.push_back(dataset_metrics(preds, labels, js_eps));
    const std::vector<std::vector<double>> base(test.size(), mean_distribution(train));
    report.baseline_folds.push_back(dataset_metrics(base, labels, js_eps));
    for (std::size_t i = 0; i < test.size(); ++i) report.samples.push_back({test[i].id, k, preds[i], labels[i]});
}

inline void finish_report(EvalReport& r) {
    r.average = average_metrics(r.folds);
    r.baseline = average_metrics(r.baseline_folds);
}

/// Full k-fold run: a fresh model per fold, trained on the other folds.
inline EvalReport cross_validate(const Dataset& ds, const RunConfig& cfg,
                                 std::function<void(std::size_t, const EpochLog&)> on_epoch = {}) {
    cfg.validate();
    const auto fold = kfold_split(ds, cfg.train.folds, cfg.seed);
    EvalReport report;
    for (std::size_t k = 0; k < cfg.train.folds; ++k) {
        const auto [train, test] = split_fold(ds, fold, k);
        auto model = Model<double>::create(cfg.model);
        SgdState state;
        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(cfg.train.seed, k);
        FitOptions opts;
        if (on_epoch) opts.on_epoch = [&](const EpochLog& l) { on_epoch(k, l); };
        fit(model, train, tc, cfg.loss, state, opts);
        add_fold(report, k, model, train, test, cfg.loss.kl_epsilon);
    }
    finish_report(report);
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[8] = {'R', 'S', 'T', 'F', '\0', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kMomentumPrefix = "momentum:";

struct Checkpoint {
    RunConfig config;
    /// Fold left out of training, if any.
    std::optional<std::size_t> held_out_fold;
    ParameterSet<float> params;
    /// Empty, or one buffer per parameter.
    std::vector<Tensor<float>> momentum;
};

inline Checkpoint make_checkpoint(const RunConfig& cfg, std::optional<std::size_t> held_out, const Model<double>& model,
                                  const SgdState& state) {
    Checkpoint c{cfg, held_out, model.params().cast<float>(), {}};
    for (const auto& m : state.momentum) c.momentum.push_back(m.cast<float>());
    return c;
}

inline std::string checkpoint_config_text(const Checkpoint& c) {
    nlohmann::json j{{"run", to_json(c.config)}, {"held_out_fold", nullptr}};
    if (c.held_out_fold) j["held_out_fold"] = *c.held_out_fold;
    return j.dump();
}

namespace detail {

inline void put_record(std::ostream& out, const std::string& name, const Tensor<float>& t) {
    binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) binary::put<std::uint64_t>(out, d);
    for (float v : t.data()) binary::put<float>(out, v);
}

} // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& c) {
    if (!c.momentum.empty() && c.momentum.size() != c.params.size())
        throw DimensionError("checkpoint: momentum buffers do not match parameters");
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    binary::put<std::uint32_t>(out, kCheckpointVersion);
    const std::string text = checkpoint_config_text(c);
    binary::put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    binary::put<std::uint64_t>(out, c.params.size() + c.momentum.size());
    for (std::size_t i = 0; i < c.params.size(); ++i) detail::put_record(out, c.params.names()[i], c.params.tensors()[i]);
    for (std::size_t i = 0; i < c.momentum.size(); ++i)
        detail::put_record(out, kMomentumPrefix + c.params.names()[i], c.momentum[i]);
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    write_checkpoint(out, c);
    if (!out) throw IoError("write failed for " + path.string());
}

inline Checkpoint read_checkpoint(std::istream& in, const std::string& what) {
    char magic[8];
    binary::get_bytes(in, magic, sizeof magic, what);
    if (!std::equal(magic, magic + 8, kCheckpointMagic))
        throw FormatError(FormatError::Kind::BadMagic, what + ": not a checkpoint");
    const auto version = binary::get<std::uint32_t>(in, what);
    if (version != kCheckpointVersion)
        throw FormatError(FormatError::Kind::UnsupportedVersion,
                          what + ": unsupported version " + std::to_string(version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    // Sizes are bounded before allocating so a damaged header cannot request
    // absurd amounts of memory.
    constexpr std::uint64_t kMaxText = 1 << 20, kMaxName = 4096, kMaxElems = std::uint64_t{1} << 32;
    const auto text_len = binary::get<std::uint64_t>(in, what);
    if (text_len > kMaxText) throw FormatError(FormatError::Kind::Corruption, what + ": config length out of range");
    std::string text(text_len, '\0');
    binary::get_bytes(in, text.data(), text.size(), what);

    Checkpoint c;
    try {
        const auto j = nlohmann::json::parse(text);
        c.config = run_config_from_json(j.at("run"));
        if (!j.at("held_out_fold").is_null()) c.held_out_fold = j.at("held_out_fold").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Schema, what + ": bad config text: " + e.what());
    }
    c.config.validate();

    const auto records = binary::get<std::uint64_t>(in, what);
    std::vector<std::pair<std::string, Tensor<float>>> momentum;
    for (std::uint64_t r = 0; r < records; ++r) {
        const auto name_len = binary::get<std::uint32_t>(in, what);
        if (name_len == 0 || name_len > kMaxName)
            throw FormatError(FormatError::Kind::Corruption, what + ": record name length out of range");
        std::string name(name_len, '\0');
        binary::get_bytes(in, name.data(), name.size(), what);
        const auto rank = binary::get<std::uint32_t>(in, what);
        if (rank > 8) throw FormatError(FormatError::Kind::Corruption, what + ": record '" + name + "' has rank " + std::to_string(rank));
        Shape shape(rank);
        std::uint64_t elems = 1;
        for (auto& d : shape) {
            d = binary::get<std::uint64_t>(in, what);
            elems *= d;
            if (elems > kMaxElems) throw FormatError(FormatError::Kind::Corruption, what + ": record '" + name + "' too large");
        }
        std::vector<float> data(elems);
        binary::get_bytes(in, reinterpret_cast<char*>(data.data()), data.size() * sizeof(float), what);
        Tensor<float> t(std::move(shape), std::move(data));
        if (name.rfind(kMomentumPrefix, 0) == 0) momentum.emplace_back(name.substr(std::string(kMomentumPrefix).size()), std::move(t));
        else c.params.add(name, std::move(t));
    }
    if (in.peek() != std::char_traits<char>::eof())
        throw FormatError(FormatError::Kind::Corruption, what + ": trailing bytes after the last record");
    if (!momentum.empty()) {
        if (momentum.size() != c.params.size())
            throw FormatError(FormatError::Kind::Schema, what + ": momentum buffers do not cover every parameter");
        for (std::size_t i = 0; i < momentum.size(); ++i) {
            if (momentum[i].first != c.params.names()[i] || momentum[i].second.shape() != c.params.tensors()[i].shape())
                throw FormatError(FormatError::Kind::Schema, what + ": momentum record '" + momentum[i].first +
                                                                 "' does not match parameter order");
            c.momentum.push_back(std::move(momentum[i].second));
        }
    }
    return c;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return read_checkpoint(in, path.string());
}

/// Model in double precision from checkpoint parameters; layout is checked
/// against the stored config.
inline Model<double> model_from_checkpoint(const Checkpoint& c) {
    return Model<double>(c.config.model, c.params.cast<double>());
}

inline SgdState state_from_checkpoint(const Checkpoint& c) {
    SgdState s;
    for (const auto& m : c.momentum) s.momentum.push_back(m.cast<double>());
    return s;
}

// ---------------------------------------------------------------------------
// Gradient check of the full model

struct ModelGradCheck {
    GradCheckResult result;
    double loss = 0;
    std::size_t params = 0;
};

/// Central-difference check of d(total_loss)/d(parameters) on one random clip
/// and label drawn from `cfg.seed`. The patch selection is fixed from the
/// unperturbed forward pass so that top-K switching cannot break the
/// finite differences.
inline ModelGradCheck check_model_gradients(const RunConfig& cfg, double h = 1e-5, GradCheckOptions opts = {}) {
    cfg.validate();
    const auto model = Model<double>::create(cfg.model);
    Rng rng(derive_seed(cfg.seed, 0x9c));
    const auto& m = cfg.model;
    Tensor<double> clip(Shape{m.frames, m.height, m.width, 3});
    for (double& v : clip.data()) v = uniform01(rng);
    GradeDistribution label;
    for (int v = 0; v < 40; ++v) ++label.counts[uniform_index(rng, 5)];
    const auto probs = label.probs();

    std::optional<SelectedPatches> sel;
    {
        Tape<double> tape;
        Context<double> ctx(tape, model.params(), false);
        sel = model.forward(ctx, clip).selection;
    }
    auto f = [&](Tape<double>& tape, std::span<const Var<double>> leaves) {
        Context<double> ctx(tape, model.params());
        ctx.bind_all(leaves);
        const auto out = model.forward(ctx, clip, sel ? &*sel : nullptr);
        Var<double> y = tape.constant(Tensor<double>(Shape{1, 5}, std::vector<double>(probs.begin(), probs.end())));
        return total_loss(out.triple, out.prediction, y, m.aggregation, cfg.loss);
    };
    ModelGradCheck res;
    {
        Tape<double> tape;
        std::vector<Var<double>> leaves;
        for (const auto& p : model.params().tensors()) leaves.push_back(tape.constant(p));
        res.loss = f(tape, leaves).value().item();
    }
    res.params = model.params().size();
    res.result = grad_check(f, model.params().tensors(), h, opts);
    return res;
}

} // namespace rostfine
