#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rostfine/binary_io.hpp"
#include "rostfine/errors.hpp"
#include "rostfine/grades.hpp"
#include "rostfine/parallel.hpp"
#include "rostfine/random.hpp"
#include "rostfine/tensor.hpp"

namespace rostfine {

/// One labelled clip: T x H x W x 3 values in [0, 1].
struct Sample {
    std::string id;
    Tensor<float> clip;
    GradeDistribution label;

    friend bool operator==(const Sample&, const Sample&) = default;
};

using Dataset = std::vector<Sample>;

// ---------------------------------------------------------------------------
// clip.bin

inline constexpr char kClipMagic[8] = {'R', 'S', 'T', 'F', '\0', 'C', 'L', 'P'};
inline constexpr std::uint32_t kClipVersion = 1;

inline void write_clip(std::ostream& out, const Tensor<float>& clip) {
    if (clip.rank() != 4) throw DimensionError("clip must be T x H x W x C, got " + shape_str(clip.shape()));
    out.write(kClipMagic, sizeof kClipMagic);
    binary::put<std::uint32_t>(out, kClipVersion);
    for (std::size_t i = 0; i < 4; ++i) binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(clip.dim(i)));
    for (float v : clip.data()) binary::put<float>(out, v);
}

inline void write_clip(const std::filesystem::path& path, const Tensor<float>& clip) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    write_clip(out, clip);
    if (!out) throw IoError("write failed for " + path.string());
}

inline Tensor<float> read_clip(std::istream& in, const std::string& what) {
    char magic[8];
    binary::get_bytes(in, magic, sizeof magic, what);
    if (!std::equal(magic, magic + 8, kClipMagic))
        throw FormatError(FormatError::Kind::BadMagic, what + ": not a clip file");
    const auto version = binary::get<std::uint32_t>(in, what);
    if (version != kClipVersion)
        throw FormatError(FormatError::Kind::UnsupportedVersion,
                          what + ": unsupported version " + std::to_string(version));
    Shape shape(4);
    for (auto& d : shape) d = binary::get<std::uint32_t>(in, what);
    const std::size_t n = shape_size(shape);
    // Read whatever follows the header and compare against the declared size.
    std::string rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (rest.size() != n * sizeof(float))
        throw FormatError(FormatError::Kind::Corruption, what + ": header declares " + shape_str(shape) + " (" +
                                                             std::to_string(n * sizeof(float)) + " bytes) but payload has " +
                                                             std::to_string(rest.size()) + " bytes");
    std::vector<float> data(n);
    std::memcpy(data.data(), rest.data(), rest.size());
    return Tensor<float>(std::move(shape), std::move(data));
}

inline Tensor<float> read_clip(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return read_clip(in, path.string());
}

// ---------------------------------------------------------------------------
// labels.csv

inline constexpr const char* kLabelsHeader = "sample_id,countA,countB,countC,countD,countE";

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

/// Parses labels.csv into (id, counts) rows in file order.
inline std::vector<std::pair<std::string, GradeDistribution>> read_labels(std::istream& in, const std::string& what) {
    std::vector<std::pair<std::string, GradeDistribution>> rows;
    std::string line;
    std::size_t lineno = 0;
    auto schema = [&](const std::string& msg) {
        return FormatError(FormatError::Kind::Schema, what + " line " + std::to_string(lineno) + ": " + msg);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1) {
            if (line != kLabelsHeader) throw schema("expected header '" + std::string(kLabelsHeader) + "'");
            continue;
        }
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 6) throw schema("expected 6 columns, found " + std::to_string(cells.size()));
        if (cells[0].empty()) throw schema("empty sample_id");
        GradeDistribution g;
        for (std::size_t i = 0; i < 5; ++i) {
            const std::string& c = cells[i + 1];
            if (c.empty() || c.size() > 9 || !std::all_of(c.begin(), c.end(), [](char ch) { return ch >= '0' && ch <= '9'; }))
                throw schema("count '" + c + "' is not a nonnegative integer");
            g.counts[i] = static_cast<std::uint32_t>(std::stoul(c));
        }
        if (g.total() == 0) throw schema("counts for '" + cells[0] + "' are all zero");
        rows.emplace_back(cells[0], g);
    }
    if (lineno == 0) throw FormatError(FormatError::Kind::Schema, what + " line 1: missing header");
    return rows;
}

inline void write_labels(std::ostream& out, const Dataset& ds) {
    out << kLabelsHeader << '\n';
    for (const auto& s : ds) {
        out << s.id;
        for (auto c : s.label.counts) out << ',' << c;
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Dataset directories: <root>/labels.csv and <root>/<sample_id>/clip.bin

inline void write_dataset(const std::filesystem::path& root, const Dataset& ds) {
    std::filesystem::create_directories(root);
    {
        std::ofstream out(root / "labels.csv", std::ios::binary);
        if (!out) throw IoError("cannot write " + (root / "labels.csv").string());
        write_labels(out, ds);
    }
    for (const auto& s : ds) {
        std::filesystem::create_directories(root / s.id);
        write_clip(root / s.id / "clip.bin", s.clip);
    }
}

/// Loads the samples listed in labels.csv. A sample directory without a
/// label row, or a label row without a clip, is a MissingEntry error.
inline Dataset read_dataset(const std::filesystem::path& root, std::size_t limit = 0) {
    const auto labels_path = root / "labels.csv";
    std::ifstream in(labels_path, std::ios::binary);
    if (!in) throw IoError("cannot open " + labels_path.string());
    auto rows = read_labels(in, labels_path.string());

    std::map<std::string, std::size_t> seen;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (!seen.emplace(rows[i].first, i).second)
            throw FormatError(FormatError::Kind::Schema,
                              labels_path.string() + ": duplicate sample_id '" + rows[i].first + "'");
    for (const auto& e : std::filesystem::directory_iterator(root)) {
        if (!e.is_directory()) continue;
        const auto name = e.path().filename().string();
        if (std::filesystem::exists(e.path() / "clip.bin") && !seen.count(name))
            throw FormatError(FormatError::Kind::MissingEntry,
                              labels_path.string() + ": no label row for sample '" + name + "'");
    }
    if (limit > 0 && rows.size() > limit) rows.resize(limit);

    Dataset ds(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto clip_path = root / rows[i].first / "clip.bin";
        if (!std::filesystem::exists(clip_path))
            throw FormatError(FormatError::Kind::MissingEntry, clip_path.string() + ": missing clip for labelled sample");
        ds[i] = Sample{rows[i].first, read_clip(clip_path), rows[i].second};
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic data

inline constexpr GradeProbs kClinicalProfile{45, 194, 356, 9, 11};

struct SynthSpec {
    std::size_t count = 200;
    std::size_t frames = 8;
    std::size_t height = 32;
    std::size_t width = 32;
    /// Relative frequency of each most-selected grade; need not be normalized.
    GradeProbs profile{1, 1, 1, 1, 1};
    std::uint32_t votes = 40;
    std::uint64_t seed = 0;

    void validate() const {
        if (count == 0) throw ValueError("synth count must be positive", "count");
        if (frames < 1) throw ValueError("synth frames must be positive", "frames");
        if (height < 8 || width < 8) throw ValueError("synth frames must be at least 8x8 pixels", "height");
        if (votes < 1) throw ValueError("votes must be positive", "votes");
        double total = 0;
        for (double p : profile) {
            if (!(p >= 0) || !std::isfinite(p)) throw ValueError("profile entries must be finite and >= 0", "profile");
            total += p;
        }
        if (total <= 0) throw ValueError("profile must have a positive entry", "profile");
    }
};

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValueError("synth spec must be a JSON object");
    SynthSpec s;
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "count") s.count = v.get<std::size_t>();
            else if (key == "frames") s.frames = v.get<std::size_t>();
            else if (key == "height") s.height = v.get<std::size_t>();
            else if (key == "width") s.width = v.get<std::size_t>();
            else if (key == "votes") s.votes = v.get<std::uint32_t>();
            else if (key == "seed") s.seed = v.get<std::uint64_t>();
            else if (key == "profile") {
                if (v.is_string()) {
                    const auto name = v.get<std::string>();
                    if (name == "uniform") s.profile = {1, 1, 1, 1, 1};
                    else if (name == "clinical") s.profile = kClinicalProfile;
                    else throw ValueError("unknown profile '" + name + "' (expected uniform, clinical or 5 numbers)", "profile");
                } else {
                    const auto arr = v.get<std::vector<double>>();
                    if (arr.size() != 5) throw ValueError("profile needs 5 entries", "profile");
                    std::copy(arr.begin(), arr.end(), s.profile.begin());
                }
            } else {
                throw ValueError("unknown synth spec key '" + key + "'", key);
            }
        } catch (const nlohmann::json::exception&) {
            throw ValueError("wrong type for synth spec key '" + key + "'", key);
        }
    }
    s.validate();
    return s;
}

/// Number of samples per class: largest-remainder apportionment of `count`.
inline std::array<std::size_t, 5> apportion(const GradeProbs& profile, std::size_t count) {
    double total = 0;
    for (double p : profile) total += p;
    std::array<std::size_t, 5> n{};
    std::array<double, 5> rem{};
    std::size_t used = 0;
    for (std::size_t c = 0; c < 5; ++c) {
        const double exact = profile[c] / total * static_cast<double>(count);
        n[c] = static_cast<std::size_t>(std::floor(exact));
        rem[c] = exact - static_cast<double>(n[c]);
        used += n[c];
    }
    std::array<std::size_t, 5> order{0, 1, 2, 3, 4};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t i = 0; used < count; ++i, ++used) ++n[order[i % 5]];
    return n;
}

/// Vote propensity over grades for a latent grade position mu in [-0.5, 4.5]:
/// a discretized Gaussian bump of width 0.8 grades.
inline GradeProbs grade_propensity(double mu) {
    GradeProbs w{};
    double total = 0;
    for (std::size_t g = 0; g < 5; ++g) {
        const double d = (static_cast<double>(g) - mu) / 0.8;
        w[g] = std::exp(-0.5 * d * d);
        total += w[g];
    }
    for (double& v : w) v /= total;
    return w;
}

/// Latent quality q in [0, 1] (1 = best) for a grade position mu.
inline double quality_of(double mu) { return std::clamp((4.5 - mu) / 5.0, 0.0, 1.0); }

/// Draws `votes` expert grades, retrying until the most-selected grade is
/// `target` so that class frequencies follow the requested profile.
inline GradeDistribution draw_votes(Rng& rng, double mu, std::size_t target, std::uint32_t votes) {
    const auto p = grade_propensity(mu);
    const std::vector<double> w(p.begin(), p.end());
    for (;;) {
        GradeDistribution g;
        for (std::uint32_t v = 0; v < votes; ++v) ++g.counts[categorical(rng, w)];
        if (most_selected(g) == target) return g;
    }
}

/// Renders one clip. Higher quality means a larger, steadier head, faster
/// straighter motion and a wider tail beat; low quality heads wobble in size
/// and drift erratically.
inline Tensor<float> render_sperm_clip(Rng& rng, double q, std::size_t frames, std::size_t height, std::size_t width) {
    Tensor<float> clip(Shape{frames, height, width, 3});
    auto px = clip.data();
    const double W = static_cast<double>(width), H = static_cast<double>(height);
    const double scale = std::min(W, H);

    double cx = W * uniform(rng, 0.35, 0.65), cy = H * uniform(rng, 0.35, 0.65);
    double heading = uniform(rng, 0, 2 * std::numbers::pi);
    const double speed = scale * (0.01 + 0.05 * q);
    const double wobble = 0.9 * (1 - q);
    const double a0 = scale * (0.07 + 0.06 * q), b0 = a0 * 0.65;
    const double tail_len = scale * 0.35, tail_amp = scale * (0.02 + 0.08 * q);
    const double beat = uniform(rng, 0, 2 * std::numbers::pi);
    const double brightness = 0.55 + 0.35 * q;

    for (std::size_t t = 0; t < frames; ++t) {
        heading += wobble * standard_normal(rng);
        cx += speed * std::cos(heading);
        cy += speed * std::sin(heading);
        // Reflect at a margin so the target stays in view, as after tracking.
        const double mx = W * 0.2, my = H * 0.2;
        if (cx < mx || cx > W - mx) { heading = std::numbers::pi - heading; cx = std::clamp(cx, mx, W - mx); }
        if (cy < my || cy > H - my) { heading = -heading; cy = std::clamp(cy, my, H - my); }
        const double irregular = 1 + (1 - q) * 0.35 * standard_normal(rng);
        const double a = a0 * std::max(0.4, irregular), b = b0 * std::max(0.4, 2 - irregular);
        const double ux = std::cos(heading), uy = std::sin(heading);
        const double phase = beat + static_cast<double>(t) * 1.3;
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
                // Coordinates along (u) and across (v) the heading.
                const double u = dx * ux + dy * uy, v = -dx * uy + dy * ux;
                const double e = (u * u) / (a * a) + (v * v) / (b * b);
                double val = 0.15 + 0.05 * standard_normal(rng);
                if (e <= 1) val = brightness;
                else if (u < -a * 0.8 && u > -a - tail_len) {
                    const double s = (-u - a) / tail_len;
                    const double centre = tail_amp * s * std::sin(phase + 6 * s);
                    if (std::abs(v - centre) < 0.6) val = std::max(val, 0.5 * brightness);
                }
                const float f = static_cast<float>(std::clamp(val, 0.0, 1.0));
                float* p = &px[((t * height + y) * width + x) * 3];
                p[0] = f;
                p[1] = f;
                p[2] = static_cast<float>(std::clamp(val * 0.9, 0.0, 1.0));
            }
    }
    return clip;
}

/// Deterministic synthetic dataset. Sample i draws from its own stream, so
/// results do not depend on the worker count.
inline Dataset synthesize_dataset(const SynthSpec& spec) {
    spec.validate();
    const auto per_class = apportion(spec.profile, spec.count);
    std::vector<std::size_t> targets;
    for (std::size_t c = 0; c < 5; ++c) targets.insert(targets.end(), per_class[c], c);
    Rng order_rng(derive_seed(spec.seed, 0x5e7));
    shuffle(targets, order_rng);

    Dataset ds(spec.count);
    const int width = static_cast<int>(std::to_string(spec.count - 1).size());
    parallel_for(spec.count, [&](std::size_t i) {
        Rng rng(derive_seed(spec.seed, 0x10000 + i));
        const std::size_t c = targets[i];
        const double mu = static_cast<double>(c) + uniform(rng, -0.45, 0.45);
        Sample s;
        char id[32];
        std::snprintf(id, sizeof id, "s%0*zu", std::max(width, 4), i);
        s.id = id;
        s.label = draw_votes(rng, mu, c, spec.votes);
        s.clip = render_sperm_clip(rng, quality_of(mu), spec.frames, spec.height, spec.width);
        ds[i] = std::move(s);
    });
    return ds;
}

} // namespace rostfine
