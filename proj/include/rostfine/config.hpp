#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "rostfine/errors.hpp"

namespace rostfine {

enum class LossKind { Mse, Js };
enum class Aggregation { Mean, Sum, Concat };

inline std::string to_string(LossKind k) { return k == LossKind::Mse ? "mse" : "js"; }

inline std::string to_string(Aggregation a) {
    switch (a) {
    case Aggregation::Mean: return "mean";
    case Aggregation::Sum: return "sum";
    case Aggregation::Concat: return "concat";
    }
    return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "mse") return LossKind::Mse;
    if (s == "js") return LossKind::Js;
    throw ValueError("unknown loss kind '" + s + "' (expected mse or js)", "loss.kind");
}

inline Aggregation parse_aggregation(const std::string& s) {
    if (s == "mean") return Aggregation::Mean;
    if (s == "sum") return Aggregation::Sum;
    if (s == "concat") return Aggregation::Concat;
    throw ValueError("unknown aggregation '" + s + "' (expected mean, sum or concat)", "model.aggregation");
}

/// Which of the global / spatial / temporal embeddings take part in training
/// and inference.
struct FeatureSet {
    bool global = true;
    bool spatial = true;
    bool temporal = true;

    std::size_t count() const { return std::size_t(global) + std::size_t(spatial) + std::size_t(temporal); }
    bool needs_selection() const { return spatial || temporal; }
    std::string str() const {
        std::string s;
        if (global) s += 'g';
        if (spatial) s += 's';
        if (temporal) s += 't';
        return s;
    }
    static FeatureSet parse(const std::string& s) {
        FeatureSet f{false, false, false};
        for (char c : s) {
            if (c == 'g') f.global = true;
            else if (c == 's') f.spatial = true;
            else if (c == 't') f.temporal = true;
            else throw ValueError("feature set '" + s + "' may only contain g, s, t", "model.features");
        }
        if (f.count() == 0) throw ValueError("feature set must not be empty", "model.features");
        return f;
    }
    friend bool operator==(const FeatureSet&, const FeatureSet&) = default;
};

struct ModelConfig {
    std::size_t frames = 8;   // T
    std::size_t height = 32;  // frame height in pixels
    std::size_t width = 32;
    std::size_t patch = 8;    // P
    std::size_t dim = 32;     // d
    std::size_t depth = 2;    // L, encoder and branch depth
    std::size_t heads = 4;    // H
    std::size_t mlp_ratio = 4;
    std::size_t top_k = 4;    // K, patches kept per frame
    FeatureSet features;
    Aggregation aggregation = Aggregation::Mean;
    /// Literal equation forms: no residual connections, 1/(KT) spatial pooling.
    bool strict_equations = false;
    double init_std = 0.02;
    double ln_eps = 1e-6;
    std::uint64_t seed = 0;

    std::size_t patches_per_frame() const { return (height / patch) * (width / patch); }
    std::size_t tokens() const { return 1 + patches_per_frame() * frames; }
    std::size_t patch_dim() const { return 3 * patch * patch; }
    std::size_t grid_rows() const { return height / patch; }
    std::size_t grid_cols() const { return width / patch; }

    void validate() const {
        auto need = [](bool ok, const char* field, const std::string& msg) {
            if (!ok) throw ValueError(msg, field);
        };
        need(frames >= 1, "model.frames", "frames must be positive");
        need(patch >= 1, "model.patch", "patch must be positive");
        need(height >= patch && height % patch == 0, "model.height", "height must be a positive multiple of patch");
        need(width >= patch && width % patch == 0, "model.width", "width must be a positive multiple of patch");
        need(heads >= 1, "model.heads", "heads must be positive");
        need(dim >= 1 && dim % heads == 0, "model.dim", "dim must be a positive multiple of heads");
        need(depth >= 2, "model.depth", "depth must be at least 2 (patch selection reads two layers)");
        need(mlp_ratio >= 1, "model.mlp_ratio", "mlp_ratio must be positive");
        need(top_k >= 1 && top_k <= patches_per_frame(), "model.top_k",
             "top_k must lie in [1, " + std::to_string(patches_per_frame()) + "]");
        need(features.count() > 0, "model.features", "at least one feature must be active");
        need(std::isfinite(init_std) && init_std > 0, "model.init_std", "init_std must be positive");
        need(std::isfinite(ln_eps) && ln_eps > 0, "model.ln_eps", "ln_eps must be positive");
    }
};

struct LossConfig {
    LossKind kind = LossKind::Mse;
    double alpha = 0.0;
    double kl_epsilon = 1e-8;

    void validate() const {
        if (!std::isfinite(alpha) || alpha < 0) throw ValueError("alpha must be finite and >= 0", "loss.alpha");
        if (!(kl_epsilon > 0 && kl_epsilon <= 1e-3))
            throw ValueError("kl_epsilon must lie in (0, 1e-3]", "loss.kl_epsilon");
    }
};

struct TrainConfig {
    double lr = 1e-3;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t batch_size = 8;
    std::size_t epochs = 200;
    std::size_t folds = 5;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(std::isfinite(lr) && lr > 0)) throw ValueError("lr must be positive", "train.lr");
        if (!(momentum >= 0 && momentum < 1)) throw ValueError("momentum must lie in [0, 1)", "train.momentum");
        if (!(std::isfinite(weight_decay) && weight_decay >= 0))
            throw ValueError("weight_decay must be >= 0", "train.weight_decay");
        if (batch_size < 1) throw ValueError("batch_size must be positive", "train.batch_size");
        if (folds < 2) throw ValueError("folds must be at least 2", "train.folds");
    }
};

struct DataConfig {
    /// Use only the first `limit` samples (by label order); 0 uses all.
    std::size_t limit = 0;
};

/// Everything a run needs. `seed` is the single source of randomness; it is
/// copied into the model and train sections by `apply_seed`.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    LossConfig loss;
    DataConfig data;
    std::uint64_t seed = 0;

    void apply_seed() {
        model.seed = seed;
        train.seed = seed;
    }

    void validate() const {
        model.validate();
        train.validate();
        loss.validate();
    }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

template <typename V>
void read_field(const nlohmann::json& j, const char* section, const char* key, V& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ValueError(std::string("wrong type for ") + section + "." + key, std::string(section) + "." + key);
    }
}

inline void reject_unknown(const nlohmann::json& j, const char* section, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ValueError(std::string("section '") + section + "' must be an object", section);
    for (const auto& [k, v] : j.items()) {
        bool known = false;
        for (const char* key : keys) known = known || k == key;
        if (!known) throw ValueError("unknown key '" + k + "' in section " + section, std::string(section) + "." + k);
    }
}

} // namespace detail

inline nlohmann::json to_json(const ModelConfig& m) {
    return {{"frames", m.frames},       {"height", m.height},
            {"width", m.width},         {"patch", m.patch},
            {"dim", m.dim},             {"depth", m.depth},
            {"heads", m.heads},         {"mlp_ratio", m.mlp_ratio},
            {"top_k", m.top_k},         {"features", m.features.str()},
            {"aggregation", to_string(m.aggregation)},
            {"strict_equations", m.strict_equations},
            {"init_std", m.init_std},   {"ln_eps", m.ln_eps}};
}

inline nlohmann::json to_json(const TrainConfig& t) {
    return {{"lr", t.lr},
            {"momentum", t.momentum},
            {"weight_decay", t.weight_decay},
            {"batch_size", t.batch_size},
            {"epochs", t.epochs},
            {"folds", t.folds}};
}

inline nlohmann::json to_json(const LossConfig& l) {
    return {{"kind", to_string(l.kind)}, {"alpha", l.alpha}, {"kl_epsilon", l.kl_epsilon}};
}

inline nlohmann::json to_json(const RunConfig& r) {
    return {{"model", to_json(r.model)},
            {"train", to_json(r.train)},
            {"loss", to_json(r.loss)},
            {"data", {{"limit", r.data.limit}}},
            {"seed", r.seed}};
}

/// Overlays values from `j` onto `r`. Unknown keys and wrong types are errors.
inline void merge_json(RunConfig& r, const nlohmann::json& j) {
    detail::reject_unknown(j, "config", {"model", "train", "loss", "data", "seed"});
    if (j.contains("model")) {
        const auto& m = j["model"];
        detail::reject_unknown(m, "model", {"frames", "height", "width", "patch", "dim", "depth", "heads",
                                            "mlp_ratio", "top_k", "features", "aggregation",
                                            "strict_equations", "init_std", "ln_eps"});
        detail::read_field(m, "model", "frames", r.model.frames);
        detail::read_field(m, "model", "height", r.model.height);
        detail::read_field(m, "model", "width", r.model.width);
        detail::read_field(m, "model", "patch", r.model.patch);
        detail::read_field(m, "model", "dim", r.model.dim);
        detail::read_field(m, "model", "depth", r.model.depth);
        detail::read_field(m, "model", "heads", r.model.heads);
        detail::read_field(m, "model", "mlp_ratio", r.model.mlp_ratio);
        detail::read_field(m, "model", "top_k", r.model.top_k);
        detail::read_field(m, "model", "strict_equations", r.model.strict_equations);
        detail::read_field(m, "model", "init_std", r.model.init_std);
        detail::read_field(m, "model", "ln_eps", r.model.ln_eps);
        std::string s;
        if (m.contains("features")) {
            detail::read_field(m, "model", "features", s);
            r.model.features = FeatureSet::parse(s);
        }
        if (m.contains("aggregation")) {
            detail::read_field(m, "model", "aggregation", s);
            r.model.aggregation = parse_aggregation(s);
        }
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        detail::reject_unknown(t, "train", {"lr", "momentum", "weight_decay", "batch_size", "epochs", "folds"});
        detail::read_field(t, "train", "lr", r.train.lr);
        detail::read_field(t, "train", "momentum", r.train.momentum);
        detail::read_field(t, "train", "weight_decay", r.train.weight_decay);
        detail::read_field(t, "train", "batch_size", r.train.batch_size);
        detail::read_field(t, "train", "epochs", r.train.epochs);
        detail::read_field(t, "train", "folds", r.train.folds);
    }
    if (j.contains("loss")) {
        const auto& l = j["loss"];
        detail::reject_unknown(l, "loss", {"kind", "alpha", "kl_epsilon"});
        std::string s;
        if (l.contains("kind")) {
            detail::read_field(l, "loss", "kind", s);
            r.loss.kind = parse_loss_kind(s);
        }
        detail::read_field(l, "loss", "alpha", r.loss.alpha);
        detail::read_field(l, "loss", "kl_epsilon", r.loss.kl_epsilon);
    }
    if (j.contains("data")) {
        const auto& d = j["data"];
        detail::reject_unknown(d, "data", {"limit"});
        detail::read_field(d, "data", "limit", r.data.limit);
    }
    if (j.contains("seed")) detail::read_field(j, "config", "seed", r.seed);
    r.apply_seed();
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig r;
    merge_json(r, j);
    return r;
}

} // namespace rostfine
