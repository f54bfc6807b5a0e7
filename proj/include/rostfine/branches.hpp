#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rostfine/config.hpp"
#include "rostfine/nn.hpp"

namespace rostfine {

inline constexpr std::size_t kGrades = 5;

template <typename T>
void add_branch_params(ParameterSet<T>& ps, const std::string& name, const ModelConfig& cfg, Rng& rng) {
    for (std::size_t l = 0; l < cfg.depth; ++l)
        add_attention_block(ps, name + "." + std::to_string(l), cfg.dim, cfg.mlp_ratio, cfg.init_std, rng);
}

template <typename T>
Var<T> run_branch(Context<T>& ctx, Var<T> x, const std::string& name, const Groups& groups, const ModelConfig& cfg) {
    for (std::size_t l = 0; l < cfg.depth; ++l)
        x = attention_block(ctx, x, name + "." + std::to_string(l), groups, cfg.heads, cfg.strict_equations,
                            static_cast<T>(cfg.ln_eps));
    return x;
}

namespace detail {

template <typename T>
void check_branch_input(const Var<T>& f, const Var<T>& v_cls, std::size_t frames, const char* who) {
    if (f.value().rank() != 2 || v_cls.value().rank() != 2 || v_cls.shape()[0] != 1 ||
        f.shape()[1] != v_cls.shape()[1])
        throw DimensionError(std::string(who) + ": selected patches " + shape_str(f.shape()) + " and [CLS] " +
                             shape_str(v_cls.shape()) + " are incompatible");
    if (frames == 0 || f.shape()[0] == 0 || f.shape()[0] % frames != 0)
        throw DimensionError(std::string(who) + ": empty or uneven frame units (" + std::to_string(f.shape()[0]) +
                             " patches over " + std::to_string(frames) + " frames)");
}

} // namespace detail

/// Fine-grained spatial branch. Each frame unit [v_cls; f_(t,1..K)] runs
/// through the shared blocks; v_s is the mean of the per-frame [CLS] outputs
/// (1/(KT) scaling instead in strict mode).
template <typename T>
Var<T> fgs_forward(Context<T>& ctx, const Var<T>& selected, const Var<T>& v_cls, std::size_t frames,
                   const ModelConfig& cfg) {
    detail::check_branch_input(selected, v_cls, frames, "fgs");
    const std::size_t k = selected.shape()[0] / frames, unit = k + 1;
    // Units are stacked; attention stays inside each unit.
    std::vector<std::size_t> order;
    Groups groups(frames);
    std::vector<std::size_t> cls_rows(frames * unit, kDropRow);
    for (std::size_t t = 0; t < frames; ++t) {
        order.push_back(0);
        for (std::size_t j = 0; j < k; ++j) order.push_back(1 + t * k + j);
        for (std::size_t j = 0; j < unit; ++j) groups[t].push_back(t * unit + j);
        cls_rows[t * unit] = 0;
    }
    Var<T> x = gather_rows(concat_rows(std::vector<Var<T>>{v_cls, selected}), order);
    x = run_branch(ctx, x, "fgs", groups, cfg);
    Var<T> v = pool_rows(x, cls_rows, 1);
    return cfg.strict_equations ? scale(v, T{1} / static_cast<T>(k)) : v;
}

/// Fine-grained temporal branch: [v_cls; f_1..f_KT] through the blocks as
/// one sequence; v_t is the final [CLS] row.
template <typename T>
Var<T> fgt_forward(Context<T>& ctx, const Var<T>& selected, const Var<T>& v_cls, std::size_t frames,
                   const ModelConfig& cfg) {
    detail::check_branch_input(selected, v_cls, frames, "fgt");
    Var<T> x = concat_rows(std::vector<Var<T>>{v_cls, selected});
    Groups groups(1);
    for (std::size_t i = 0; i < x.shape()[0]; ++i) groups[0].push_back(i);
    x = run_branch(ctx, x, "fgt", groups, cfg);
    return gather_rows(x, {0});
}

/// Embeddings and per-head grade predictions. Inactive features stay empty;
/// with sum/concat aggregation the per-feature heads are bypassed.
template <typename T>
struct FeatureTriple {
    std::optional<Var<T>> v_g, v_s, v_t;
    std::optional<Var<T>> y_g, y_s, y_t;

    std::vector<Var<T>> embeddings() const {
        std::vector<Var<T>> out;
        for (const auto* v : {&v_g, &v_s, &v_t})
            if (*v) out.push_back(**v);
        return out;
    }

    std::vector<Var<T>> predictions() const {
        std::vector<Var<T>> out;
        for (const auto* y : {&y_g, &y_s, &y_t})
            if (*y) out.push_back(**y);
        return out;
    }
};

template <typename T>
void add_head_params(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
    if (cfg.aggregation == Aggregation::Mean) {
        if (cfg.features.global) add_linear(ps, "head.g", cfg.dim, kGrades, cfg.init_std, rng);
        if (cfg.features.spatial) add_linear(ps, "head.s", cfg.dim, kGrades, cfg.init_std, rng);
        if (cfg.features.temporal) add_linear(ps, "head.t", cfg.dim, kGrades, cfg.init_std, rng);
    } else {
        const std::size_t in = cfg.aggregation == Aggregation::Concat ? cfg.dim * cfg.features.count() : cfg.dim;
        add_linear(ps, "head.fused", in, kGrades, cfg.init_std, rng);
    }
}

/// Affine map to five logits followed by softmax.
template <typename T>
Var<T> grade_head(Context<T>& ctx, const Var<T>& v, const std::string& prefix) {
    return softmax(linear(ctx, v, prefix), 1);
}

/// Fills y_g / y_s / y_t from the active embeddings with independent heads.
template <typename T>
void project_heads(Context<T>& ctx, FeatureTriple<T>& triple) {
    if (triple.v_g) triple.y_g = grade_head(ctx, *triple.v_g, "head.g");
    if (triple.v_s) triple.y_s = grade_head(ctx, *triple.v_s, "head.s");
    if (triple.v_t) triple.y_t = grade_head(ctx, *triple.v_t, "head.t");
}

/// Elementwise mean of grade distributions.
template <typename T>
Var<T> mean_of(const std::vector<Var<T>>& ys) {
    if (ys.empty()) throw ValueError("mean of an empty set of predictions");
    Var<T> acc = ys[0];
    for (std::size_t i = 1; i < ys.size(); ++i) acc = add(acc, ys[i]);
    return ys.size() == 1 ? acc : scale(acc, T{1} / static_cast<T>(ys.size()));
}

/// Final grade distribution. mean averages the per-head outputs; sum and
/// concat feed the combined embeddings to the single fused head.
template <typename T>
Var<T> aggregate(Context<T>& ctx, const FeatureTriple<T>& triple, Aggregation strategy) {
    switch (strategy) {
    case Aggregation::Mean: return mean_of(triple.predictions());
    case Aggregation::Sum: {
        auto vs = triple.embeddings();
        Var<T> acc = vs.at(0);
        for (std::size_t i = 1; i < vs.size(); ++i) acc = add(acc, vs[i]);
        return grade_head(ctx, acc, "head.fused");
    }
    case Aggregation::Concat: return grade_head(ctx, concat_cols(triple.embeddings()), "head.fused");
    }
    throw ValueError("unknown aggregation strategy", "model.aggregation");
}

} // namespace rostfine
