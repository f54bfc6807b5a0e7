#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "rostfine/autodiff.hpp"
#include "rostfine/branches.hpp"
#include "rostfine/config.hpp"

namespace rostfine {

// Differentiable losses work on 1 x 5 (or any length-5) Vars. The *_value
// overloads evaluate the same formulas on plain vectors for metrics.

namespace detail {

template <typename T>
void require_grades(std::size_t n, const char* who) {
    if (n != kGrades)
        throw DimensionError(std::string(who) + ": expected " + std::to_string(kGrades) + " grades, got " +
                             std::to_string(n));
}

template <typename T>
void require_nonnegative(const Tensor<T>& t, const char* who) {
    for (T v : t.data())
        if (v < T{}) throw ValueError(std::string(who) + ": distribution has a negative entry");
}

template <typename T>
Var<T> smooth(const Var<T>& p, T eps) {
    const T n = static_cast<T>(p.value().size());
    return scale(add_scalar(p, eps), T{1} / (T{1} + n * eps));
}

} // namespace detail

/// (1/5) * sum (yhat_i - y_i)^2
template <typename T>
Var<T> mse(const Var<T>& yhat, const Var<T>& y) {
    detail::require_grades<T>(yhat.value().size(), "mse");
    detail::require_grades<T>(y.value().size(), "mse");
    Var<T> d = sub(yhat, reshape(y, yhat.shape()));
    return mean(mul(d, d));
}

/// KL(p || q) on smoothed distributions p' = (p + eps) / (1 + 5 eps).
template <typename T>
Var<T> kl(const Var<T>& p, const Var<T>& q, T eps) {
    detail::require_grades<T>(p.value().size(), "kl");
    detail::require_grades<T>(q.value().size(), "kl");
    detail::require_nonnegative(p.value(), "kl");
    detail::require_nonnegative(q.value(), "kl");
    Var<T> ps = detail::smooth(p, eps);
    Var<T> qs = detail::smooth(reshape(q, p.shape()), eps);
    return sum(mul(ps, sub(log(ps), log(qs))));
}

/// Jensen-Shannon divergence: KL of each side against the midpoint, averaged.
template <typename T>
Var<T> js(const Var<T>& p, const Var<T>& q, T eps) {
    detail::require_grades<T>(p.value().size(), "js");
    detail::require_grades<T>(q.value().size(), "js");
    Var<T> qq = reshape(q, p.shape());
    Var<T> m = scale(add(p, qq), T{0.5});
    return scale(add(kl(p, m, eps), kl(qq, m, eps)), T{0.5});
}

/// |cos(a, b)|; undefined for a zero vector.
template <typename T>
Var<T> diversity(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "diversity");
    const auto zero = [](const Tensor<T>& t) {
        for (T v : t.data())
            if (v != T{}) return false;
        return true;
    };
    if (zero(a.value()) || zero(b.value())) throw ValueError("diversity: cosine undefined for a zero vector");
    Var<T> dot = sum(mul(a, b));
    Var<T> na = sqrt(sum(mul(a, a)));
    Var<T> nb = sqrt(sum(mul(b, b)));
    return abs(div(dot, mul(na, nb)));
}

/// Per-head base loss averaged over the given predictions.
template <typename T>
Var<T> base_loss(const std::vector<Var<T>>& preds, const Var<T>& y, const LossConfig& cfg) {
    if (preds.empty()) throw ValueError("base_loss: no active predictions");
    std::vector<Var<T>> terms;
    for (const auto& p : preds)
        terms.push_back(cfg.kind == LossKind::Mse ? mse(p, y) : js(p, y, static_cast<T>(cfg.kl_epsilon)));
    return mean_of(terms);
}

/// Mean |cos| over every pair of embeddings; needs at least two.
template <typename T>
Var<T> diversity_loss(const std::vector<Var<T>>& vs) {
    if (vs.size() < 2) throw ValueError("diversity_loss: needs at least two embeddings");
    std::vector<Var<T>> terms;
    for (std::size_t i = 0; i < vs.size(); ++i)
        for (std::size_t j = i + 1; j < vs.size(); ++j) terms.push_back(diversity(vs[i], vs[j]));
    return mean_of(terms);
}

/// Base loss plus alpha times the diversity term. With sum/concat
/// aggregation the base loss is taken on the fused prediction only.
template <typename T>
Var<T> total_loss(const FeatureTriple<T>& triple, const Var<T>& prediction, const Var<T>& y, Aggregation strategy,
                  const LossConfig& cfg) {
    cfg.validate();
    std::vector<Var<T>> preds = strategy == Aggregation::Mean ? triple.predictions() : std::vector<Var<T>>{prediction};
    Var<T> loss = base_loss(preds, y, cfg);
    const auto embeddings = triple.embeddings();
    if (cfg.alpha > 0 && embeddings.size() >= 2)
        loss = add(loss, scale(diversity_loss(embeddings), static_cast<T>(cfg.alpha)));
    return loss;
}

// ---------------------------------------------------------------------------
// Plain evaluations

inline double mse_value(std::span<const double> yhat, std::span<const double> y) {
    if (yhat.size() != kGrades || y.size() != kGrades) throw DimensionError("mse: expected 5 grades");
    double s = 0.0;
    for (std::size_t i = 0; i < kGrades; ++i) s += (yhat[i] - y[i]) * (yhat[i] - y[i]);
    return s / static_cast<double>(kGrades);
}

inline double kl_value(std::span<const double> p, std::span<const double> q, double eps) {
    if (p.size() != kGrades || q.size() != kGrades) throw DimensionError("kl: expected 5 grades");
    const double z = 1.0 + static_cast<double>(kGrades) * eps;
    double s = 0.0;
    for (std::size_t i = 0; i < kGrades; ++i) {
        if (p[i] < 0 || q[i] < 0) throw ValueError("kl: distribution has a negative entry");
        const double ps = (p[i] + eps) / z, qs = (q[i] + eps) / z;
        s += ps * (std::log(ps) - std::log(qs));
    }
    return s;
}

inline double js_value(std::span<const double> p, std::span<const double> q, double eps) {
    if (p.size() != kGrades || q.size() != kGrades) throw DimensionError("js: expected 5 grades");
    double m[kGrades];
    for (std::size_t i = 0; i < kGrades; ++i) m[i] = 0.5 * (p[i] + q[i]);
    return 0.5 * kl_value(p, m, eps) + 0.5 * kl_value(q, m, eps);
}

inline double cosine_value(std::span<const double> a, std::span<const double> b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) throw ValueError("cosine undefined for a zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace rostfine
