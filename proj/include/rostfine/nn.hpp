#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rostfine/autodiff.hpp"
#include "rostfine/errors.hpp"
#include "rostfine/random.hpp"
#include "rostfine/tensor.hpp"

namespace rostfine {

/// Named parameter tensors in insertion order. The order is part of the
/// checkpoint format and of the optimizer state layout.
template <typename T>
class ParameterSet {
public:
    std::size_t add(const std::string& name, Tensor<T> value) {
        if (index_.count(name)) throw ValueError("duplicate parameter '" + name + "'");
        index_.emplace(name, names_.size());
        names_.push_back(name);
        values_.push_back(std::move(value));
        return names_.size() - 1;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t index(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValueError("unknown parameter '" + name + "'");
        return it->second;
    }

    const Tensor<T>& operator[](const std::string& name) const { return values_[index(name)]; }
    Tensor<T>& operator[](const std::string& name) { return values_[index(name)]; }

    std::size_t size() const noexcept { return values_.size(); }
    const std::vector<std::string>& names() const noexcept { return names_; }
    const std::vector<Tensor<T>>& tensors() const noexcept { return values_; }
    std::vector<Tensor<T>>& tensors() noexcept { return values_; }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& v : values_) n += v.size();
        return n;
    }

    template <typename U>
    ParameterSet<U> cast() const {
        ParameterSet<U> out;
        for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<U>());
        return out;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> values_;
    std::map<std::string, std::size_t> index_;
};

/// One forward pass: the tape plus lazily bound parameter leaves. Parameters
/// never touched by the pass keep a zero gradient.
template <typename T>
class Context {
public:
    Context(Tape<T>& tape, const ParameterSet<T>& params, bool requires_grad = true)
        : tape_(tape), params_(params), bound_(params.size()), requires_grad_(requires_grad) {}

    Tape<T>& tape() { return tape_; }
    const ParameterSet<T>& params() const { return params_; }

    /// Routes parameters through caller-provided leaves (used by gradient checks).
    void bind_all(std::span<const Var<T>> leaves) {
        if (leaves.size() != bound_.size()) throw DimensionError("bind_all: leaf count does not match parameters");
        for (std::size_t i = 0; i < leaves.size(); ++i) bound_[i] = leaves[i];
    }

    Var<T> param(const std::string& name) {
        const std::size_t i = params_.index(name);
        if (!bound_[i]) bound_[i] = tape_.leaf(params_.tensors()[i], requires_grad_);
        return *bound_[i];
    }

    /// Gradients aligned with the parameter order, after tape.backward().
    std::vector<Tensor<T>> gradients() const {
        std::vector<Tensor<T>> out;
        out.reserve(bound_.size());
        for (std::size_t i = 0; i < bound_.size(); ++i)
            out.push_back(bound_[i] ? bound_[i]->grad() : Tensor<T>(params_.tensors()[i].shape()));
        return out;
    }

private:
    Tape<T>& tape_;
    const ParameterSet<T>& params_;
    std::vector<std::optional<Var<T>>> bound_;
    bool requires_grad_;
};

// ---------------------------------------------------------------------------
// Initializers

template <typename T>
Tensor<T> trunc_normal_tensor(Shape shape, double std, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(truncated_normal(rng, std));
    return t;
}

template <typename T>
void add_linear(ParameterSet<T>& ps, const std::string& prefix, std::size_t in, std::size_t out, double std,
                Rng& rng, bool bias = true) {
    ps.add(prefix + ".weight", trunc_normal_tensor<T>(Shape{in, out}, std, rng));
    if (bias) ps.add(prefix + ".bias", Tensor<T>(Shape{out}));
}

template <typename T>
void add_layer_norm(ParameterSet<T>& ps, const std::string& prefix, std::size_t dim) {
    ps.add(prefix + ".gamma", Tensor<T>(Shape{dim}, T{1}));
    ps.add(prefix + ".beta", Tensor<T>(Shape{dim}));
}

/// Pre-normalized multi-head self-attention: LN, Q/K/V projections, output
/// projection.
template <typename T>
void add_attention(ParameterSet<T>& ps, const std::string& prefix, std::size_t dim, double std, Rng& rng) {
    add_layer_norm(ps, prefix + ".norm", dim);
    add_linear(ps, prefix + ".q", dim, dim, std, rng);
    add_linear(ps, prefix + ".k", dim, dim, std, rng);
    add_linear(ps, prefix + ".v", dim, dim, std, rng);
    add_linear(ps, prefix + ".out", dim, dim, std, rng);
}

template <typename T>
void add_mlp(ParameterSet<T>& ps, const std::string& prefix, std::size_t dim, std::size_t ratio, double std,
             Rng& rng) {
    add_layer_norm(ps, prefix + ".norm", dim);
    add_linear(ps, prefix + ".fc1", dim, dim * ratio, std, rng);
    add_linear(ps, prefix + ".fc2", dim * ratio, dim, std, rng);
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
Var<T> linear(Context<T>& ctx, const Var<T>& x, const std::string& prefix) {
    Var<T> y = matmul(x, ctx.param(prefix + ".weight"));
    if (ctx.params().contains(prefix + ".bias")) y = add_row(y, ctx.param(prefix + ".bias"));
    return y;
}

template <typename T>
Var<T> norm(Context<T>& ctx, const Var<T>& x, const std::string& prefix, T eps) {
    return layer_norm(x, ctx.param(prefix + ".gamma"), ctx.param(prefix + ".beta"), eps);
}

template <typename T>
struct MhsaOutput {
    Var<T> out;
    std::vector<Tensor<T>> maps;
};

/// Self-attention over already-normalized rows `x`. Group outputs are
/// projected, then pooled back onto `out_rows` rows by `target` (see
/// pool_rows). Projecting first keeps rows with no source at exactly zero.
template <typename T>
MhsaOutput<T> mhsa(Context<T>& ctx, const Var<T>& x, const std::string& prefix, Groups groups,
                   std::size_t heads, const std::vector<std::size_t>& target, std::size_t out_rows) {
    Var<T> q = linear(ctx, x, prefix + ".q");
    Var<T> k = linear(ctx, x, prefix + ".k");
    Var<T> v = linear(ctx, x, prefix + ".v");
    AttentionResult<T> att = grouped_attention(q, k, v, std::move(groups), heads);
    Var<T> projected = linear(ctx, att.out, prefix + ".out");
    return {pool_rows(projected, target, out_rows), std::move(att.maps)};
}

template <typename T>
Var<T> mlp(Context<T>& ctx, const Var<T>& x, const std::string& prefix) {
    return linear(ctx, gelu(linear(ctx, x, prefix + ".fc1")), prefix + ".fc2");
}

/// Identity routing for groups that partition rows: member i of the
/// flattened groups maps back to its own row.
inline std::vector<std::size_t> flatten_groups(const Groups& groups) {
    std::vector<std::size_t> t;
    for (const auto& g : groups) t.insert(t.end(), g.begin(), g.end());
    return t;
}

/// Standard attention block over rows partitioned into `groups`:
///   x + MHSA(LN(x)), then + MLP(LN(.))
/// In strict mode the residuals are dropped: MLP(LN(MHSA(LN(x)))).
template <typename T>
Var<T> attention_block(Context<T>& ctx, const Var<T>& x, const std::string& prefix, const Groups& groups,
                       std::size_t heads, bool strict, T eps) {
    const std::size_t rows = x.shape()[0];
    Var<T> a = mhsa(ctx, norm(ctx, x, prefix + ".attn.norm", eps), prefix + ".attn", groups, heads,
                    flatten_groups(groups), rows)
                   .out;
    Var<T> h = strict ? a : add(x, a);
    Var<T> m = mlp(ctx, norm(ctx, h, prefix + ".mlp.norm", eps), prefix + ".mlp");
    return strict ? m : add(h, m);
}

template <typename T>
void add_attention_block(ParameterSet<T>& ps, const std::string& prefix, std::size_t dim, std::size_t ratio,
                         double std, Rng& rng) {
    add_attention(ps, prefix + ".attn", dim, std, rng);
    add_mlp(ps, prefix + ".mlp", dim, ratio, std, rng);
}

} // namespace rostfine
