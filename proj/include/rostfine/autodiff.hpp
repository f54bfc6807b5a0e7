#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rostfine/errors.hpp"
#include "rostfine/random.hpp"
#include "rostfine/tensor.hpp"

namespace rostfine {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor<T>& value() const { return tape_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    /// Gradient after Tape::backward; zeros if the node was not reached.
    Tensor<T> grad() const { return tape_->grad(id_); }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Linear record of primitive operations. Every op appends one node whose
/// inputs were recorded earlier, so reverse insertion order is a valid
/// topological order for the backward sweep.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    explicit Tape(bool checked = false) : checked_(checked) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool checked() const noexcept { return checked_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
        check_finite(value, "leaf");
        nodes_.push_back(Node{std::move(value), {}, {}, requires_grad, false});
        return Var<T>(this, nodes_.size() - 1);
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    /// Appends an op result. `backward` is dropped when no input needs a gradient.
    Var<T> record(Tensor<T> value, std::initializer_list<std::size_t> inputs, BackwardFn backward,
                  const char* op) {
        return record(std::move(value), std::vector<std::size_t>(inputs), std::move(backward), op);
    }

    Var<T> record(Tensor<T> value, const std::vector<std::size_t>& inputs, BackwardFn backward,
                  const char* op) {
        check_finite(value, op);
        bool needs = false;
        for (auto id : inputs) needs = needs || nodes_[id].requires_grad;
        nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, needs, false});
        return Var<T>(this, nodes_.size() - 1);
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    Tensor<T> grad(std::size_t id) const {
        const Node& n = nodes_.at(id);
        return n.has_grad ? n.grad : Tensor<T>(n.value.shape());
    }

    /// Gradient buffer of a node, zero-initialized on first touch.
    Tensor<T>& grad_slot(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.has_grad) {
            n.grad = Tensor<T>(n.value.shape());
            n.has_grad = true;
        }
        return n.grad;
    }

    void backward(const Var<T>& loss) {
        if (loss.value().size() != 1)
            throw DimensionError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
        for (auto& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor<T>();
        }
        grad_slot(loss.id()).fill(T{1});
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.has_grad && n.backward) n.backward(*this, i);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackwardFn backward;
        bool requires_grad;
        bool has_grad;
    };

    void check_finite(const Tensor<T>& v, const char* op) const {
        if (checked_ && !v.all_finite())
            throw NonFiniteError(std::string("non-finite value produced by ") + op);
    }

    bool checked_;
    std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
}

template <typename T>
void require_matrix(const Var<T>& a, const char* op) {
    if (a.value().rank() != 2)
        throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T, typename Fn>
Var<T> unary(const Var<T>& x, Fn&& fwd, const char* op,
             std::function<T(T x, T y)> dfdx) {
    Tensor<T> out(x.shape());
    auto xs = x.value().data();
    auto os = out.data();
    for (std::size_t i = 0; i < xs.size(); ++i) os[i] = fwd(xs[i]);
    const std::size_t xi = x.id();
    return x.tape().record(std::move(out), {xi},
        [xi, dfdx](Tape<T>& t, std::size_t self) {
            auto g = t.grad_slot(self).data();
            auto xv = t.value(xi).data();
            auto yv = t.value(self).data();
            auto dx = t.grad_slot(xi).data();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * dfdx(xv[i], yv[i]);
        },
        op);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out = a.value();
    detail::accumulate(out, b.value());
    const auto ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {ai, bi},
        [ai, bi](Tape<T>& t, std::size_t self) {
            const Tensor<T>& g = t.grad_slot(self);
            if (t.requires_grad(ai)) detail::accumulate(t.grad_slot(ai), g);
            if (t.requires_grad(bi)) detail::accumulate(t.grad_slot(bi), g);
        },
        "add");
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    const auto ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {ai, bi},
        [ai, bi](Tape<T>& t, std::size_t self) {
            const Tensor<T>& g = t.grad_slot(self);
            if (t.requires_grad(ai)) detail::accumulate(t.grad_slot(ai), g);
            if (t.requires_grad(bi)) {
                auto d = t.grad_slot(bi).data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
            }
        },
        "sub");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<T> out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    const auto ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {ai, bi},
        [ai, bi](Tape<T>& t, std::size_t self) {
            const Tensor<T>& g = t.grad_slot(self);
            const Tensor<T>& av = t.value(ai);
            const Tensor<T>& bv = t.value(bi);
            if (t.requires_grad(ai)) {
                auto d = t.grad_slot(ai).data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
            }
            if (t.requires_grad(bi)) {
                auto d = t.grad_slot(bi).data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
            }
        },
        "mul");
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "div");
    Tensor<T> out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] /= bv[i];
    const auto ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {ai, bi},
        [ai, bi](Tape<T>& t, std::size_t self) {
            const Tensor<T>& g = t.grad_slot(self);
            const Tensor<T>& y = t.value(self);
            const Tensor<T>& bv = t.value(bi);
            if (t.requires_grad(ai)) {
                auto d = t.grad_slot(ai).data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] / bv[i];
            }
            if (t.requires_grad(bi)) {
                auto d = t.grad_slot(bi).data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i] * y[i] / bv[i];
            }
        },
        "div");
}

/// x * c for a constant scalar c.
template <typename T>
Var<T> scale(const Var<T>& x, T c) {
    return detail::unary<T>(x, [c](T v) { return v * c; }, "scale", [c](T, T) { return c; });
}

/// x + c for a constant scalar c.
template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
    return detail::unary<T>(x, [c](T v) { return v + c; }, "add_scalar", [](T, T) { return T{1}; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
    return detail::unary<T>(x, [](T v) { return std::log(v); }, "log", [](T xv, T) { return T{1} / xv; });
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
    return detail::unary<T>(x, [](T v) { return std::sqrt(v); }, "sqrt",
                            [](T, T y) { return T{0.5} / y; });
}

/// Subgradient sign(0) = 0.
template <typename T>
Var<T> abs(const Var<T>& x) {
    return detail::unary<T>(x, [](T v) { return std::abs(v); }, "abs",
                            [](T xv, T) { return xv > T{} ? T{1} : (xv < T{} ? T{-1} : T{}); });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    return detail::unary<T>(
        x, [](T v) { return T{0.5} * v * (T{1} + std::erf(v * inv_sqrt2)); }, "gelu",
        [](T v, T) {
            return T{0.5} * (T{1} + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-T{0.5} * v * v);
        });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <typename T>
Var<T> sum(const Var<T>& x) {
    T s{};
    for (T v : x.value().data()) s += v;
    const auto xi = x.id();
    return x.tape().record(Tensor<T>::scalar(s), {xi},
        [xi](Tape<T>& t, std::size_t self) {
            const T g = t.grad_slot(self)[0];
            for (T& d : t.grad_slot(xi).data()) d += g;
        },
        "sum");
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    const auto xi = x.id();
    return x.tape().record(std::move(out), {xi},
        [xi](Tape<T>& t, std::size_t self) {
            auto g = t.grad_slot(self).data();
            auto d = t.grad_slot(xi).data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        },
        "reshape");
}

// ---------------------------------------------------------------------------
// Matrix ops

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    Tensor<T> out(Shape{m, n});
    kernel::gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n, false);
    const auto ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {ai, bi},
        [ai, bi, m, k, n](Tape<T>& t, std::size_t self) {
            const T* g = t.grad_slot(self).data().data();
            if (t.requires_grad(ai))
                kernel::gemm_nt(g, t.value(bi).data().data(), t.grad_slot(ai).data().data(), m, n, k, true);
            if (t.requires_grad(bi))
                kernel::gemm_tn(t.value(ai).data().data(), g, t.grad_slot(bi).data().data(), m, k, n, true);
        },
        "matmul");
}

/// x[m x n] + b broadcast over rows, b holding n values.
template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& b) {
    detail::require_matrix(x, "add_row");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (b.value().size() != n)
        throw DimensionError("add_row: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
    Tensor<T> out = x.value();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) += bv[j];
    const auto xi = x.id(), bi = b.id();
    return x.tape().record(std::move(out), {xi, bi},
        [xi, bi, m, n](Tape<T>& t, std::size_t self) {
            const Tensor<T>& g = t.grad_slot(self);
            if (t.requires_grad(xi)) detail::accumulate(t.grad_slot(xi), g);
            if (t.requires_grad(bi)) {
                auto d = t.grad_slot(bi).data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) d[j] += g(i, j);
            }
        },
        "add_row");
}

/// Softmax along `axis`, max-subtracted for stability.
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(s));
    const std::size_t len = s[axis];
    if (len == 0) throw DimensionError("softmax: empty axis");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

    Tensor<T> out(s);
    auto xv = x.value().data();
    auto ov = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = xv[base];
            for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
            T z{};
            for (std::size_t i = 0; i < len; ++i) {
                const T e = std::exp(xv[base + i * inner] - mx);
                ov[base + i * inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < len; ++i) ov[base + i * inner] /= z;
        }
    const auto xi = x.id();
    return x.tape().record(std::move(out), {xi},
        [xi, outer, inner, len](Tape<T>& t, std::size_t self) {
            auto g = t.grad_slot(self).data();
            auto y = t.value(self).data();
            auto d = t.grad_slot(xi).data();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T dot{};
                    for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
                    for (std::size_t i = 0; i < len; ++i) {
                        const std::size_t k = base + i * inner;
                        d[k] += y[k] * (g[k] - dot);
                    }
                }
        },
        "softmax");
}

/// Normalizes each row over the last dimension, then applies gamma/beta.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    if (x.value().rank() == 0) throw DimensionError("layer_norm: scalar input");
    const std::size_t n = x.shape().back();
    const std::size_t m = x.value().size() / n;
    if (gamma.value().size() != n || beta.value().size() != n)
        throw DimensionError("layer_norm: gamma/beta must have " + std::to_string(n) + " values, got " +
                             shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    if (!(eps >= T{})) throw ValueError("layer_norm: eps must be nonnegative", "eps");

    Tensor<T> out(x.shape());
    // Saved per row: normalized values and reciprocal std.
    auto xhat = std::make_shared<std::vector<T>>(m * n);
    auto rstd = std::make_shared<std::vector<T>>(m);
    auto xv = x.value().data();
    auto gv = gamma.value().data();
    auto bv = beta.value().data();
    auto ov = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        const T* r = xv.data() + i * n;
        T mu{};
        for (std::size_t j = 0; j < n; ++j) mu += r[j];
        mu /= static_cast<T>(n);
        T var{};
        for (std::size_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
        var /= static_cast<T>(n);
        const T rs = T{1} / std::sqrt(var + eps);
        (*rstd)[i] = rs;
        for (std::size_t j = 0; j < n; ++j) {
            const T h = (r[j] - mu) * rs;
            (*xhat)[i * n + j] = h;
            ov[i * n + j] = gv[j] * h + bv[j];
        }
    }
    const auto xi = x.id(), gi = gamma.id(), bi = beta.id();
    return x.tape().record(std::move(out), {xi, gi, bi},
        [xi, gi, bi, m, n, xhat, rstd](Tape<T>& t, std::size_t self) {
            auto g = t.grad_slot(self).data();
            auto gv = t.value(gi).data();
            if (t.requires_grad(gi)) {
                auto d = t.grad_slot(gi).data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j] * (*xhat)[i * n + j];
            }
            if (t.requires_grad(bi)) {
                auto d = t.grad_slot(bi).data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
            }
            if (t.requires_grad(xi)) {
                auto d = t.grad_slot(xi).data();
                std::vector<T> dh(n);
                for (std::size_t i = 0; i < m; ++i) {
                    T mean_dh{}, mean_dh_h{};
                    for (std::size_t j = 0; j < n; ++j) {
                        dh[j] = g[i * n + j] * gv[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * (*xhat)[i * n + j];
                    }
                    mean_dh /= static_cast<T>(n);
                    mean_dh_h /= static_cast<T>(n);
                    for (std::size_t j = 0; j < n; ++j)
                        d[i * n + j] += (*rstd)[i] * (dh[j] - mean_dh - (*xhat)[i * n + j] * mean_dh_h);
                }
            }
        },
        "layer_norm");
}

// ---------------------------------------------------------------------------
// Row routing

/// out[r] = x[index[r]]; indices may repeat.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> index) {
    detail::require_matrix(x, "gather_rows");
    const std::size_t rows = x.shape()[0], n = x.shape()[1];
    Tensor<T> out(Shape{index.size(), n});
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= rows)
            throw DimensionError("gather_rows: row " + std::to_string(index[r]) + " out of range for " +
                                 shape_str(x.shape()));
        auto src = x.value().row(index[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    const auto xi = x.id();
    return x.tape().record(std::move(out), {xi},
        [xi, index = std::move(index), n](Tape<T>& t, std::size_t self) {
            const Tensor<T>& g = t.grad_slot(self);
            Tensor<T>& d = t.grad_slot(xi);
            for (std::size_t r = 0; r < index.size(); ++r)
                for (std::size_t j = 0; j < n; ++j) d(index[r], j) += g(r, j);
        },
        "gather_rows");
}

inline constexpr std::size_t kDropRow = std::numeric_limits<std::size_t>::max();

/// Output row r is the mean of every input row i with target[i] == r; rows
/// with no source are zero. kDropRow discards an input row.
template <typename T>
Var<T> pool_rows(const Var<T>& x, std::vector<std::size_t> target, std::size_t out_rows) {
    detail::require_matrix(x, "pool_rows");
    const std::size_t n = x.shape()[1];
    if (target.size() != x.shape()[0])
        throw DimensionError("pool_rows: " + std::to_string(target.size()) + " targets for " +
                             shape_str(x.shape()));
    std::vector<T> weight(out_rows, T{});
    for (auto r : target) {
        if (r == kDropRow) continue;
        if (r >= out_rows) throw DimensionError("pool_rows: target row out of range");
        weight[r] += T{1};
    }
    for (auto& w : weight) w = w > T{} ? T{1} / w : T{};
    Tensor<T> out(Shape{out_rows, n});
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (target[i] == kDropRow) continue;
        auto src = x.value().row(i);
        auto dst = out.row(target[i]);
        for (std::size_t j = 0; j < n; ++j) dst[j] += src[j] * weight[target[i]];
    }
    const auto xi = x.id();
    return x.tape().record(std::move(out), {xi},
        [xi, target = std::move(target), weight = std::move(weight), n](Tape<T>& t, std::size_t self) {
            const Tensor<T>& g = t.grad_slot(self);
            Tensor<T>& d = t.grad_slot(xi);
            for (std::size_t i = 0; i < target.size(); ++i) {
                if (target[i] == kDropRow) continue;
                const T w = weight[target[i]];
                for (std::size_t j = 0; j < n; ++j) d(i, j) += g(target[i], j) * w;
            }
        },
        "pool_rows");
}

/// Horizontal concatenation of matrices with equal row counts.
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t m = parts[0].shape().at(0);
    std::size_t total = 0;
    std::vector<std::size_t> ids, widths;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p.shape()[0] != m) throw DimensionError("concat_cols: row counts differ");
        ids.push_back(p.id());
        widths.push_back(p.shape()[1]);
        total += p.shape()[1];
    }
    Tensor<T> out(Shape{m, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape()[1];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out(i, off + j) = p.value()(i, j);
        off += w;
    }
    return parts[0].tape().record(std::move(out), ids,
        [ids, widths, m](Tape<T>& t, std::size_t self) {
            const Tensor<T>& g = t.grad_slot(self);
            std::size_t off = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                if (t.requires_grad(ids[k])) {
                    Tensor<T>& d = t.grad_slot(ids[k]);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < widths[k]; ++j) d(i, j) += g(i, off + j);
                }
                off += widths[k];
            }
        },
        "concat_cols");
}

/// Vertical concatenation of matrices with equal column counts.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t n = parts[0].shape().at(1);
    std::vector<std::size_t> ids, heights;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_rows");
        if (p.shape()[1] != n) throw DimensionError("concat_rows: column counts differ");
        ids.push_back(p.id());
        heights.push_back(p.shape()[0]);
        total += p.shape()[0];
    }
    std::vector<T> data;
    data.reserve(total * n);
    for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    return parts[0].tape().record(Tensor<T>(Shape{total, n}, std::move(data)), ids,
        [ids, heights, n](Tape<T>& t, std::size_t self) {
            auto g = t.grad_slot(self).data();
            std::size_t off = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                const std::size_t len = heights[k] * n;
                if (t.requires_grad(ids[k])) {
                    auto d = t.grad_slot(ids[k]).data();
                    for (std::size_t i = 0; i < len; ++i) d[i] += g[off + i];
                }
                off += len;
            }
        },
        "concat_rows");
}

// ---------------------------------------------------------------------------
// Attention

/// Row-index groups; attention is computed independently within each group.
using Groups = std::vector<std::vector<std::size_t>>;

template <typename T>
struct AttentionResult {
    /// One output row per group member, groups laid out back to back.
    Var<T> out;
    /// Per group, the |g| x |g| attention probabilities averaged over heads.
    std::vector<Tensor<T>> maps;
};

/// Scaled dot-product multi-head attention restricted to groups of rows.
/// q, k, v are n x d; head h uses columns [h*d/H, (h+1)*d/H).
template <typename T>
AttentionResult<T> grouped_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, Groups groups,
                                     std::size_t heads) {
    detail::require_matrix(q, "attention");
    detail::require_same_shape(q, k, "attention");
    detail::require_same_shape(q, v, "attention");
    const std::size_t rows = q.shape()[0], d = q.shape()[1];
    if (heads == 0 || d % heads != 0)
        throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    const std::size_t dh = d / heads;
    const T inv_scale = T{1} / std::sqrt(static_cast<T>(dh));

    std::size_t total = 0;
    for (const auto& g : groups) {
        if (g.empty()) throw DimensionError("attention: empty group");
        for (auto r : g)
            if (r >= rows) throw DimensionError("attention: group row out of range");
        total += g.size();
    }

    const Tensor<T>& Q = q.value();
    const Tensor<T>& K = k.value();
    const Tensor<T>& V = v.value();
    Tensor<T> out(Shape{total, d});
    // probs[g][h] is |g| x |g|, saved for the backward pass.
    auto probs = std::make_shared<std::vector<std::vector<std::vector<T>>>>(groups.size());
    AttentionResult<T> result;
    result.maps.reserve(groups.size());

    std::size_t base = 0;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        const std::size_t s = g.size();
        auto& pg = (*probs)[gi];
        pg.assign(heads, std::vector<T>(s * s));
        Tensor<T> avg(Shape{s, s});
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            auto& P = pg[h];
            for (std::size_t i = 0; i < s; ++i) {
                const T* qi = &Q(g[i], c0);
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < s; ++j) {
                    const T* kj = &K(g[j], c0);
                    T dot{};
                    for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                    P[i * s + j] = dot * inv_scale;
                    mx = std::max(mx, P[i * s + j]);
                }
                T z{};
                for (std::size_t j = 0; j < s; ++j) {
                    P[i * s + j] = std::exp(P[i * s + j] - mx);
                    z += P[i * s + j];
                }
                for (std::size_t j = 0; j < s; ++j) P[i * s + j] /= z;
                T* oi = &out(base + i, c0);
                for (std::size_t j = 0; j < s; ++j) {
                    const T p = P[i * s + j];
                    const T* vj = &V(g[j], c0);
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
                    avg(i, j) += p;
                }
            }
        }
        for (T& a : avg.data()) a /= static_cast<T>(heads);
        result.maps.push_back(std::move(avg));
        base += s;
    }

    const auto qi = q.id(), ki = k.id(), vi = v.id();
    result.out = q.tape().record(std::move(out), {qi, ki, vi},
        [qi, ki, vi, groups = std::move(groups), probs, heads, dh, inv_scale](Tape<T>& t, std::size_t self) {
            const Tensor<T>& G = t.grad_slot(self);
            const Tensor<T>& Q = t.value(qi);
            const Tensor<T>& K = t.value(ki);
            const Tensor<T>& V = t.value(vi);
            Tensor<T>* dQ = t.requires_grad(qi) ? &t.grad_slot(qi) : nullptr;
            Tensor<T>* dK = t.requires_grad(ki) ? &t.grad_slot(ki) : nullptr;
            Tensor<T>* dV = t.requires_grad(vi) ? &t.grad_slot(vi) : nullptr;
            std::vector<T> dS;
            std::size_t base = 0;
            for (std::size_t gi = 0; gi < groups.size(); ++gi) {
                const auto& g = groups[gi];
                const std::size_t s = g.size();
                dS.assign(s * s, T{});
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t c0 = h * dh;
                    const auto& P = (*probs)[gi][h];
                    for (std::size_t i = 0; i < s; ++i) {
                        const T* gi_row = &G(base + i, c0);
                        T rowdot{};
                        for (std::size_t j = 0; j < s; ++j) {
                            const T* vj = &V(g[j], c0);
                            T dp{};
                            for (std::size_t c = 0; c < dh; ++c) dp += gi_row[c] * vj[c];
                            dS[i * s + j] = dp;
                            rowdot += dp * P[i * s + j];
                            if (dV) {
                                T* dvj = &(*dV)(g[j], c0);
                                const T p = P[i * s + j];
                                for (std::size_t c = 0; c < dh; ++c) dvj[c] += p * gi_row[c];
                            }
                        }
                        for (std::size_t j = 0; j < s; ++j)
                            dS[i * s + j] = P[i * s + j] * (dS[i * s + j] - rowdot) * inv_scale;
                    }
                    for (std::size_t i = 0; i < s; ++i)
                        for (std::size_t j = 0; j < s; ++j) {
                            const T ds = dS[i * s + j];
                            if (ds == T{}) continue;
                            if (dQ) {
                                T* dqi = &(*dQ)(g[i], c0);
                                const T* kj = &K(g[j], c0);
                                for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                            }
                            if (dK) {
                                T* dkj = &(*dK)(g[j], c0);
                                const T* qi_row = &Q(g[i], c0);
                                for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi_row[c];
                            }
                        }
                }
                base += s;
            }
        },
        "attention");
    return result;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckOptions {
    /// Coordinates checked per parameter tensor; 0 checks every coordinate.
    /// When limited, coordinates are drawn without replacement from `seed`.
    std::size_t max_coords_per_param = 0;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_coord = 0;
    std::size_t coords_checked = 0;
};

/// Compares reverse-mode gradients with central differences. `f` builds a
/// scalar on the given tape from one leaf per parameter tensor. The error per
/// coordinate is |analytic - numeric| / max(1, |numeric|).
template <typename F>
GradCheckResult grad_check(F&& f, const std::vector<Tensor<double>>& params, double h,
                           GradCheckOptions opts = {}) {
    if (!(h >= 1e-6 && h <= 1e-4)) throw ValueError("grad_check: step must lie in [1e-6, 1e-4]", "h");

    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        std::vector<Var<double>> leaves;
        for (const auto& p : params) leaves.push_back(tape.leaf(p));
        Var<double> loss = f(tape, std::span<const Var<double>>(leaves));
        if (!std::isfinite(loss.value().item())) throw NonFiniteError("grad_check: non-finite loss");
        tape.backward(loss);
        for (const auto& l : leaves) analytic.push_back(l.grad());
    }

    auto evaluate = [&](const std::vector<Tensor<double>>& ps) {
        Tape<double> tape;
        std::vector<Var<double>> leaves;
        for (const auto& p : ps) leaves.push_back(tape.constant(p));
        return f(tape, std::span<const Var<double>>(leaves)).value().item();
    };

    GradCheckResult res;
    std::vector<Tensor<double>> work = params;
    Rng rng(opts.seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        std::vector<std::size_t> coords(params[pi].size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (opts.max_coords_per_param && coords.size() > opts.max_coords_per_param) {
            shuffle(coords, rng);
            coords.resize(opts.max_coords_per_param);
        }
        for (auto c : coords) {
            const double orig = work[pi][c];
            work[pi][c] = orig + h;
            const double fp = evaluate(work);
            work[pi][c] = orig - h;
            const double fm = evaluate(work);
            work[pi][c] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NonFiniteError("grad_check: non-finite value perturbing parameter " + std::to_string(pi) +
                                     " coordinate " + std::to_string(c));
            const double numeric = (fp - fm) / (2.0 * h);
            const double err = std::abs(analytic[pi][c] - numeric) / std::max(1.0, std::abs(numeric));
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_param = pi;
                res.worst_coord = c;
            }
            ++res.coords_checked;
        }
    }
    return res;
}

} // namespace rostfine
