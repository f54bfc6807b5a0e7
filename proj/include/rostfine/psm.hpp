#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "rostfine/autodiff.hpp"
#include "rostfine/tensor.hpp"

namespace rostfine {

/// A*[t][p]: attention from [CLS] to patch p in frame t, summed over the last
/// two encoder layers. Shape T x N.
template <typename T>
Tensor<T> aggregate_cls_scores(const std::vector<Tensor<T>>& attn) {
    if (attn.size() < 2) throw DimensionError("patch scoring needs at least two attention layers");
    const Tensor<T>& a = attn[attn.size() - 2];
    const Tensor<T>& b = attn.back();
    if (a.rank() != 3 || a.shape() != b.shape() || a.dim(1) != a.dim(2) || a.dim(1) < 2)
        throw DimensionError("patch scoring: attention maps must be T x (1+N) x (1+N), got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const std::size_t frames = a.dim(0), side = a.dim(1), n = side - 1;
    Tensor<T> scores(Shape{frames, n});
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t p = 0; p < n; ++p) {
            const std::size_t k = t * side * side + 1 + p; // row 0, column 1 + p
            scores(t, p) = a[k] + b[k];
        }
    return scores;
}

/// Top-K patch indices per frame, frame-major, each frame in descending score
/// order. Ties go to the lower patch index.
struct SelectedPatches {
    std::size_t frames = 0;
    std::size_t k = 0;
    std::size_t patches_per_frame = 0;
    std::vector<std::size_t> patch_index; // frames * k entries

    std::size_t at(std::size_t t, std::size_t j) const { return patch_index[t * k + j]; }

    /// Row of the selected patch in the encoder token matrix.
    std::size_t token_row(std::size_t t, std::size_t j) const { return 1 + t * patches_per_frame + at(t, j); }

    std::vector<std::size_t> token_rows() const {
        std::vector<std::size_t> rows;
        rows.reserve(patch_index.size());
        for (std::size_t t = 0; t < frames; ++t)
            for (std::size_t j = 0; j < k; ++j) rows.push_back(token_row(t, j));
        return rows;
    }

    friend bool operator==(const SelectedPatches&, const SelectedPatches&) = default;
};

template <typename T>
SelectedPatches select_topk(const Tensor<T>& scores, std::size_t k) {
    if (scores.rank() != 2) throw DimensionError("select_topk: scores must be T x N, got " + shape_str(scores.shape()));
    const std::size_t frames = scores.dim(0), n = scores.dim(1);
    if (k < 1 || k > n)
        throw ValueError("select_topk: K=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]", "top_k");
    SelectedPatches sel{frames, k, n, {}};
    sel.patch_index.reserve(frames * k);
    std::vector<std::size_t> idx(n);
    for (std::size_t t = 0; t < frames; ++t) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                          [&](std::size_t i, std::size_t j) {
                              const T si = scores(t, i), sj = scores(t, j);
                              return si > sj || (si == sj && i < j);
                          });
        sel.patch_index.insert(sel.patch_index.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    }
    return sel;
}

/// F: the selected embeddings gathered from the encoder tokens, TK x d. The
/// indices are constants; gradients flow into the gathered rows.
template <typename T>
Var<T> selected_embeddings(const Var<T>& tokens, const SelectedPatches& sel) {
    return gather_rows(tokens, sel.token_rows());
}

} // namespace rostfine
