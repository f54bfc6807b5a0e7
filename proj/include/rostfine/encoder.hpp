#pragma once

#include <string>
#include <vector>

#include "rostfine/config.hpp"
#include "rostfine/nn.hpp"

namespace rostfine {

/// Splits a T x H x W x 3 clip into T*N patch vectors of length 3*P*P.
/// Patches are raster ordered within a frame; each vector is laid out
/// channel-major, then row-major inside the patch.
template <typename T>
Tensor<T> patchify(const Tensor<T>& clip, std::size_t patch) {
    if (clip.rank() != 4 || clip.dim(3) != 3)
        throw DimensionError("patchify: expected a T x H x W x 3 clip, got " + shape_str(clip.shape()));
    const std::size_t frames = clip.dim(0), h = clip.dim(1), w = clip.dim(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        throw DimensionError("patchify: frame " + std::to_string(h) + "x" + std::to_string(w) +
                             " must be divisible by patch size " + std::to_string(patch));
    const std::size_t gr = h / patch, gc = w / patch, n = gr * gc, len = 3 * patch * patch;
    Tensor<T> out(Shape{frames * n, len});
    const auto src = clip.data();
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t pr = 0; pr < gr; ++pr)
            for (std::size_t pc = 0; pc < gc; ++pc) {
                auto dst = out.row(t * n + pr * gc + pc);
                for (std::size_t c = 0; c < 3; ++c)
                    for (std::size_t r = 0; r < patch; ++r)
                        for (std::size_t col = 0; col < patch; ++col) {
                            const std::size_t y = pr * patch + r, x = pc * patch + col;
                            dst[c * patch * patch + r * patch + col] = src[((t * h + y) * w + x) * 3 + c];
                        }
            }
    return out;
}

/// Inverse of patchify.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t frames, std::size_t h, std::size_t w,
                     std::size_t patch) {
    const std::size_t gr = h / patch, gc = w / patch, n = gr * gc;
    if (patches.rank() != 2 || patches.dim(0) != frames * n || patches.dim(1) != 3 * patch * patch)
        throw DimensionError("unpatchify: patch matrix " + shape_str(patches.shape()) + " does not match geometry");
    Tensor<T> clip(Shape{frames, h, w, 3});
    auto dst = clip.data();
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t pr = 0; pr < gr; ++pr)
            for (std::size_t pc = 0; pc < gc; ++pc) {
                auto src = patches.row(t * n + pr * gc + pc);
                for (std::size_t c = 0; c < 3; ++c)
                    for (std::size_t r = 0; r < patch; ++r)
                        for (std::size_t col = 0; col < patch; ++col) {
                            const std::size_t y = pr * patch + r, x = pc * patch + col;
                            dst[((t * h + y) * w + x) * 3 + c] = src[c * patch * patch + r * patch + col];
                        }
            }
    return clip;
}

template <typename T>
void add_embedder_params(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
    add_linear(ps, "embed.proj", cfg.patch_dim(), cfg.dim, cfg.init_std, rng, /*bias=*/false);
    ps.add("embed.cls", trunc_normal_tensor<T>(Shape{1, cfg.dim}, cfg.init_std, rng));
    ps.add("embed.pos", trunc_normal_tensor<T>(Shape{cfg.tokens(), cfg.dim}, cfg.init_std, rng));
}

/// Token matrix Z: row 0 is cls + pos[0]; row 1 + t*N + p is
/// patch(t,p) * E + pos[1 + t*N + p].
template <typename T>
Var<T> embed(Context<T>& ctx, const Tensor<T>& patches, std::size_t patch_dim) {
    if (patches.rank() != 2 || patches.dim(1) != patch_dim)
        throw DimensionError("embed: patches " + shape_str(patches.shape()) + " need " +
                             std::to_string(patch_dim) + " columns");
    Var<T> pos = ctx.param("embed.pos");
    const std::size_t tokens = patches.dim(0) + 1;
    if (pos.shape()[0] != tokens)
        throw DimensionError("embed: " + std::to_string(patches.dim(0)) + " patches but " +
                             std::to_string(pos.shape()[0]) + " positional slots");
    // A zero first row leaves room for the [CLS] token in the projection.
    Tensor<T> padded(Shape{tokens, patch_dim});
    std::copy(patches.data().begin(), patches.data().end(), padded.data().begin() + patch_dim);
    Var<T> proj = matmul(ctx.tape().constant(std::move(padded)), ctx.param("embed.proj.weight"));
    std::vector<std::size_t> to_first{0};
    Var<T> cls = pool_rows(ctx.param("embed.cls"), to_first, tokens);
    return add(add(proj, cls), pos);
}

template <typename T>
void add_encoder_params(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::string p = "encoder." + std::to_string(l);
        add_attention(ps, p + ".temporal", cfg.dim, cfg.init_std, rng);
        add_attention(ps, p + ".spatial", cfg.dim, cfg.init_std, rng);
        add_mlp(ps, p + ".mlp", cfg.dim, cfg.mlp_ratio, cfg.init_std, rng);
    }
}

template <typename T>
struct EncoderOutput {
    /// (1 + N*T) x d token embeddings; row 0 is [CLS].
    Var<T> tokens;
    /// Per layer, head-averaged spatial attention: T x (1+N) x (1+N).
    std::vector<Tensor<T>> attn;
};

/// Temporal groups: one per patch position, spanning the T frames. [CLS] is
/// not a member.
inline Groups temporal_groups(std::size_t frames, std::size_t n) {
    Groups g(n);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t t = 0; t < frames; ++t) g[p].push_back(1 + t * n + p);
    return g;
}

/// Spatial groups: one per frame, [CLS] followed by that frame's patches.
inline Groups spatial_groups(std::size_t frames, std::size_t n) {
    Groups g(frames);
    for (std::size_t t = 0; t < frames; ++t) {
        g[t].push_back(0);
        for (std::size_t p = 0; p < n; ++p) g[t].push_back(1 + t * n + p);
    }
    return g;
}

/// L divided space-time blocks: temporal MHSA, spatial MHSA, MLP, each
/// pre-normalized with a residual. [CLS] skips the temporal pass; its spatial
/// output is the mean of its per-frame outputs.
template <typename T>
EncoderOutput<T> encode(Context<T>& ctx, Var<T> z, const ModelConfig& cfg) {
    const std::size_t n = cfg.patches_per_frame(), frames = cfg.frames, tokens = cfg.tokens();
    if (z.value().rank() != 2 || z.shape()[0] != tokens || z.shape()[1] != cfg.dim)
        throw DimensionError("encode: token matrix " + shape_str(z.shape()) + " does not match config (" +
                             std::to_string(tokens) + "x" + std::to_string(cfg.dim) + ")");
    const T eps = static_cast<T>(cfg.ln_eps);
    const Groups tg = temporal_groups(frames, n);
    const Groups sg = spatial_groups(frames, n);
    const std::vector<std::size_t> t_target = flatten_groups(tg);
    const std::vector<std::size_t> s_target = flatten_groups(sg);
    std::vector<std::size_t> keep_cls(tokens, kDropRow);
    keep_cls[0] = 0;

    EncoderOutput<T> out;
    Var<T> x = z;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::string p = "encoder." + std::to_string(l);
        try {
            Var<T> ta = mhsa(ctx, norm(ctx, x, p + ".temporal.norm", eps), p + ".temporal", tg, cfg.heads,
                             t_target, tokens)
                            .out;
            // Strict form has no residual, but [CLS] still passes the temporal stage unchanged.
            x = cfg.strict_equations ? add(ta, pool_rows(x, keep_cls, tokens)) : add(x, ta);

            auto sa = mhsa(ctx, norm(ctx, x, p + ".spatial.norm", eps), p + ".spatial", sg, cfg.heads, s_target,
                           tokens);
            x = cfg.strict_equations ? sa.out : add(x, sa.out);

            Var<T> m = mlp(ctx, norm(ctx, x, p + ".mlp.norm", eps), p + ".mlp");
            x = cfg.strict_equations ? m : add(x, m);

            if (ctx.tape().checked() && !x.value().all_finite()) throw NonFiniteError("non-finite activation");

            Tensor<T> maps(Shape{frames, n + 1, n + 1});
            auto dst = maps.data().begin();
            for (const auto& a : sa.maps) dst = std::copy(a.data().begin(), a.data().end(), dst);
            out.attn.push_back(std::move(maps));
        } catch (const NonFiniteError& e) {
            throw NonFiniteError("encoder layer " + std::to_string(l) + ": " + e.what());
        }
    }
    out.tokens = x;
    return out;
}

} // namespace rostfine
