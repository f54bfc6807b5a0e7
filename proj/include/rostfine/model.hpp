#pragma once

#include <optional>
#include <vector>

#include "rostfine/branches.hpp"
#include "rostfine/config.hpp"
#include "rostfine/encoder.hpp"
#include "rostfine/nn.hpp"
#include "rostfine/objectives.hpp"
#include "rostfine/psm.hpp"

namespace rostfine {

template <typename T>
struct ForwardOutput {
    EncoderOutput<T> encoder;
    /// Absent when only the global feature is active.
    std::optional<SelectedPatches> selection;
    FeatureTriple<T> triple;
    /// Aggregated grade distribution, 1 x 5.
    Var<T> prediction;
};

/// Encoder, patch selection, spatial/temporal branches and grade heads.
/// Branch parameters exist only for the active features.
template <typename T>
class Model {
public:
    static Model create(const ModelConfig& cfg) {
        cfg.validate();
        Rng rng(derive_seed(cfg.seed, 0x1d17));
        ParameterSet<T> ps;
        add_embedder_params(ps, cfg, rng);
        add_encoder_params(ps, cfg, rng);
        if (cfg.features.spatial) add_branch_params(ps, "fgs", cfg, rng);
        if (cfg.features.temporal) add_branch_params(ps, "fgt", cfg, rng);
        add_head_params(ps, cfg, rng);
        return Model(cfg, std::move(ps), Unchecked{});
    }

    /// Wraps existing parameters, checking they match the layout `cfg` implies.
    Model(ModelConfig cfg, ParameterSet<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
        cfg_.validate();
        const Model reference = create(cfg_);
        if (reference.params_.names() != params_.names())
            throw ValueError("parameter names do not match the model configuration");
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (reference.params_.tensors()[i].shape() != params_.tensors()[i].shape())
                throw DimensionError("parameter '" + params_.names()[i] + "' has shape " +
                                     shape_str(params_.tensors()[i].shape()) + ", expected " +
                                     shape_str(reference.params_.tensors()[i].shape()));
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    const ParameterSet<T>& params() const noexcept { return params_; }
    ParameterSet<T>& params() noexcept { return params_; }

    /// Full forward pass for one T x H x W x 3 clip. `forced` pins the patch
    /// selection instead of deriving it from the encoder attention.
    ForwardOutput<T> forward(Context<T>& ctx, const Tensor<T>& clip, const SelectedPatches* forced = nullptr) const {
        const Shape want{cfg_.frames, cfg_.height, cfg_.width, 3};
        if (clip.shape() != want)
            throw DimensionError("clip shape " + shape_str(clip.shape()) + " does not match model input " +
                                 shape_str(want));
        ForwardOutput<T> out;
        Var<T> z = embed(ctx, patchify(clip, cfg_.patch), cfg_.patch_dim());
        out.encoder = encode(ctx, z, cfg_);
        const Var<T>& tokens = out.encoder.tokens;
        Var<T> v_cls = gather_rows(tokens, {0});

        if (cfg_.features.global) out.triple.v_g = v_cls;
        if (cfg_.features.needs_selection()) {
            out.selection = forced ? *forced : select_topk(aggregate_cls_scores(out.encoder.attn), cfg_.top_k);
            Var<T> f = selected_embeddings(tokens, *out.selection);
            if (cfg_.features.spatial) out.triple.v_s = fgs_forward(ctx, f, v_cls, cfg_.frames, cfg_);
            if (cfg_.features.temporal) out.triple.v_t = fgt_forward(ctx, f, v_cls, cfg_.frames, cfg_);
        }
        if (cfg_.aggregation == Aggregation::Mean) project_heads(ctx, out.triple);
        out.prediction = aggregate(ctx, out.triple, cfg_.aggregation);
        return out;
    }

    /// Grade distribution without recording gradients.
    std::vector<double> predict(const Tensor<T>& clip) const {
        Tape<T> tape;
        Context<T> ctx(tape, params_, /*requires_grad=*/false);
        const auto out = forward(ctx, clip);
        const auto d = out.prediction.value().data();
        return std::vector<double>(d.begin(), d.end());
    }

private:
    struct Unchecked {};
    Model(ModelConfig cfg, ParameterSet<T> params, Unchecked) : cfg_(std::move(cfg)), params_(std::move(params)) {}

    ModelConfig cfg_;
    ParameterSet<T> params_;
};

} // namespace rostfine
