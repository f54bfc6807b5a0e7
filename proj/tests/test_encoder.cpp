#include <gtest/gtest.h>

#include <cmath>

#include "oracle.hpp"
#include "rostfine/encoder.hpp"
#include "rostfine/model.hpp"

using namespace rostfine;

namespace {

Tensor<double> random_clip(std::size_t t, std::size_t h, std::size_t w, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> c(Shape{t, h, w, 3});
    for (double& v : c.data()) v = uniform01(rng);
    return c;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.frames = 2;
    cfg.height = 8;
    cfg.width = 16;
    cfg.patch = 8; // N = 2
    cfg.dim = 4;
    cfg.heads = 1;
    cfg.depth = 1;
    cfg.mlp_ratio = 2;
    cfg.init_std = 0.5;
    return cfg;
}

} // namespace

// --- patchify ----------------------------------------------------------------

TEST(Patchify, WholeFrameIsOnePatch) {
    auto clip = random_clip(2, 4, 4, 1);
    auto p = patchify(clip, 4);
    ASSERT_EQ(p.shape(), (Shape{2, 48}));
    // Channel-major, then row-major.
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < 4; ++y)
                for (std::size_t x = 0; x < 4; ++x)
                    EXPECT_EQ(p(t, c * 16 + y * 4 + x), clip[((t * 4 + y) * 4 + x) * 3 + c]);
}

TEST(Patchify, ThirtyTwoByEightGivesSixteenPatches) {
    auto p = patchify(random_clip(3, 32, 32, 2), 8);
    EXPECT_EQ(p.shape(), (Shape{48, 192}));
}

TEST(Patchify, RasterOrderWithinFrame) {
    Tensor<double> clip(Shape{1, 4, 6, 3});
    // Encode the pixel position in the red channel.
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 6; ++x) clip[(y * 6 + x) * 3] = static_cast<double>(10 * y + x);
    auto p = patchify(clip, 2);
    ASSERT_EQ(p.dim(0), 6u);
    EXPECT_EQ(p(1, 0), 2.0);  // patch (0,1) starts at x=2
    EXPECT_EQ(p(3, 0), 20.0); // patch (1,0) starts at y=2
    EXPECT_EQ(p(5, 3), 35.0); // patch (1,2), last red pixel (y=3, x=5)
}

TEST(Patchify, RoundTripIsExact) {
    auto clip = random_clip(3, 16, 24, 3);
    EXPECT_EQ(unpatchify(patchify(clip, 8), 3, 16, 24, 8), clip);
}

TEST(Patchify, IndivisibleSizeExplainsDivisibility) {
    try {
        patchify(random_clip(1, 10, 16, 4), 8);
        FAIL();
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("divisible by patch size 8"), std::string::npos) << e.what();
    }
}

// --- embed -------------------------------------------------------------------

TEST(Embed, ZeroProjectionAndZeroPatchesGivePositions) {
    ModelConfig cfg = tiny_config();
    Rng rng(5);
    ParameterSet<double> ps;
    add_embedder_params(ps, cfg, rng);
    ps["embed.proj.weight"].fill(0.0);
    Tape<double> tape;
    Context<double> ctx(tape, ps);
    auto z = embed(ctx, Tensor<double>(Shape{4, cfg.patch_dim()}), cfg.patch_dim()).value();
    const auto& pos = ps["embed.pos"];
    const auto& cls = ps["embed.cls"];
    for (std::size_t c = 0; c < cfg.dim; ++c) EXPECT_EQ(z(0, c), cls[c] + pos(0, c));
    for (std::size_t r = 1; r < 5; ++r)
        for (std::size_t c = 0; c < cfg.dim; ++c) EXPECT_EQ(z(r, c), pos(r, c));
}

TEST(Embed, OutputShapeMatchesTokens) {
    ModelConfig cfg;
    Rng rng(6);
    ParameterSet<double> ps;
    add_embedder_params(ps, cfg, rng);
    Tape<double> tape;
    Context<double> ctx(tape, ps);
    auto z = embed(ctx, patchify(random_clip(cfg.frames, cfg.height, cfg.width, 7), cfg.patch), cfg.patch_dim());
    EXPECT_EQ(z.shape(), (Shape{cfg.tokens(), cfg.dim}));
}

TEST(Embed, SinglePatchHandComputed) {
    ParameterSet<double> ps;
    // 1x1 pixel patch: x = (r, g, b), d = 2.
    ps.add("embed.proj.weight", Tensor<double>::matrix({{1, 0}, {2, 1}, {0, -1}}));
    ps.add("embed.cls", Tensor<double>::matrix({{0.5, -0.5}}));
    ps.add("embed.pos", Tensor<double>::matrix({{1, 1}, {10, 20}}));
    Tape<double> tape;
    Context<double> ctx(tape, ps);
    auto z = embed(ctx, Tensor<double>::matrix({{3, 4, 5}}), 3).value();
    // row 1: (3*1 + 4*2 + 0, 0 + 4 - 5) + (10, 20) = (21, 19)
    EXPECT_EQ(z, Tensor<double>::matrix({{1.5, 0.5}, {21, 19}}));
}

TEST(Embed, WrongPatchLengthThrows) {
    ModelConfig cfg = tiny_config();
    Rng rng(8);
    ParameterSet<double> ps;
    add_embedder_params(ps, cfg, rng);
    Tape<double> tape;
    Context<double> ctx(tape, ps);
    EXPECT_THROW(embed(ctx, Tensor<double>(Shape{4, 5}), cfg.patch_dim()), DimensionError);
}

// --- encode ------------------------------------------------------------------

TEST(Encode, MatchesStraightLineReference) {
    const ModelConfig cfg = tiny_config();
    Rng rng(9);
    ParameterSet<double> ps;
    add_encoder_params(ps, cfg, rng);
    // Nonzero biases and norm affine terms so every parameter matters.
    for (std::size_t i = 0; i < ps.size(); ++i)
        for (double& v : ps.tensors()[i].data()) v += uniform(rng, -0.2, 0.2);
    Tensor<double> z(Shape{5, 4});
    for (double& v : z.data()) v = uniform(rng, -1, 1);

    Tape<double> tape;
    Context<double> ctx(tape, ps);
    const auto out = encode(ctx, tape.constant(z), cfg);

    const double eps = cfg.ln_eps;
    oracle::Mat x = oracle::from_tensor(z);
    // Temporal: rows {1,3} (patch 0) and {2,4} (patch 1); [CLS] untouched.
    for (std::size_t p = 0; p < 2; ++p) {
        const std::size_t r0 = 1 + p, r1 = 3 + p;
        oracle::Mat n{oracle::norm(ps, "encoder.0.temporal.norm", x[r0], eps),
                      oracle::norm(ps, "encoder.0.temporal.norm", x[r1], eps)};
        const auto a = oracle::attention(ps, "encoder.0.temporal", n, 1);
        x[r0] = oracle::add(x[r0], a[0]);
        x[r1] = oracle::add(x[r1], a[1]);
    }
    // Spatial: frame t sees {[CLS], 1+2t, 2+2t}; [CLS] takes the frame mean.
    oracle::Mat y = x;
    oracle::Vec cls_update(4, 0.0);
    std::vector<oracle::Mat> maps(2);
    for (std::size_t t = 0; t < 2; ++t) {
        const std::size_t rows[3] = {0, 1 + 2 * t, 2 + 2 * t};
        oracle::Mat n;
        for (auto r : rows) n.push_back(oracle::norm(ps, "encoder.0.spatial.norm", x[r], eps));
        const auto a = oracle::attention(ps, "encoder.0.spatial", n, 1, &maps[t]);
        for (std::size_t c = 0; c < 4; ++c) cls_update[c] += a[0][c] / 2;
        y[rows[1]] = oracle::add(x[rows[1]], a[1]);
        y[rows[2]] = oracle::add(x[rows[2]], a[2]);
    }
    y[0] = oracle::add(x[0], cls_update);
    for (auto& r : y) r = oracle::add(r, oracle::mlp(ps, "encoder.0.mlp", oracle::norm(ps, "encoder.0.mlp.norm", r, eps)));

    const auto got = oracle::from_tensor(out.tokens.value());
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(got[r][c], y[r][c], 1e-12) << r << "," << c;
    ASSERT_EQ(out.attn.size(), 1u);
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.attn[0][(t * 3 + i) * 3 + j], maps[t][i][j], 1e-12);
}

TEST(Encode, MapsRowStochasticAndShapePreserved) {
    ModelConfig cfg;
    cfg.depth = 3;
    auto model = Model<double>::create(cfg);
    Tape<double> tape;
    Context<double> ctx(tape, model.params(), false);
    const auto out = model.forward(ctx, random_clip(cfg.frames, cfg.height, cfg.width, 10));
    EXPECT_EQ(out.encoder.tokens.shape(), (Shape{cfg.tokens(), cfg.dim}));
    ASSERT_EQ(out.encoder.attn.size(), 3u);
    const std::size_t side = 1 + cfg.patches_per_frame();
    for (const auto& a : out.encoder.attn) {
        ASSERT_EQ(a.shape(), (Shape{cfg.frames, side, side}));
        for (std::size_t row = 0; row < cfg.frames * side; ++row) {
            double s = 0;
            for (std::size_t j = 0; j < side; ++j) s += a[row * side + j];
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Encode, FramePermutationPermutesMaps) {
    ModelConfig cfg;
    cfg.frames = 3;
    auto model = Model<double>::create(cfg);
    const auto clip = random_clip(cfg.frames, cfg.height, cfg.width, 11);
    const std::size_t n = cfg.patches_per_frame(), frame_px = cfg.height * cfg.width * 3;

    // Swap frames 0 and 2 in the clip and in the positional table.
    Tensor<double> swapped = clip;
    for (std::size_t i = 0; i < frame_px; ++i) std::swap(swapped[i], swapped[2 * frame_px + i]);
    ParameterSet<double> ps = model.params();
    auto& pos = ps["embed.pos"];
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t c = 0; c < cfg.dim; ++c) std::swap(pos(1 + p, c), pos(1 + 2 * n + p, c));
    Model<double> permuted(cfg, ps);

    auto maps = [&](const Model<double>& m, const Tensor<double>& x) {
        Tape<double> tape;
        Context<double> ctx(tape, m.params(), false);
        return m.forward(ctx, x).encoder.attn;
    };
    const auto a = maps(model, clip), b = maps(permuted, swapped);
    const std::size_t side = 1 + n, per_frame = side * side;
    const std::size_t perm[3] = {2, 1, 0};
    for (std::size_t l = 0; l < a.size(); ++l)
        for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t i = 0; i < per_frame; ++i)
                EXPECT_NEAR(a[l][t * per_frame + i], b[l][perm[t] * per_frame + i], 1e-12);
}

TEST(Encode, UniformAttentionAveragesValues) {
    // q = k = 0 makes attention uniform; identity value and output
    // projections expose the raw averages.
    const std::size_t d = 4, frames = 2, n = 3, tokens = 1 + frames * n;
    ParameterSet<double> ps;
    for (const char* name : {"q", "k"}) {
        ps.add(std::string("a.") + name + ".weight", Tensor<double>(Shape{d, d}));
        ps.add(std::string("a.") + name + ".bias", Tensor<double>(Shape{d}));
    }
    for (const char* name : {"v", "out"}) {
        ps.add(std::string("a.") + name + ".weight", Tensor<double>::identity(d));
        ps.add(std::string("a.") + name + ".bias", Tensor<double>(Shape{d}));
    }
    Rng rng(12);
    Tensor<double> x(Shape{tokens, d});
    for (double& v : x.data()) v = uniform(rng, -1, 1);
    Tape<double> tape;
    Context<double> ctx(tape, ps);
    const Groups sg = spatial_groups(frames, n);
    auto out = mhsa(ctx, tape.constant(x), "a", sg, 2, flatten_groups(sg), tokens).out.value();
    for (std::size_t c = 0; c < d; ++c) {
        double want = 0;
        for (const auto& g : sg) {
            double m = 0;
            for (auto r : g) m += x(r, c);
            want += m / static_cast<double>(g.size()) / static_cast<double>(frames);
        }
        EXPECT_NEAR(out(0, c), want, 1e-9);
    }
}

TEST(Encode, DeterministicForSeed) {
    ModelConfig cfg;
    cfg.seed = 42;
    const auto clip = random_clip(cfg.frames, cfg.height, cfg.width, 13);
    auto run = [&] {
        auto model = Model<double>::create(cfg);
        Tape<double> tape;
        Context<double> ctx(tape, model.params(), false);
        auto out = model.forward(ctx, clip);
        return std::make_pair(out.encoder.tokens.value(), out.encoder.attn);
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
    cfg.seed = 43;
    EXPECT_NE(run().first, a.first);
}

TEST(Encode, NonFiniteReportsLayer) {
    ModelConfig cfg;
    auto model = Model<double>::create(cfg);
    ParameterSet<double> ps = model.params();
    ps["encoder.1.spatial.q.weight"][0] = std::numeric_limits<double>::infinity();
    Model<double> broken(cfg, ps);
    Tape<double> tape(true);
    Context<double> ctx(tape, broken.params());
    try {
        broken.forward(ctx, random_clip(cfg.frames, cfg.height, cfg.width, 14));
        FAIL();
    } catch (const NonFiniteError& e) {
        EXPECT_NE(std::string(e.what()).find("encoder layer 1"), std::string::npos) << e.what();
    }
}

TEST(Encode, TokenShapeMismatchThrows) {
    ModelConfig cfg = tiny_config();
    Rng rng(15);
    ParameterSet<double> ps;
    add_encoder_params(ps, cfg, rng);
    Tape<double> tape;
    Context<double> ctx(tape, ps);
    EXPECT_THROW(encode(ctx, tape.constant(Tensor<double>(Shape{4, 4})), cfg), DimensionError);
}

TEST(ModelConfig, InvariantsValidated) {
    ModelConfig cfg;
    cfg.validate();
    auto bad = [](auto mutate, const char* field) {
        ModelConfig c;
        mutate(c);
        try {
            c.validate();
            ADD_FAILURE() << field;
        } catch (const ValueError& e) {
            EXPECT_EQ(e.field(), field);
        }
    };
    bad([](ModelConfig& c) { c.height = 30; }, "model.height");
    bad([](ModelConfig& c) { c.width = 12; }, "model.width");
    bad([](ModelConfig& c) { c.dim = 30; }, "model.dim");
    bad([](ModelConfig& c) { c.top_k = 0; }, "model.top_k");
    bad([](ModelConfig& c) { c.top_k = 17; }, "model.top_k");
    bad([](ModelConfig& c) { c.depth = 1; }, "model.depth");
}
