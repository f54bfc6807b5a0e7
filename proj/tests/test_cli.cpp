#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "rostfine/cli.hpp"

using namespace rostfine;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "rostfine");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

/// Scratch directory with a small synthetic dataset and a matching config.
class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("rostfine_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        write_text(dir_ / "spec.json", R"({"count": 150, "frames": 4, "height": 16, "width": 16, "seed": 3})");
        write_text(dir_ / "cfg.json", R"({
  "model": {"frames": 4, "height": 16, "width": 16, "patch": 8, "dim": 16, "heads": 2,
            "depth": 2, "top_k": 2, "init_std": 0.1},
  "train": {"lr": 0.1, "epochs": 40},
  "seed": 5
})");
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string p(const std::string& name) const { return (dir_ / name).string(); }

    void synth() { ASSERT_EQ(run_cli({"synth", "--spec", p("spec.json"), "--out", p("data")}).code, 0); }

    fs::path dir_;
};

} // namespace

TEST(CliUsage, NoArgumentsIsUsageError) {
    const auto r = run_cli({});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("synth"), std::string::npos);
    EXPECT_NE(r.err.find("gradcheck"), std::string::npos);
}

TEST(CliUsage, UnknownCommandOrFlagIsUsageError) {
    EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
    EXPECT_EQ(run_cli({"gradcheck", "--bogus"}).code, 2);
    EXPECT_EQ(run_cli({"synth", "--spec", "x.json"}).code, 2); // --out missing
}

TEST(CliUsage, HelpExitsZero) {
    const auto r = run_cli({"--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("train"), std::string::npos);
}

TEST(CliUsage, GradcheckOnToyConfigPasses) {
    const auto r = run_cli({"gradcheck", "--coords", "4"});
    EXPECT_EQ(r.code, 0) << r.out << r.err;
    EXPECT_NE(r.out.find("max relative error"), std::string::npos);
    EXPECT_NE(r.out.find("ok"), std::string::npos);
}

TEST_F(CliTest, InvalidConfigValueNamesField) {
    synth();
    write_text(dir_ / "bad.json", R"({"model": {"dim": 30}})");
    auto r = run_cli({"train", "--data", p("data"), "--config", p("bad.json"), "--out", p("m.ckpt")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("[model.dim]"), std::string::npos) << r.err;

    write_text(dir_ / "typo.json", R"({"train": {"learning_rate": 0.1}})");
    r = run_cli({"train", "--data", p("data"), "--config", p("typo.json"), "--out", p("m.ckpt")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("train.learning_rate"), std::string::npos) << r.err;

    r = run_cli({"train", "--data", p("data"), "--config", p("cfg.json"), "--lr", "-1", "--out", p("m.ckpt")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("[train.lr]"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir_ / "m.ckpt"));
}

TEST_F(CliTest, MissingInputsAreFailures) {
    EXPECT_EQ(run_cli({"train", "--data", p("nope"), "--out", p("m.ckpt")}).code, 1);
    EXPECT_EQ(run_cli({"eval", "--data", p("nope"), "--ckpt", p("nope.ckpt")}).code, 1);
    EXPECT_EQ(run_cli({"synth", "--spec", p("nope.json"), "--out", p("data")}).code, 1);
}

TEST_F(CliTest, TrainThenEvalBeatsBaseline) {
    synth();
    const auto t = run_cli({"train", "--data", p("data"), "--config", p("cfg.json"), "--fold", "0", "--out", p("m.ckpt")});
    ASSERT_EQ(t.code, 0) << t.err;

    const auto log = slurp(dir_ / "m.ckpt.log.csv");
    EXPECT_EQ(log.substr(0, log.find('\n')), "epoch,loss,cos_gs,cos_gt,cos_st");
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 41);

    const auto e = run_cli({"eval", "--data", p("data"), "--ckpt", p("m.ckpt")});
    ASSERT_EQ(e.code, 0) << e.err;
    const auto j = nlohmann::json::parse(e.out); // strict parser
    EXPECT_EQ(j["folds"].size(), 1u);
    EXPECT_EQ(j["samples"].size(), 30u);
    EXPECT_LT(j["average"]["mse"].get<double>(), j["baseline"]["mse"].get<double>());
}

TEST_F(CliTest, RunsAreByteIdentical) {
    synth();
    for (const char* out : {"a.ckpt", "b.ckpt"})
        ASSERT_EQ(run_cli({"train", "--data", p("data"), "--config", p("cfg.json"), "--epochs", "3", "--out", p(out)}).code,
                  0);
    EXPECT_EQ(slurp(dir_ / "a.ckpt"), slurp(dir_ / "b.ckpt"));
    EXPECT_EQ(slurp(dir_ / "a.ckpt.log.csv"), slurp(dir_ / "b.ckpt.log.csv"));
    const auto ea = run_cli({"eval", "--data", p("data"), "--ckpt", p("a.ckpt")});
    const auto eb = run_cli({"eval", "--data", p("data"), "--ckpt", p("b.ckpt")});
    EXPECT_EQ(ea.out, eb.out);

    ASSERT_EQ(run_cli({"train", "--data", p("data"), "--config", p("cfg.json"), "--epochs", "3", "--seed", "6",
                       "--out", p("c.ckpt")})
                  .code,
              0);
    EXPECT_NE(slurp(dir_ / "a.ckpt"), slurp(dir_ / "c.ckpt"));
}

TEST_F(CliTest, EvalFoldsRunsCrossValidation) {
    write_text(dir_ / "spec.json", R"({"count": 20, "frames": 4, "height": 16, "width": 16, "seed": 3})");
    synth();
    ASSERT_EQ(run_cli({"train", "--data", p("data"), "--config", p("cfg.json"), "--epochs", "1", "--out", p("m.ckpt")}).code,
              0);
    const auto e = run_cli({"eval", "--data", p("data"), "--ckpt", p("m.ckpt"), "--folds"});
    ASSERT_EQ(e.code, 0) << e.err;
    const auto j = nlohmann::json::parse(e.out);
    EXPECT_EQ(j["folds"].size(), 5u);
    EXPECT_EQ(j["baseline_folds"].size(), 5u);
    EXPECT_EQ(j["samples"].size(), 20u);
}

TEST_F(CliTest, VisualizeWritesDeterministicHeatmaps) {
    synth();
    ASSERT_EQ(run_cli({"train", "--data", p("data"), "--config", p("cfg.json"), "--epochs", "1", "--out", p("m.ckpt")}).code,
              0);
    const std::string clip = p("data/s0000/clip.bin");
    ASSERT_EQ(run_cli({"visualize", "--ckpt", p("m.ckpt"), "--clip", clip, "--out", p("v1")}).code, 0);
    ASSERT_EQ(run_cli({"visualize", "--ckpt", p("m.ckpt"), "--clip", clip, "--out", p("v2")}).code, 0);
    for (int t = 0; t < 4; ++t) {
        const std::string name = "frame_0" + std::to_string(t) + ".pgm";
        const auto a = slurp(dir_ / "v1" / name);
        EXPECT_EQ(a.substr(0, 11), "P5\n16 16\n25");
        EXPECT_EQ(a, slurp(dir_ / "v2" / name));
    }
    // A clip of the wrong geometry is rejected.
    EXPECT_EQ(run_cli({"visualize", "--ckpt", p("m.ckpt"), "--clip", p("m.ckpt"), "--out", p("v3")}).code, 1);
}

TEST_F(CliTest, TrackWritesClipAndTrajectory) {
    BlobSimSpec spec;
    spec.frames = 30;
    const auto sim = simulate_blob_video(spec);
    write_video_dir(dir_ / "video", sim.video);
    const auto r = run_cli({"track", "--video", p("video"), "--box", "53,43,15,15", "--out", p("clip"), "--crop", "64",
                            "--size", "32"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_clip(dir_ / "clip" / "clip.bin").shape(), (Shape{16, 32, 32, 3}));
    const auto csv = slurp(dir_ / "clip" / "trajectory.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 31);

    const auto bad = run_cli({"track", "--video", p("video"), "--box", "1,2,3", "--out", p("clip")});
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.err.find("[box]"), std::string::npos) << bad.err;
}
