#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "rostfine/datapipe.hpp"

using namespace rostfine;
namespace fs = std::filesystem;

namespace {

/// Fresh scratch directory per test.
class TempDir {
public:
    explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("rostfine_" + name)) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

double max_error(const Trajectory& traj, const std::vector<Point>& truth, double dx = 0, double dy = 0) {
    double e = 0;
    for (std::size_t f = 0; f < truth.size(); ++f)
        e = std::max(e, std::hypot(traj.centers[f].x - truth[f].x - dx, traj.centers[f].y - truth[f].y - dy));
    return e;
}

/// 15x15 box centered on the ground truth of frame 0.
Box box_around(const Point& c) { return {std::lround(c.x) - 7, std::lround(c.y) - 7, 15, 15}; }

std::string write_clip_bytes(const Tensor<float>& clip) {
    std::ostringstream out(std::ios::binary);
    write_clip(out, clip);
    return out.str();
}

FormatError::Kind clip_error(const std::string& bytes) {
    std::istringstream in(bytes, std::ios::binary);
    try {
        read_clip(in, "clip");
    } catch (const FormatError& e) {
        return e.kind();
    }
    ADD_FAILURE() << "read succeeded";
    return FormatError::Kind::Schema;
}

FormatError read_dataset_error(const fs::path& root) {
    try {
        read_dataset(root);
    } catch (const FormatError& e) {
        return e;
    }
    ADD_FAILURE() << "read succeeded";
    return FormatError(FormatError::Kind::Schema, "");
}

SynthSpec small_spec(std::size_t n, std::uint64_t seed) {
    SynthSpec s;
    s.count = n;
    s.frames = 3;
    s.height = 16;
    s.width = 16;
    s.seed = seed;
    return s;
}

} // namespace

// --- tracking ----------------------------------------------------------------

TEST(Track, StaticBlobGivesConstantTrajectory) {
    BlobSimSpec spec;
    spec.motion = BlobMotion::Static;
    const auto sim = simulate_blob_video(spec);
    const auto traj = track_template(sim.video, box_around(sim.truth[0]));
    ASSERT_EQ(traj.centers.size(), spec.frames);
    for (std::size_t f = 1; f < spec.frames; ++f) {
        EXPECT_EQ(traj.centers[f].x, traj.centers[0].x);
        EXPECT_EQ(traj.centers[f].y, traj.centers[0].y);
        EXPECT_FALSE(traj.flagged[f]);
    }
}

TEST(Track, DiagonalMotionWithinTwoPixels) {
    BlobSimSpec spec;
    spec.motion = BlobMotion::Linear;
    spec.velocity = {2, 2};
    const auto sim = simulate_blob_video(spec);
    const auto traj = track_template(sim.video, box_around(sim.truth[0]));
    for (std::size_t f = 0; f < spec.frames; ++f) {
        EXPECT_LE(std::hypot(traj.centers[f].x - sim.truth[f].x, traj.centers[f].y - sim.truth[f].y), 2.0) << f;
        EXPECT_FALSE(traj.flagged[f]) << f;
    }
}

TEST(Track, SinusoidalMotionWithinTwoPixels) {
    BlobSimSpec spec;
    spec.motion = BlobMotion::Sinusoidal;
    spec.start = {40, 80};
    const auto sim = simulate_blob_video(spec);
    const auto traj = track_template(sim.video, box_around(sim.truth[0]));
    EXPECT_LE(max_error(traj, sim.truth), 2.0);
}

TEST(Track, ExitingBlobClampsAndFlags) {
    BlobSimSpec spec;
    spec.motion = BlobMotion::Linear;
    spec.start = {150, 80};
    spec.velocity = {4, 0};
    spec.frames = 30; // blob leaves through the right edge
    const auto sim = simulate_blob_video(spec);
    const auto traj = track_template(sim.video, box_around(sim.truth[0]));
    const double max_center = static_cast<double>(spec.width - 15) + 7.0;
    bool any_flag = false;
    for (std::size_t f = 0; f < spec.frames; ++f) {
        EXPECT_LE(traj.centers[f].x, max_center);
        any_flag = any_flag || traj.flagged[f];
    }
    EXPECT_TRUE(any_flag);
    EXPECT_TRUE(traj.flagged.back());
    EXPECT_EQ(traj.centers.back().x, max_center);
}

TEST(Track, TranslationEquivariant) {
    BlobSimSpec spec;
    spec.motion = BlobMotion::Sinusoidal;
    spec.start = {40, 70};
    spec.frames = 25;
    spec.noise = 0; // texture is not shifted along with the blob
    const auto a = simulate_blob_video(spec);
    spec.start = {40 + 13, 70 - 9};
    const auto b = simulate_blob_video(spec);
    const auto ta = track_template(a.video, box_around(a.truth[0]));
    const auto tb = track_template(b.video, box_around(b.truth[0]));
    for (std::size_t f = 0; f < spec.frames; ++f) {
        EXPECT_EQ(tb.centers[f].x - ta.centers[f].x, 13.0) << f;
        EXPECT_EQ(tb.centers[f].y - ta.centers[f].y, -9.0) << f;
    }
}

TEST(Track, BoxOutsideFrameThrows) {
    const auto sim = simulate_blob_video(BlobSimSpec{});
    for (Box b : {Box{-1, 0, 10, 10}, Box{195, 0, 10, 10}, Box{0, 155, 10, 10}, Box{0, 0, 0, 5}}) {
        try {
            track_template(sim.video, b);
            ADD_FAILURE();
        } catch (const ValueError& e) {
            EXPECT_EQ(e.field(), "box");
        }
    }
}

TEST(Track, FlatFramesFallBackToPreviousCenter) {
    RawVideo v;
    const std::size_t w = 40, h = 30;
    auto sim = simulate_blob_video(BlobSimSpec{w, h, 1, BlobMotion::Static, {20, 15}});
    v.frames.push_back(sim.video.frames[0]);
    v.frames.push_back(Image{w, h, 3, std::vector<std::uint8_t>(w * h * 3, 90)});
    const Box box{13, 8, 15, 15};
    const auto traj = track_template(v, box);
    EXPECT_FALSE(traj.flagged[0]);
    EXPECT_TRUE(traj.flagged[1]);
    EXPECT_EQ(traj.centers[1].x, traj.centers[0].x);
    EXPECT_EQ(traj.centers[1].y, traj.centers[0].y);
}

// --- subsampling and clips ---------------------------------------------------

TEST(Subsample, ClinicalLengthClip) {
    EXPECT_EQ(subsample_indices(175, 16), (std::vector<std::size_t>{0, 12, 23, 35, 46, 58, 70, 81, 93, 104, 116, 128,
                                                                   139, 151, 162, 174}));
}

TEST(Subsample, IdentityWhenLengthsMatch) {
    const auto idx = subsample_indices(16, 16);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(idx[i], i);
}

TEST(Subsample, MonotoneWithFixedEnds) {
    for (std::size_t src = 16; src < 400; src += 7) {
        const auto idx = subsample_indices(src, 16);
        EXPECT_EQ(idx.front(), 0u);
        EXPECT_EQ(idx.back(), src - 1);
        for (std::size_t i = 1; i < idx.size(); ++i) EXPECT_LT(idx[i - 1], idx[i]);
        for (std::size_t i = 0; i < 16; ++i)
            EXPECT_EQ(idx[i], static_cast<std::size_t>(std::lround(static_cast<double>(i * (src - 1)) / 15.0)));
    }
}

TEST(BuildClip, GrayVideoGivesConstantHalf) {
    RawVideo v;
    for (int f = 0; f < 20; ++f) v.frames.push_back(Image{64, 48, 3, std::vector<std::uint8_t>(64 * 48 * 3, 128)});
    Trajectory traj;
    for (int f = 0; f < 20; ++f) {
        traj.centers.push_back({32, 24});
        traj.flagged.push_back(false);
    }
    const auto clip = build_clip(v, traj, 16, 40);
    ASSERT_EQ(clip.clip.shape(), (Shape{16, 40, 40, 3}));
    for (float x : clip.clip.data()) EXPECT_NEAR(x, 0.5f, 0.5f / 255.0f + 1e-6f);
}

TEST(BuildClip, CropFollowsTrajectoryAndClamps) {
    BlobSimSpec spec;
    spec.motion = BlobMotion::Linear;
    const auto sim = simulate_blob_video(spec);
    const auto traj = track_template(sim.video, box_around(sim.truth[0]));
    const auto clip = build_clip(sim.video, traj, 16, 32);
    EXPECT_EQ(clip.source_frames.size(), 16u);
    for (std::size_t i = 0; i < 16; ++i) {
        const auto& c = clip.centers[i];
        EXPECT_GE(c.x - 15.5, 0.0);
        EXPECT_LE(c.x + 15.5, static_cast<double>(spec.width - 1));
        // The brightest pixel of the crop sits near its center.
        std::size_t best = 0;
        for (std::size_t p = 0; p < 32 * 32; ++p)
            if (clip.clip[(i * 32 * 32 + p) * 3] > clip.clip[(i * 32 * 32 + best) * 3]) best = p;
        EXPECT_LE(std::abs(static_cast<double>(best % 32) - 15.5), 4.0);
        EXPECT_LE(std::abs(static_cast<double>(best / 32) - 15.5), 4.0);
    }
}

TEST(BuildClip, ResizesToSmallerTarget) {
    const auto sim = simulate_blob_video(BlobSimSpec{});
    const auto traj = track_template(sim.video, box_around(sim.truth[0]));
    const auto clip = build_clip(sim.video, traj, 8, 64, std::pair<std::size_t, std::size_t>{32, 32});
    EXPECT_EQ(clip.clip.shape(), (Shape{8, 32, 32, 3}));
    for (float x : clip.clip.data()) {
        EXPECT_GE(x, 0.0f);
        EXPECT_LE(x, 1.0f);
    }
}

TEST(BuildClip, CropLargerThanFrameThrows) {
    const auto sim = simulate_blob_video(BlobSimSpec{});
    const auto traj = track_template(sim.video, box_around(sim.truth[0]));
    EXPECT_THROW(build_clip(sim.video, traj, 16, 161), ValueError);
    Trajectory short_traj{{traj.centers[0]}, {false}};
    EXPECT_THROW(build_clip(sim.video, short_traj, 16, 32), ValueError);
}

TEST(VideoDir, RoundTripThroughPpmFrames) {
    TempDir dir("video");
    BlobSimSpec spec;
    spec.frames = 5;
    const auto sim = simulate_blob_video(spec);
    write_video_dir(dir.path(), sim.video);
    const auto back = read_video_dir(dir.path());
    ASSERT_EQ(back.frames.size(), 5u);
    for (std::size_t f = 0; f < 5; ++f) EXPECT_EQ(back.frames[f].pixels, sim.video.frames[f].pixels);
}

// --- labels ------------------------------------------------------------------

TEST(NormalizeCounts, Examples) {
    EXPECT_EQ(normalize_counts({0, 40, 0, 0, 0}), (GradeProbs{0, 1, 0, 0, 0}));
    EXPECT_EQ(normalize_counts({10, 10, 10, 5, 5}), (GradeProbs{0.25, 0.25, 0.25, 0.125, 0.125}));
    EXPECT_THROW(normalize_counts({0, 0, 0, 0, 0}), ValueError);
}

TEST(NormalizeCounts, RescalingRecoversCounts) {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        GradeCounts c{};
        for (auto& v : c) v = static_cast<std::uint32_t>(rng() % 41);
        c[rng() % 5] += 1;
        const auto p = normalize_counts(c);
        const double total = static_cast<double>(c[0] + c[1] + c[2] + c[3] + c[4]);
        double s = 0;
        for (std::size_t g = 0; g < 5; ++g) {
            EXPECT_EQ(static_cast<std::uint32_t>(std::lround(p[g] * total)), c[g]);
            s += p[g];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

// --- synthetic data ----------------------------------------------------------

TEST(Synth, SameSeedGivesIdenticalBytes) {
    TempDir a("synth_a"), b("synth_b");
    write_dataset(a.path(), synthesize_dataset(small_spec(12, 5)));
    write_dataset(b.path(), synthesize_dataset(small_spec(12, 5)));
    for (const auto& entry : fs::recursive_directory_iterator(a.path())) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), a.path());
        std::ifstream fa(entry.path(), std::ios::binary), fb(b.path() / rel, std::ios::binary);
        const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
        EXPECT_EQ(sa, sb) << rel;
    }
    EXPECT_NE(synthesize_dataset(small_spec(12, 5)), synthesize_dataset(small_spec(12, 6)));
}

TEST(Synth, LabelsSumToFortyVotes) {
    for (const auto& s : synthesize_dataset(small_spec(100, 2))) {
        EXPECT_EQ(s.label.total(), 40u);
        double sum = 0;
        for (double p : s.label.probs()) sum += p;
        EXPECT_NEAR(sum, 1.0, 1e-12);
        for (float x : s.clip.data()) {
            EXPECT_GE(x, 0.0f);
            EXPECT_LE(x, 1.0f);
        }
    }
}

TEST(Synth, MostSelectedFrequenciesFollowProfile) {
    for (const GradeProbs& profile : {kClinicalProfile, GradeProbs{1, 1, 1, 1, 1}}) {
        auto spec = small_spec(1000, 3);
        spec.frames = 1;
        spec.height = spec.width = 8;
        spec.profile = profile;
        std::array<double, 5> freq{};
        for (const auto& s : synthesize_dataset(spec)) freq[most_selected(s.label)] += 1.0 / 1000;
        const double total = profile[0] + profile[1] + profile[2] + profile[3] + profile[4];
        for (std::size_t g = 0; g < 5; ++g) EXPECT_NEAR(freq[g], profile[g] / total, 0.03) << g;
    }
}

TEST(Synth, InvalidGeometryThrows) {
    auto spec = small_spec(4, 0);
    spec.height = 4;
    EXPECT_THROW(synthesize_dataset(spec), ValueError);
    spec = small_spec(0, 0);
    EXPECT_THROW(synthesize_dataset(spec), ValueError);
}

TEST(Synth, SpecFromJsonRejectsUnknownKeys) {
    const auto s = synth_spec_from_json(nlohmann::json::parse(R"({"count": 7, "profile": "clinical", "seed": 4})"));
    EXPECT_EQ(s.count, 7u);
    EXPECT_EQ(s.profile, kClinicalProfile);
    EXPECT_EQ(synth_spec_from_json(nlohmann::json::parse(R"({"profile": [1, 0, 2, 0, 0]})")).profile,
              (GradeProbs{1, 0, 2, 0, 0}));
    EXPECT_THROW(synth_spec_from_json(nlohmann::json::parse(R"({"cuont": 7})")), ValueError);
}

// --- on-disk formats ---------------------------------------------------------

TEST(ClipFile, RoundTripAndHeader) {
    Tensor<float> clip(Shape{2, 3, 4, 3});
    for (std::size_t i = 0; i < clip.size(); ++i) clip[i] = static_cast<float>(i) / 100.0f;
    const auto bytes = write_clip_bytes(clip);
    EXPECT_EQ(bytes.substr(0, 8), std::string("RSTF\0CLP", 8));
    EXPECT_EQ(bytes.size(), 8 + 4 + 16 + clip.size() * 4);
    std::istringstream in(bytes, std::ios::binary);
    EXPECT_EQ(read_clip(in, "clip"), clip);
}

TEST(ClipFile, DistinctErrorKinds) {
    const auto bytes = write_clip_bytes(Tensor<float>(Shape{1, 2, 2, 3}));
    auto bad_magic = bytes;
    bad_magic[1] = 'x';
    EXPECT_EQ(clip_error(bad_magic), FormatError::Kind::BadMagic);
    auto bad_version = bytes;
    bad_version[8] = 2;
    EXPECT_EQ(clip_error(bad_version), FormatError::Kind::UnsupportedVersion);
    EXPECT_EQ(clip_error(bytes.substr(0, 14)), FormatError::Kind::Truncated);
    // Header says T=1 but the payload is short or long.
    EXPECT_EQ(clip_error(bytes.substr(0, bytes.size() - 4)), FormatError::Kind::Corruption);
    EXPECT_EQ(clip_error(bytes + std::string(4, '\0')), FormatError::Kind::Corruption);
}

TEST(Dataset, WriteReadRoundTrip) {
    TempDir dir("ds_roundtrip");
    const auto ds = synthesize_dataset(small_spec(9, 1));
    write_dataset(dir.path(), ds);
    EXPECT_EQ(read_dataset(dir.path()), ds);
    const auto first = read_dataset(dir.path(), 4);
    EXPECT_EQ(first.size(), 4u);
}

TEST(Dataset, FourColumnRowIsSchemaErrorNamingLine) {
    TempDir dir("ds_schema");
    write_dataset(dir.path(), synthesize_dataset(small_spec(3, 1)));
    std::ifstream in(dir.path() / "labels.csv");
    std::string header, l1, l2, l3;
    std::getline(in, header);
    std::getline(in, l1);
    std::getline(in, l2);
    std::getline(in, l3);
    in.close();
    l2 = l2.substr(0, l2.rfind(','));
    std::ofstream(dir.path() / "labels.csv") << header << "\n" << l1 << "\n" << l2 << "\n" << l3 << "\n";
    const auto e = read_dataset_error(dir.path());
    EXPECT_EQ(e.kind(), FormatError::Kind::Schema);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
}

TEST(Dataset, BadHeaderIsSchemaError) {
    TempDir dir("ds_header");
    write_dataset(dir.path(), synthesize_dataset(small_spec(2, 1)));
    std::ofstream(dir.path() / "labels.csv") << "id,a,b,c,d,e\ns0000,1,0,0,0,0\n";
    EXPECT_EQ(read_dataset_error(dir.path()).kind(), FormatError::Kind::Schema);
}

TEST(Dataset, ClipSizeMismatchIsCorruption) {
    TempDir dir("ds_corrupt");
    const auto ds = synthesize_dataset(small_spec(2, 1));
    write_dataset(dir.path(), ds);
    fs::resize_file(dir.path() / ds[1].id / "clip.bin", fs::file_size(dir.path() / ds[1].id / "clip.bin") - 8);
    EXPECT_EQ(read_dataset_error(dir.path()).kind(), FormatError::Kind::Corruption);
}

TEST(Dataset, MissingLabelRowAndMissingClip) {
    TempDir dir("ds_missing");
    const auto ds = synthesize_dataset(small_spec(3, 1));
    write_dataset(dir.path(), ds);
    {
        // Drop the last label row; its clip directory remains.
        std::ifstream in(dir.path() / "labels.csv");
        std::string header, l1, l2;
        std::getline(in, header);
        std::getline(in, l1);
        std::getline(in, l2);
        in.close();
        std::ofstream(dir.path() / "labels.csv") << header << "\n" << l1 << "\n" << l2 << "\n";
    }
    auto e = read_dataset_error(dir.path());
    EXPECT_EQ(e.kind(), FormatError::Kind::MissingEntry);
    EXPECT_NE(std::string(e.what()).find(ds[2].id), std::string::npos) << e.what();

    fs::remove_all(dir.path() / ds[2].id);
    fs::remove(dir.path() / ds[0].id / "clip.bin");
    e = read_dataset_error(dir.path());
    EXPECT_EQ(e.kind(), FormatError::Kind::MissingEntry);
    EXPECT_NE(std::string(e.what()).find(ds[0].id), std::string::npos) << e.what();
}

TEST(Dataset, DuplicateIdIsSchemaError) {
    TempDir dir("ds_dup");
    write_dataset(dir.path(), synthesize_dataset(small_spec(2, 1)));
    std::ofstream(dir.path() / "labels.csv", std::ios::app) << "s0000,1,1,1,1,1\n";
    EXPECT_EQ(read_dataset_error(dir.path()).kind(), FormatError::Kind::Schema);
}
