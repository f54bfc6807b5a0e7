#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <cstdio>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "rostfine/errors.hpp"
#include "rostfine/image_io.hpp"
#include "rostfine/random.hpp"
#include "rostfine/tensor.hpp"

namespace rostfine {

/// Source microscope recording: RGB frames of equal size.
struct RawVideo {
    std::vector<Image> frames;
    double fps = 15.0;

    std::size_t width() const { return frames.empty() ? 0 : frames[0].width; }
    std::size_t height() const { return frames.empty() ? 0 : frames[0].height; }
};

/// Loads every *.ppm file of a directory in lexicographic filename order.
inline RawVideo read_video_dir(const std::filesystem::path& dir, double fps = 15.0) {
    if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no .ppm frames in " + dir.string());
    RawVideo v;
    v.fps = fps;
    for (const auto& f : files) {
        Image img = read_pnm(f);
        if (img.channels != 3) throw FormatError(FormatError::Kind::Schema, f.string() + ": expected an RGB (P6) frame");
        if (!v.frames.empty() && (img.width != v.width() || img.height != v.height()))
            throw FormatError(FormatError::Kind::Schema, f.string() + ": frame size differs from the first frame");
        v.frames.push_back(std::move(img));
    }
    return v;
}

inline void write_video_dir(const std::filesystem::path& dir, const RawVideo& video) {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < video.frames.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%05zu.ppm", i);
        write_pnm(dir / name, video.frames[i]);
    }
}

struct Box {
    long x = 0, y = 0, w = 0, h = 0;
};

struct Point {
    double x = 0, y = 0;
};

struct Trajectory {
    /// Template center per source frame, in pixel coordinates.
    std::vector<Point> centers;
    /// Frames where the match sat on the clamped image border or the
    /// correlation was undefined.
    std::vector<bool> flagged;
};

struct TrackerOptions {
    /// Search window is +-radius pixels around the previous match.
    long search_radius = 20;
    /// Drift correction: after matching the refreshed template, re-align
    /// against the frame-0 template within +-anchor_radius when that
    /// correlation reaches anchor_min_ncc. 0 disables it.
    long anchor_radius = 2;
    double anchor_min_ncc = 0.5;
};

namespace detail {

struct Gray {
    std::size_t w = 0, h = 0;
    std::vector<double> v;
    double at(std::size_t x, std::size_t y) const { return v[y * w + x]; }
};

inline Gray to_gray(const Image& img) {
    Gray g{img.width, img.height, std::vector<double>(img.width * img.height)};
    for (std::size_t i = 0; i < g.v.size(); ++i) {
        const auto* p = &img.pixels[i * img.channels];
        g.v[i] = img.channels == 3 ? 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] : p[0];
    }
    return g;
}

inline std::vector<double> crop(const Gray& g, long x0, long y0, long w, long h) {
    std::vector<double> out(static_cast<std::size_t>(w * h));
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
            out[static_cast<std::size_t>(y * w + x)] = g.at(static_cast<std::size_t>(x0 + x), static_cast<std::size_t>(y0 + y));
    return out;
}

/// Zero-mean normalized cross-correlation; nullopt when either side is flat.
inline std::optional<double> ncc(const Gray& g, long x0, long y0, const std::vector<double>& tmpl, double tmean,
                                 double tnorm, long w, long h) {
    double s = 0, ss = 0, cross = 0;
    for (long y = 0; y < h; ++y) {
        const double* row = &g.v[static_cast<std::size_t>((y0 + y) * static_cast<long>(g.w) + x0)];
        const double* trow = &tmpl[static_cast<std::size_t>(y * w)];
        for (long x = 0; x < w; ++x) {
            s += row[x];
            ss += row[x] * row[x];
            cross += row[x] * (trow[x] - tmean);
        }
    }
    const double n = static_cast<double>(w * h);
    const double var = ss - s * s / n;
    if (var <= 1e-9 * n || tnorm <= 1e-9) return std::nullopt;
    return cross / (std::sqrt(var) * tnorm);
}

} // namespace detail

inline Point box_center(long x, long y, long w, long h) {
    return {static_cast<double>(x) + static_cast<double>(w - 1) / 2.0,
            static_cast<double>(y) + static_cast<double>(h - 1) / 2.0};
}

/// Follows the target boxed in frame 0 by maximizing normalized
/// cross-correlation within the search window around the previous match.
/// The template is refreshed from each new best match. Refreshing alone
/// accumulates sub-pixel drift, so each match is re-aligned against the
/// original template when it still fits (Matthews et al. 2004).
inline Trajectory track_template(const RawVideo& video, const Box& init, const TrackerOptions& opts = {}) {
    if (video.frames.empty()) throw ValueError("track: video has no frames");
    const long W = static_cast<long>(video.width()), H = static_cast<long>(video.height());
    if (init.w <= 0 || init.h <= 0 || init.x < 0 || init.y < 0 || init.x + init.w > W || init.y + init.h > H)
        throw ValueError("track: initial box " + std::to_string(init.x) + "," + std::to_string(init.y) + "," +
                             std::to_string(init.w) + "," + std::to_string(init.h) + " is outside the " +
                             std::to_string(W) + "x" + std::to_string(H) + " frame",
                         "box");
    const long w = init.w, h = init.h;
    Trajectory traj;
    long px = init.x, py = init.y;
    detail::Gray g = detail::to_gray(video.frames[0]);
    std::vector<double> tmpl = detail::crop(g, px, py, w, h);
    const std::vector<double> anchor = tmpl;
    double amean = 0;
    for (double v : anchor) amean += v;
    amean /= static_cast<double>(anchor.size());
    double anorm = 0;
    for (double v : anchor) anorm += (v - amean) * (v - amean);
    anorm = std::sqrt(anorm);
    traj.centers.push_back(box_center(px, py, w, h));
    traj.flagged.push_back(false);

    for (std::size_t f = 1; f < video.frames.size(); ++f) {
        g = detail::to_gray(video.frames[f]);
        double tmean = 0;
        for (double v : tmpl) tmean += v;
        tmean /= static_cast<double>(tmpl.size());
        double tnorm = 0;
        for (double v : tmpl) tnorm += (v - tmean) * (v - tmean);
        tnorm = std::sqrt(tnorm);

        const long x_lo = std::max(0L, px - opts.search_radius), x_hi = std::min(W - w, px + opts.search_radius);
        const long y_lo = std::max(0L, py - opts.search_radius), y_hi = std::min(H - h, py + opts.search_radius);
        double best = -std::numeric_limits<double>::infinity();
        long bx = px, by = py;
        bool found = false;
        for (long y = y_lo; y <= y_hi; ++y)
            for (long x = x_lo; x <= x_hi; ++x) {
                const auto score = detail::ncc(g, x, y, tmpl, tmean, tnorm, w, h);
                if (score && *score > best) {
                    best = *score;
                    bx = x;
                    by = y;
                    found = true;
                }
            }
        bool flag = !found;
        if (found && opts.anchor_radius > 0 && anorm > 0) {
            double abest = opts.anchor_min_ncc;
            long ax = bx, ay = by;
            for (long y = std::max(0L, by - opts.anchor_radius); y <= std::min(H - h, by + opts.anchor_radius); ++y)
                for (long x = std::max(0L, bx - opts.anchor_radius); x <= std::min(W - w, bx + opts.anchor_radius); ++x) {
                    const auto score = detail::ncc(g, x, y, anchor, amean, anorm, w, h);
                    if (score && *score > abest) {
                        abest = *score;
                        ax = x;
                        ay = y;
                    }
                }
            bx = ax;
            by = ay;
        }
        if (found) {
            px = bx;
            py = by;
            flag = px == 0 || py == 0 || px == W - w || py == H - h;
            tmpl = detail::crop(g, px, py, w, h);
        }
        traj.centers.push_back(box_center(px, py, w, h));
        traj.flagged.push_back(flag);
    }
    return traj;
}

/// round(i * (src - 1) / (out - 1)) for i = 0..out-1, exact in integers.
inline std::vector<std::size_t> subsample_indices(std::size_t src_frames, std::size_t out_frames) {
    if (src_frames == 0 || out_frames == 0) throw ValueError("subsample: frame counts must be positive");
    if (out_frames == 1) return {0};
    std::vector<std::size_t> idx(out_frames);
    const std::size_t den = out_frames - 1;
    for (std::size_t i = 0; i < out_frames; ++i) idx[i] = (2 * i * (src_frames - 1) + den) / (2 * den);
    return idx;
}

/// Output of tracking-based preprocessing: crops around the target, values
/// in [0, 1], layout frames x rows x cols x 3.
struct TrackedClip {
    Tensor<float> clip;
    std::vector<std::size_t> source_frames;
    std::vector<Point> centers;
};

/// Bilinear resampling of a T x H x W x C clip to new spatial dimensions.
inline Tensor<float> resize_clip(const Tensor<float>& clip, std::size_t out_h, std::size_t out_w) {
    const std::size_t frames = clip.dim(0), h = clip.dim(1), w = clip.dim(2), ch = clip.dim(3);
    if (out_h == h && out_w == w) return clip;
    Tensor<float> out(Shape{frames, out_h, out_w, ch});
    auto src = clip.data();
    auto dst = out.data();
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t y = 0; y < out_h; ++y) {
            // Pixel-center alignment.
            const double sy = std::clamp((static_cast<double>(y) + 0.5) * static_cast<double>(h) / static_cast<double>(out_h) - 0.5, 0.0,
                                         static_cast<double>(h - 1));
            const std::size_t y0 = static_cast<std::size_t>(sy), y1 = std::min(y0 + 1, h - 1);
            const double fy = sy - static_cast<double>(y0);
            for (std::size_t x = 0; x < out_w; ++x) {
                const double sx = std::clamp((static_cast<double>(x) + 0.5) * static_cast<double>(w) / static_cast<double>(out_w) - 0.5,
                                             0.0, static_cast<double>(w - 1));
                const std::size_t x0 = static_cast<std::size_t>(sx), x1 = std::min(x0 + 1, w - 1);
                const double fx = sx - static_cast<double>(x0);
                for (std::size_t c = 0; c < ch; ++c) {
                    auto px = [&](std::size_t yy, std::size_t xx) {
                        return static_cast<double>(src[((t * h + yy) * w + xx) * ch + c]);
                    };
                    const double v = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) +
                                     fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1));
                    dst[((t * out_h + y) * out_w + x) * ch + c] = static_cast<float>(v);
                }
            }
        }
    return out;
}

/// Picks `out_frames` uniformly spaced frames and crops a `crop` x `crop`
/// window centered on the trajectory (clamped inside the frame). If a target
/// size smaller than the crop is given, the crop is resized to it.
inline TrackedClip build_clip(const RawVideo& video, const Trajectory& traj, std::size_t out_frames = 16,
                              std::size_t crop = 150, std::optional<std::pair<std::size_t, std::size_t>> target = {}) {
    const std::size_t W = video.width(), H = video.height();
    if (traj.centers.size() != video.frames.size())
        throw ValueError("build_clip: trajectory covers " + std::to_string(traj.centers.size()) + " of " +
                         std::to_string(video.frames.size()) + " frames");
    if (crop == 0 || crop > W || crop > H)
        throw ValueError("build_clip: crop " + std::to_string(crop) + " larger than the " + std::to_string(W) + "x" +
                             std::to_string(H) + " frame",
                         "crop");
    TrackedClip out;
    out.source_frames = subsample_indices(video.frames.size(), out_frames);
    out.clip = Tensor<float>(Shape{out_frames, crop, crop, 3});
    auto dst = out.clip.data();
    const long half = static_cast<long>(crop / 2);
    for (std::size_t i = 0; i < out_frames; ++i) {
        const std::size_t f = out.source_frames[i];
        const Point c = traj.centers[f];
        const long x0 = std::clamp(std::lround(c.x) - half, 0L, static_cast<long>(W - crop));
        const long y0 = std::clamp(std::lround(c.y) - half, 0L, static_cast<long>(H - crop));
        out.centers.push_back({static_cast<double>(x0) + static_cast<double>(crop - 1) / 2.0,
                               static_cast<double>(y0) + static_cast<double>(crop - 1) / 2.0});
        const Image& img = video.frames[f];
        for (std::size_t y = 0; y < crop; ++y)
            for (std::size_t x = 0; x < crop; ++x)
                for (std::size_t ch = 0; ch < 3; ++ch)
                    dst[((i * crop + y) * crop + x) * 3 + ch] =
                        static_cast<float>(img.at(static_cast<std::size_t>(x0) + x, static_cast<std::size_t>(y0) + y, ch)) /
                        255.0f;
    }
    if (target && target->first <= crop && target->second <= crop)
        out.clip = resize_clip(out.clip, target->first, target->second);
    return out;
}

// ---------------------------------------------------------------------------
// Blob simulator with known ground truth, for exercising the tracker.

enum class BlobMotion { Static, Linear, Sinusoidal };

struct BlobSimSpec {
    std::size_t width = 200;
    std::size_t height = 160;
    std::size_t frames = 40;
    BlobMotion motion = BlobMotion::Linear;
    Point start{60, 50};
    Point velocity{2, 2};        // px/frame for Linear
    double amplitude = 12;       // px for Sinusoidal
    double period = 20;          // frames for Sinusoidal
    double drift = 1.5;          // px/frame along x for Sinusoidal
    double sigma = 3.0;          // blob radius scale
    double noise = 6.0;          // static background texture amplitude
    std::uint64_t seed = 7;
};

struct SimulatedVideo {
    RawVideo video;
    std::vector<Point> truth;
};

/// Renders a bright elongated blob (head plus short tail) over a dim textured
/// background. Shifting `start` shifts every frame rigidly.
inline SimulatedVideo simulate_blob_video(const BlobSimSpec& spec) {
    SimulatedVideo sim;
    Rng rng(spec.seed);
    // Texture is generated on a larger canvas indexed by absolute position so
    // that it is identical however the blob moves.
    std::vector<double> texture(spec.width * spec.height);
    for (double& v : texture) v = uniform(rng, -spec.noise, spec.noise);
    for (std::size_t f = 0; f < spec.frames; ++f) {
        Point c = spec.start;
        const double t = static_cast<double>(f);
        switch (spec.motion) {
        case BlobMotion::Static: break;
        case BlobMotion::Linear:
            c.x += spec.velocity.x * t;
            c.y += spec.velocity.y * t;
            break;
        case BlobMotion::Sinusoidal:
            c.x += spec.drift * t;
            c.y += spec.amplitude * std::sin(2 * std::numbers::pi * t / spec.period);
            break;
        }
        sim.truth.push_back(c);
        Image img{spec.width, spec.height, 3, std::vector<std::uint8_t>(spec.width * spec.height * 3)};
        for (std::size_t y = 0; y < spec.height; ++y)
            for (std::size_t x = 0; x < spec.width; ++x) {
                const double dx = static_cast<double>(x) - c.x, dy = static_cast<double>(y) - c.y;
                const double head = std::exp(-(dx * dx / (2 * spec.sigma * spec.sigma * 1.6) + dy * dy / (2 * spec.sigma * spec.sigma)));
                // Faint asymmetric tail to the left of the head.
                const double tail = dx < 0 && dx > -6 * spec.sigma
                                        ? 0.45 * std::exp(-dy * dy / (2 * 0.6 * 0.6)) * (1 + dx / (6 * spec.sigma))
                                        : 0.0;
                const double v = 40 + texture[y * spec.width + x] + 190 * std::max(head, tail);
                const auto b = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
                for (std::size_t ch = 0; ch < 3; ++ch) img.at(x, y, ch) = b;
            }
        sim.video.frames.push_back(std::move(img));
    }
    return sim;
}

} // namespace rostfine
