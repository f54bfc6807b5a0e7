#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rostfine/config.hpp"
#include "rostfine/datapipe.hpp"
#include "rostfine/evalviz.hpp"
#include "rostfine/model.hpp"
#include "rostfine/trainer.hpp"

namespace rostfine::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValueError(path.string() + ": invalid JSON: " + e.what());
    }
}

/// Values given on the command line; each overrides the config file.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<double> lr;
    std::optional<double> alpha;
    std::optional<std::string> loss;
    std::optional<std::string> features;
    std::optional<std::string> aggregation;

    void attach(CLI::App* app) {
        app->add_option("--seed", seed, "Run seed (overrides the config file)");
        app->add_option("--epochs", epochs, "Training epochs");
        app->add_option("--lr", lr, "Learning rate");
        app->add_option("--alpha", alpha, "Diversity loss weight");
        app->add_option("--loss", loss, "Base loss: mse or js");
        app->add_option("--features", features, "Active features, any of g, s, t");
        app->add_option("--aggregation", aggregation, "mean, sum or concat");
    }

    void apply(RunConfig& cfg) const {
        if (seed) cfg.seed = *seed;
        if (epochs) cfg.train.epochs = *epochs;
        if (lr) cfg.train.lr = *lr;
        if (alpha) cfg.loss.alpha = *alpha;
        if (loss) cfg.loss.kind = parse_loss_kind(*loss);
        if (features) cfg.model.features = FeatureSet::parse(*features);
        if (aggregation) cfg.model.aggregation = parse_aggregation(*aggregation);
        cfg.apply_seed();
    }
};

inline RunConfig load_run_config(const std::string& path, const Overrides& ov) {
    RunConfig cfg;
    if (!path.empty()) merge_json(cfg, read_json_file(path));
    ov.apply(cfg);
    cfg.validate();
    return cfg;
}

inline std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(9) << v;
    return s.str();
}

inline Box parse_box(const std::string& text) {
    std::vector<long> v;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            std::size_t used = 0;
            v.push_back(std::stol(cell, &used));
            if (used != cell.size()) throw std::invalid_argument(cell);
        } catch (const std::exception&) {
            throw ValueError("--box expects x,y,w,h integers, got '" + text + "'", "box");
        }
    }
    if (v.size() != 4) throw ValueError("--box expects x,y,w,h integers, got '" + text + "'", "box");
    return {v[0], v[1], v[2], v[3]};
}

} // namespace detail

// ---------------------------------------------------------------------------
// Commands

inline int cmd_synth(const std::string& spec_path, std::optional<std::uint64_t> seed, const std::string& out_dir,
                     std::ostream& out) {
    SynthSpec spec = synth_spec_from_json(detail::read_json_file(spec_path));
    if (seed) spec.seed = *seed;
    const auto ds = synthesize_dataset(spec);
    write_dataset(out_dir, ds);
    out << "wrote " << ds.size() << " samples to " << out_dir << '\n';
    return kExitOk;
}

struct TrackArgs {
    std::string video;
    std::string box;
    std::string out;
    std::size_t frames = 16;
    std::size_t crop = 150;
    std::size_t size = 0;
    long radius = 20;
};

inline int cmd_track(const TrackArgs& a, std::ostream& out) {
    const Box box = detail::parse_box(a.box);
    const RawVideo video = read_video_dir(a.video);
    const Trajectory traj = track_template(video, box, TrackerOptions{a.radius});
    std::optional<std::pair<std::size_t, std::size_t>> target;
    if (a.size) target = std::make_pair(a.size, a.size);
    const TrackedClip clip = build_clip(video, traj, a.frames, a.crop, target);
    std::filesystem::create_directories(a.out);
    write_clip(std::filesystem::path(a.out) / "clip.bin", clip.clip);
    std::ofstream csv(std::filesystem::path(a.out) / "trajectory.csv");
    if (!csv) throw IoError("cannot write trajectory.csv in " + a.out);
    csv << "frame,x,y,flagged,selected\n";
    std::size_t flagged = 0;
    for (std::size_t f = 0; f < traj.centers.size(); ++f) {
        const bool sel = std::find(clip.source_frames.begin(), clip.source_frames.end(), f) != clip.source_frames.end();
        csv << f << ',' << detail::fmt(traj.centers[f].x) << ',' << detail::fmt(traj.centers[f].y) << ','
            << int(traj.flagged[f]) << ',' << int(sel) << '\n';
        flagged += traj.flagged[f];
    }
    out << "tracked " << traj.centers.size() << " frames (" << flagged << " flagged), clip "
        << shape_str(clip.clip.shape()) << " written to " << a.out << '\n';
    return kExitOk;
}

struct TrainArgs {
    std::string data;
    std::string config;
    std::optional<std::size_t> fold;
    std::string out;
    detail::Overrides overrides;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
    const RunConfig cfg = detail::load_run_config(a.config, a.overrides);
    const Dataset ds = read_dataset(a.data, cfg.data.limit);
    Dataset train = ds;
    if (a.fold) {
        if (*a.fold >= cfg.train.folds)
            throw ValueError("--fold " + std::to_string(*a.fold) + " outside [0, " + std::to_string(cfg.train.folds) + ")",
                             "fold");
        const auto folds = kfold_split(ds, cfg.train.folds, cfg.seed);
        train = split_fold(ds, folds, *a.fold).first;
    }
    auto model = Model<double>::create(cfg.model);
    SgdState state;
    const std::string log_path = a.out + ".log.csv";
    std::ofstream log(log_path);
    if (!log) throw IoError("cannot write " + log_path);
    log << "epoch,loss,cos_gs,cos_gt,cos_st\n";
    FitOptions opts;
    opts.on_epoch = [&](const EpochLog& l) {
        log << l.epoch << ',' << detail::fmt(l.loss) << ',' << detail::fmt(l.cos_gs) << ',' << detail::fmt(l.cos_gt)
            << ',' << detail::fmt(l.cos_st) << '\n';
        out << "epoch " << l.epoch << " loss " << detail::fmt(l.loss) << '\n';
    };
    fit(model, train, cfg.train, cfg.loss, state, opts);
    save_checkpoint(a.out, make_checkpoint(cfg, a.fold, model, state));
    out << "checkpoint written to " << a.out << " (" << train.size() << " training samples)\n";
    return kExitOk;
}

/// Without `folds`: evaluate the checkpoint on its held-out fold (or the
/// whole set when it was trained on everything). With `folds`: rerun k-fold
/// cross-validation using the checkpoint's configuration.
inline int cmd_eval(const std::string& data, const std::string& ckpt_path, bool folds, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Dataset ds = read_dataset(data, ckpt.config.data.limit);
    EvalReport report;
    if (folds) {
        report = cross_validate(ds, ckpt.config);
    } else {
        const auto model = model_from_checkpoint(ckpt);
        if (ckpt.held_out_fold) {
            const auto assign = kfold_split(ds, ckpt.config.train.folds, ckpt.config.seed);
            const auto [train, test] = split_fold(ds, assign, *ckpt.held_out_fold);
            if (test.empty()) throw ValueError("held-out fold is empty for this dataset");
            add_fold(report, *ckpt.held_out_fold, model, train, test, ckpt.config.loss.kl_epsilon);
        } else {
            add_fold(report, 0, model, ds, ds, ckpt.config.loss.kl_epsilon);
        }
        finish_report(report);
    }
    out << to_json(report).dump(2) << '\n';
    return kExitOk;
}

inline int cmd_visualize(const std::string& ckpt_path, const std::string& clip_path, const std::string& out_dir,
                         std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const auto model = model_from_checkpoint(ckpt);
    const auto& m = ckpt.config.model;
    Tensor<double> clip = read_clip(std::filesystem::path(clip_path)).cast<double>();
    Tape<double> tape;
    Context<double> ctx(tape, model.params(), false);
    const auto fwd = model.forward(ctx, clip);
    std::filesystem::create_directories(out_dir);
    for (std::size_t t = 0; t < m.frames; ++t) {
        const auto heat = attention_rollout(frame_maps(fwd.encoder.attn, t));
        char name[32];
        std::snprintf(name, sizeof name, "frame_%02zu.pgm", t);
        export_heatmap(heat, m.grid_rows(), m.grid_cols(), m.patch, std::filesystem::path(out_dir) / name);
    }
    out << "wrote " << m.frames << " heatmaps to " << out_dir << '\n';
    return kExitOk;
}

inline constexpr double kGradCheckThreshold = 1e-4;

inline int cmd_gradcheck(const std::string& config, const detail::Overrides& ov, std::size_t coords, double h,
                         std::ostream& out) {
    const RunConfig cfg = detail::load_run_config(config, ov);
    GradCheckOptions opts;
    opts.max_coords_per_param = coords;
    opts.seed = derive_seed(cfg.seed, 0x6c);
    const auto r = check_model_gradients(cfg, h, opts);
    const auto model = Model<double>::create(cfg.model);
    out << "parameters: " << r.params << " tensors, " << r.result.coords_checked << " coordinates checked\n";
    out << "loss: " << detail::fmt(r.loss) << '\n';
    out << "max relative error: " << std::scientific << std::setprecision(3) << r.result.max_rel_error
        << std::defaultfloat << " (worst: " << model.params().names()[r.result.worst_param] << '['
        << r.result.worst_coord << "])\n";
    const bool ok = r.result.max_rel_error < kGradCheckThreshold;
    out << (ok ? "ok" : "FAILED") << ": threshold " << kGradCheckThreshold << '\n';
    return ok ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Sperm video grade-distribution assessment"};
    app.name("rostfine");
    app.require_subcommand(1);

    std::optional<std::uint64_t> synth_seed;
    std::string synth_spec, synth_out;
    auto* synth = app.add_subcommand("synth", "Write a synthetic labelled dataset");
    synth->add_option("--spec", synth_spec, "Synthetic dataset spec (JSON)")->required();
    synth->add_option("--out", synth_out, "Output dataset directory")->required();
    synth->add_option("--seed", synth_seed, "Seed (overrides the spec)");

    TrackArgs track_args;
    auto* track = app.add_subcommand("track", "Track a target in a PPM frame directory and cut a clip");
    track->add_option("--video", track_args.video, "Directory of .ppm frames")->required();
    track->add_option("--box", track_args.box, "Initial box x,y,w,h in frame 0")->required();
    track->add_option("--out", track_args.out, "Output directory")->required();
    track->add_option("--frames", track_args.frames, "Frames to keep")->capture_default_str();
    track->add_option("--crop", track_args.crop, "Crop side in pixels")->capture_default_str();
    track->add_option("--size", track_args.size, "Resize crops to this side (0 keeps the crop)");
    track->add_option("--radius", track_args.radius, "Search radius in pixels")->capture_default_str();

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
    train->add_option("--data", train_args.data, "Dataset directory")->required();
    train->add_option("--config", train_args.config, "Run config (JSON)");
    train->add_option("--fold", train_args.fold, "Hold out this cross-validation fold");
    train->add_option("--out", train_args.out, "Checkpoint path")->required();
    train_args.overrides.attach(train);

    std::string eval_data, eval_ckpt;
    bool eval_folds = false;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint; prints a JSON report");
    eval->add_option("--data", eval_data, "Dataset directory")->required();
    eval->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
    eval->add_flag("--folds", eval_folds, "Run full k-fold cross-validation with the checkpoint config");

    std::string vis_ckpt, vis_clip, vis_out;
    auto* vis = app.add_subcommand("visualize", "Write attention-rollout heatmaps per frame");
    vis->add_option("--ckpt", vis_ckpt, "Checkpoint path")->required();
    vis->add_option("--clip", vis_clip, "clip.bin file")->required();
    vis->add_option("--out", vis_out, "Output directory")->required();

    std::string gc_config;
    detail::Overrides gc_overrides;
    std::size_t gc_coords = 16;
    double gc_h = 1e-5;
    auto* gc = app.add_subcommand("gradcheck", "Compare analytic and numeric gradients of the full model");
    gc->add_option("--config", gc_config, "Run config (JSON); defaults to the toy model");
    gc->add_option("--coords", gc_coords, "Coordinates per parameter tensor, 0 for all")->capture_default_str();
    gc->add_option("--step", gc_h, "Finite-difference step")->capture_default_str();
    gc_overrides.attach(gc);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    try {
        if (*synth) return cmd_synth(synth_spec, synth_seed, synth_out, out);
        if (*track) return cmd_track(track_args, out);
        if (*train) return cmd_train(train_args, out);
        if (*eval) return cmd_eval(eval_data, eval_ckpt, eval_folds, out);
        if (*vis) return cmd_visualize(vis_ckpt, vis_clip, vis_out, out);
        if (*gc) return cmd_gradcheck(gc_config, gc_overrides, gc_coords, gc_h, out);
    } catch (const ValueError& e) {
        err << "error: " << e.what();
        if (!e.field().empty()) err << " [" << e.field() << "]";
        err << '\n';
        return kExitFailure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    err << app.help();
    return kExitUsage;
}

} // namespace rostfine::cli
