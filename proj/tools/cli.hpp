#pragma once

// splatreg command-line front end. run_cli is the whole program minus the
// process boundary so tests can drive it with string streams.
//
// Exit codes: 0 success, 1 I/O or parse failure, 2 usage, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <omp.h>

#include <CLI11.hpp>

#include "splatreg/io/manifest.hpp"
#include "splatreg/io/ply.hpp"
#include "splatreg/io/report.hpp"
#include "splatreg/pipeline.hpp"

#ifndef SPLATREG_VERSION
#define SPLATREG_VERSION "0.0.0"
#endif
#ifndef SPLATREG_BUILD_HASH
#define SPLATREG_BUILD_HASH "unknown"
#endif

namespace splatreg::cli {

enum ExitCode { kOk = 0, kIoError = 1, kUsage = 2, kNumerical = 3 };

inline int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::IoError:
        case ErrorCode::ParseError:
        case ErrorCode::UnsupportedLayout:
        case ErrorCode::SchemaError:
        case ErrorCode::EmptyMixture:
        case ErrorCode::AllOpacitiesZero:
            return kIoError;
        case ErrorCode::InvalidArgument:
        case ErrorCode::MissingCameras:
        case ErrorCode::DimensionMismatch:
        case ErrorCode::LengthMismatch:
            return kUsage;
        case ErrorCode::NotSymmetric:
        case ErrorCode::NotPositiveDefinite:
        case ErrorCode::NotConverged:
        case ErrorCode::TooLarge:
        case ErrorCode::BehindCamera:
        case ErrorCode::EmptyMask:
        case ErrorCode::Diverged:
            return kNumerical;
    }
    return kNumerical;
}

/// Everything a command can be configured with. Defaults, then the
/// --config file, then explicit flags.
struct Settings {
    std::uint64_t seed = 0;
    int threads = 0;  // 0: OpenMP default
    SinkhornConfig sinkhorn{};
    PipelineConfig pipeline{};
    SyntheticSceneConfig synth{};
};

namespace detail {

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error(ErrorCode::InvalidArgument, "expected a boolean, got '" + v + "'");
}

inline double parse_number(const std::string& v) {
    double d = 0.0;
    if (!splatreg::detail::ply::parse_double(v, d) || !std::isfinite(d)) {
        throw Error(ErrorCode::InvalidArgument, "expected a number, got '" + v + "'");
    }
    return d;
}

inline int parse_int(const std::string& v) {
    const double d = parse_number(v);
    if (d != std::floor(d) || std::abs(d) > 1e9) throw Error(ErrorCode::InvalidArgument, "expected an integer, got '" + v + "'");
    return static_cast<int>(d);
}

inline std::vector<double> parse_list(const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number(item));
    if (out.empty()) throw Error(ErrorCode::InvalidArgument, "expected a comma-separated list");
    return out;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

using Setter = std::function<void(Settings&, const std::string&)>;

/// Config-file keys. Documented in README.md.
inline const std::map<std::string, Setter>& config_keys() {
    static const std::map<std::string, Setter> keys = {
        {"seed", [](Settings& s, const std::string& v) { s.seed = static_cast<std::uint64_t>(parse_int(v)); }},
        {"threads", [](Settings& s, const std::string& v) { s.threads = parse_int(v); }},
        {"sinkhorn.epsilon", [](Settings& s, const std::string& v) { s.sinkhorn.epsilon = parse_number(v); }},
        {"sinkhorn.epsilon_scale",
         [](Settings& s, const std::string& v) {
             if (v == "relative") s.sinkhorn.epsilon_scale = EpsilonScale::relative_to_mean_cost;
             else if (v == "absolute") s.sinkhorn.epsilon_scale = EpsilonScale::absolute;
             else throw Error(ErrorCode::InvalidArgument, "epsilon_scale must be relative or absolute");
         }},
        {"sinkhorn.max_iterations", [](Settings& s, const std::string& v) { s.sinkhorn.max_iterations = parse_int(v); }},
        {"sinkhorn.convergence_delta", [](Settings& s, const std::string& v) { s.sinkhorn.convergence_delta = parse_number(v); }},
        {"sinkhorn.relaxation", [](Settings& s, const std::string& v) { s.sinkhorn.relaxation = parse_number(v); }},
        {"weights.mw2", [](Settings& s, const std::string& v) { s.pipeline.registration.weights.mw2 = parse_number(v); }},
        {"weights.photo", [](Settings& s, const std::string& v) { s.pipeline.registration.weights.photo = parse_number(v); }},
        {"weights.depth", [](Settings& s, const std::string& v) { s.pipeline.registration.weights.depth = parse_number(v); }},
        {"optimizer.max_steps", [](Settings& s, const std::string& v) { s.pipeline.registration.optimizer.max_steps = parse_int(v); }},
        {"optimizer.epsilon_ladder",
         [](Settings& s, const std::string& v) { s.pipeline.registration.optimizer.epsilon_ladder = parse_list(v); }},
        {"optimizer.update",
         [](Settings& s, const std::string& v) {
             auto& u = s.pipeline.registration.optimizer.update;
             if (v == "heavy_ball") u = UpdateRule::heavy_ball;
             else if (v == "adam") u = UpdateRule::adam;
             else throw Error(ErrorCode::InvalidArgument, "optimizer.update must be heavy_ball or adam");
         }},
        {"optimizer.lr_q", [](Settings& s, const std::string& v) { s.pipeline.registration.optimizer.lr_q = parse_number(v); }},
        {"optimizer.lr_t", [](Settings& s, const std::string& v) { s.pipeline.registration.optimizer.lr_t = parse_number(v); }},
        {"optimizer.lr_log_s", [](Settings& s, const std::string& v) { s.pipeline.registration.optimizer.lr_log_s = parse_number(v); }},
        {"optimizer.momentum", [](Settings& s, const std::string& v) { s.pipeline.registration.optimizer.momentum = parse_number(v); }},
        {"optimizer.patience", [](Settings& s, const std::string& v) { s.pipeline.registration.optimizer.patience = parse_int(v); }},
        {"optimizer.procrustes_iterations",
         [](Settings& s, const std::string& v) { s.pipeline.registration.optimizer.procrustes_iterations = parse_int(v); }},
        {"registration.overlap_rounds", [](Settings& s, const std::string& v) { s.pipeline.registration.overlap_rounds = parse_int(v); }},
        {"registration.shared_view_init",
         [](Settings& s, const std::string& v) { s.pipeline.registration.shared_view_init = parse_bool(v); }},
        {"registration.scale_prenormalization",
         [](Settings& s, const std::string& v) { s.pipeline.registration.scale_prenormalization = parse_bool(v); }},
        {"prune.each_merge", [](Settings& s, const std::string& v) { s.pipeline.prune_each_merge = parse_bool(v); }},
        {"prune.opacity_floor", [](Settings& s, const std::string& v) { s.pipeline.prune.opacity_floor = parse_number(v); }},
        {"prune.dedup_radius", [](Settings& s, const std::string& v) { s.pipeline.prune.dedup_radius = parse_number(v); }},
        {"synth.components",
         [](Settings& s, const std::string& v) { s.synth.n_components = static_cast<std::size_t>(std::max(0, parse_int(v))); }},
        {"synth.submaps",
         [](Settings& s, const std::string& v) { s.synth.n_submaps = static_cast<std::size_t>(std::max(0, parse_int(v))); }},
        {"synth.overlap", [](Settings& s, const std::string& v) { s.synth.overlap_fraction = parse_number(v); }},
        {"synth.noise", [](Settings& s, const std::string& v) { s.synth.noise = parse_number(v); }},
    };
    return keys;
}

/// key = value lines; '#' starts a comment. Unknown keys are usage errors.
inline void apply_config_text(Settings& s, const std::string& text, const std::string& source) {
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error(ErrorCode::InvalidArgument, where + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto it = config_keys().find(key);
        if (it == config_keys().end()) throw Error(ErrorCode::InvalidArgument, where + ": unknown key '" + key + "'");
        try {
            it->second(s, value);
        } catch (const Error& e) {
            throw Error(ErrorCode::InvalidArgument, where + ": " + std::string(e.what()).substr(17));
        }
    }
}

inline Json error_json(const Error& e) {
    return {{"ok", false}, {"error", {{"code", std::string(to_string(e.code()))}, {"message", e.what()}}}};
}

}  // namespace detail

struct Context {
    std::ostream& out;
    std::ostream& err;
    bool json = false;
    bool verbose = false;
    Settings settings;

    void warn(const std::string& msg) const { err << "warning: " << msg << '\n'; }
    void info(const std::string& msg) const {
        if (verbose) err << msg << '\n';
    }
};

inline GaussianMixture load_ply(const Context& ctx, const std::string& path) {
    auto r = read_splat_ply_detailed(path);
    for (const auto& w : r.warnings) ctx.warn(path + ": " + w);
    ctx.info("read " + std::to_string(r.mixture.size()) + " components from " + path);
    return std::move(r.mixture);
}

inline std::vector<Camera> load_cameras(const Context& ctx, const std::string& path) {
    std::vector<std::string> warnings;
    const auto cams = cameras_from_json(parse_json_text(read_file_bytes(path), path), warnings);
    for (const auto& w : warnings) ctx.warn(path + ": " + w);
    return cams;
}

// --- commands ---------------------------------------------------------------------

inline int cmd_distance(Context& ctx, const std::string& a_path, const std::string& b_path) {
    const auto a = load_ply(ctx, a_path);
    const auto b = load_ply(ctx, b_path);
    const auto r = mw2_distance(a, b, ctx.settings.sinkhorn);
    if (!r.plan.converged) ctx.warn("Sinkhorn stopped before the marginals met tolerance");
    if (ctx.json) {
        ctx.out << Json{{"ok", true},
                        {"mw2", r.mw2},
                        {"mw2_squared", r.mw2_sq},
                        {"epsilon", r.plan.epsilon},
                        {"marginal_error", r.plan.marginal_error},
                        {"iterations", r.plan.iterations_used},
                        {"converged", r.plan.converged}}
                       .dump()
                << '\n';
    } else {
        char buf[256];
        std::snprintf(buf, sizeof buf, "MW2 %.9g\nmarginal_error %.3e\niterations %d\nepsilon %.6g\n", r.mw2,
                      r.plan.marginal_error, r.plan.iterations_used, r.plan.epsilon);
        ctx.out << buf;
    }
    return kOk;
}

struct RegisterArgs {
    std::string main_path, sub_path, cameras_path, main_cameras_path, out_path, merge_out;
};

inline int cmd_register(Context& ctx, const RegisterArgs& args) {
    const auto main = normalize_weights(load_ply(ctx, args.main_path));
    const auto sub = normalize_weights(load_ply(ctx, args.sub_path));
    std::vector<Camera> cams;
    if (!args.cameras_path.empty()) cams = load_cameras(ctx, args.cameras_path);
    std::optional<Camera> main_ref;
    if (!args.main_cameras_path.empty()) {
        const auto mc = load_cameras(ctx, args.main_cameras_path);
        if (mc.empty()) throw Error(ErrorCode::InvalidArgument, "main camera file lists no cameras");
        main_ref = mc.back();
    }
    const auto& cfg = ctx.settings.pipeline.registration;
    const auto result = register_pair(main, sub, cams, cfg, main_ref ? &*main_ref : nullptr);
    const double mw2_before = mw2_distance(main, sub, ctx.settings.pipeline.metric).mw2_sq;
    const double mw2_after = mw2_distance(main, normalize_weights(sim3_apply(result.theta, sub)), ctx.settings.pipeline.metric).mw2_sq;

    Json j = registration_to_json(result);
    j["mw2_initial"] = mw2_before;
    j["mw2_final"] = mw2_after;
    if (!args.out_path.empty()) {
        write_text_file(args.out_path, j.dump(2) + "\n");
        ctx.info("wrote " + args.out_path);
    }
    if (!args.merge_out.empty()) {
        write_splat_ply(merge_maps(main, sub, result.theta), args.merge_out);
        ctx.info("wrote " + args.merge_out);
    }
    if (ctx.json) {
        j["ok"] = true;
        ctx.out << j.dump() << '\n';
    } else {
        const auto& t = result.theta;
        char buf[512];
        std::snprintf(buf, sizeof buf,
                      "rotation_wxyz %.9f %.9f %.9f %.9f\ntranslation %.9g %.9g %.9g\nscale %.9g\n"
                      "mw2_sq %.6g -> %.6g\nsteps %d\n",
                      t.q.w, t.q.x, t.q.y, t.q.z, t.t.x(), t.t.y(), t.t.z(), t.scale(), mw2_before, mw2_after,
                      result.steps_used);
        ctx.out << buf;
    }
    return kOk;
}

inline int cmd_pipeline(Context& ctx, const std::string& manifest_path, const std::string& out_dir) {
    auto loaded = read_manifest_detailed(manifest_path);
    for (const auto& w : loaded.warnings) ctx.warn(w);
    if (loaded.manifest.submaps.size() < 2) {
        throw Error(ErrorCode::InvalidArgument, "pipeline needs a manifest with at least two submaps");
    }
    const auto report = run_incremental(loaded.manifest, ctx.settings.pipeline);
    for (const auto& s : report.submaps) {
        if (!s.accepted) ctx.warn("submap " + std::to_string(s.index) + " skipped: " + s.error);
        else ctx.info("submap " + std::to_string(s.index) + " accepted");
    }
    if (!out_dir.empty()) {
        write_report(report, out_dir);
        write_splat_ply(report.merged, std::filesystem::path(out_dir) / "merged.ply");
        ctx.info("wrote report to " + out_dir);
    }
    std::size_t accepted = 0;
    for (const auto& s : report.submaps) accepted += s.accepted ? 1 : 0;
    if (ctx.json) {
        Json j = report_to_json(report);
        j["ok"] = true;
        ctx.out << j.dump() << '\n';
    } else {
        ctx.out << "submaps " << report.submaps.size() << " accepted " << accepted << '\n';
        ctx.out << "map_size " << report.map_size_after_prune << '\n';
        if (report.ate_rmse) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "ate_rmse %.6f (%.4f%% of extent)\n", *report.ate_rmse,
                          100.0 * *report.ate_rmse / report.scene_extent);
            ctx.out << buf;
        }
    }
    return kOk;
}

inline int cmd_synth(Context& ctx, const std::string& out_dir) {
    SyntheticSceneConfig sc = ctx.settings.synth;
    sc.seed = ctx.settings.seed;
    const auto m = generate_synthetic_scene(sc);
    const auto path = write_manifest(m, out_dir);
    if (ctx.json) {
        ctx.out << Json{{"ok", true}, {"manifest", path.string()}, {"submaps", m.submaps.size()}, {"scene_extent", m.scene_extent}}.dump()
                << '\n';
    } else {
        ctx.out << path.string() << '\n';
    }
    return kOk;
}

inline int cmd_eval_ate(Context& ctx, const std::string& est_path, const std::string& gt_path) {
    const auto est = read_tum(est_path);
    const auto gt = read_tum(gt_path);
    const auto [e, g] = associate(est, gt);
    if (e.size() < est.size()) ctx.warn(std::to_string(est.size() - e.size()) + " estimated poses have no ground truth match");
    const double ate = ate_rmse(e, g);
    if (ctx.json) {
        ctx.out << Json{{"ok", true}, {"ate_rmse", ate}, {"poses", e.size()}}.dump() << '\n';
    } else {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6f\n", ate);
        ctx.out << buf;
    }
    return kOk;
}

inline std::string version_string() { return std::string("splatreg ") + SPLATREG_VERSION + " (" + SPLATREG_BUILD_HASH + ")"; }

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Gaussian mixture map registration"};
    app.name("splatreg");
    app.require_subcommand(0, 1);
    app.fallthrough();

    bool json = false, verbose = false, version = false;
    std::string config_path;
    std::uint64_t seed = 0;
    int threads = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Random seed (synth)");
    auto* threads_opt = app.add_option("--threads", threads, "Cap on worker threads")->check(CLI::NonNegativeNumber);
    app.add_flag("--verbose,-v", verbose, "Progress on stderr");
    app.add_option("--config", config_path, "key = value file overriding defaults");
    app.add_flag("--json", json, "One JSON document on stdout");
    app.add_flag("--version", version, "Print version and build hash");

    std::string a_path, b_path;
    double epsilon = 0.0;
    std::string mode;
    auto* distance = app.add_subcommand("distance", "MW2 distance between two splat PLY files");
    distance->add_option("a", a_path, "First PLY")->required();
    distance->add_option("b", b_path, "Second PLY")->required();
    auto* eps_opt = distance->add_option("--epsilon", epsilon, "Entropic regularization")->check(CLI::PositiveNumber);
    auto* mode_opt = distance->add_option("--mode", mode, "Epsilon scale")->check(CLI::IsMember({"relative", "absolute"}));

    RegisterArgs reg;
    double w_mw2 = 0, w_photo = 0, w_depth = 0;
    int steps = 0;
    auto* registerc = app.add_subcommand("register", "Estimate the Sim(3) placing sub onto main");
    registerc->add_option("main", reg.main_path, "Main map PLY")->required();
    registerc->add_option("sub", reg.sub_path, "Submap PLY")->required();
    registerc->add_option("--cameras", reg.cameras_path, "Submap cameras JSON");
    registerc->add_option("--main-cameras", reg.main_cameras_path, "Main-map cameras JSON; the last one is the shared view");
    registerc->add_option("--out", reg.out_path, "Result JSON path");
    registerc->add_option("--merge-out", reg.merge_out, "Merged map PLY path");
    auto* mw2_opt = registerc->add_option("--mw2", w_mw2, "MW2 loss weight")->check(CLI::NonNegativeNumber);
    auto* photo_opt = registerc->add_option("--photo", w_photo, "Photometric loss weight")->check(CLI::NonNegativeNumber);
    auto* depth_opt = registerc->add_option("--depth", w_depth, "Depth loss weight")->check(CLI::NonNegativeNumber);
    auto* steps_opt = registerc->add_option("--steps", steps, "Gradient steps per epsilon stage")->check(CLI::NonNegativeNumber);

    std::string manifest_path, out_dir;
    auto* pipeline = app.add_subcommand("pipeline", "Incremental registration of a manifest's submaps");
    pipeline->add_option("manifest", manifest_path, "Manifest JSON")->required();
    pipeline->add_option("--out", out_dir, "Report directory");

    std::string synth_out;
    std::size_t components = 0, submaps = 0;
    double overlap = 0.0, noise = 0.0;
    auto* synth = app.add_subcommand("synth", "Write a synthetic scene manifest");
    synth->add_option("--out", synth_out, "Output directory")->required();
    auto* comp_opt = synth->add_option("--components", components, "Components in the world map")->check(CLI::PositiveNumber);
    auto* sub_opt = synth->add_option("--submaps", submaps, "Number of submaps")->check(CLI::PositiveNumber);
    auto* overlap_opt = synth->add_option("--overlap", overlap, "Overlap fraction of adjacent submaps");
    auto* noise_opt = synth->add_option("--noise", noise, "Relative covariance/mean noise");

    std::string est_path, gt_path;
    auto* eval = app.add_subcommand("eval-ate", "ATE RMSE between two TUM trajectories");
    eval->add_option("estimated", est_path, "Estimated trajectory")->required();
    eval->add_option("ground_truth", gt_path, "Ground-truth trajectory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e, out, err);
        err << "error: " << e.what() << "\n\n" << app.help();
        return kUsage;
    }
    if (version) {
        out << version_string() << '\n';
        return kOk;
    }
    if (app.get_subcommands().empty()) {
        err << app.help();
        return kUsage;
    }

    Context ctx{out, err, json, verbose, {}};
    auto fail = [&](const Error& e) {
        err << "error: " << e.what() << '\n';
        if (json) out << detail::error_json(e).dump() << '\n';
        return exit_code_for(e.code());
    };
    try {
        if (!config_path.empty()) {
            detail::apply_config_text(ctx.settings, read_file_bytes(config_path), config_path);
        }
    } catch (const Error& e) {
        return fail(e);
    }
    auto& s = ctx.settings;
    if (seed_opt->count()) s.seed = seed;
    if (threads_opt->count()) s.threads = threads;
    if (eps_opt->count()) s.sinkhorn.epsilon = epsilon;
    if (mode_opt->count()) {
        s.sinkhorn.epsilon_scale = mode == "absolute" ? EpsilonScale::absolute : EpsilonScale::relative_to_mean_cost;
    }
    auto& rc = s.pipeline.registration;
    if (mw2_opt->count()) rc.weights.mw2 = w_mw2;
    if (photo_opt->count()) rc.weights.photo = w_photo;
    if (depth_opt->count()) rc.weights.depth = w_depth;
    if (steps_opt->count()) rc.optimizer.max_steps = steps;
    if (comp_opt->count()) s.synth.n_components = components;
    if (sub_opt->count()) s.synth.n_submaps = submaps;
    if (overlap_opt->count()) s.synth.overlap_fraction = overlap;
    if (noise_opt->count()) s.synth.noise = noise;
    if (s.threads > 0) omp_set_num_threads(s.threads);

    try {
        if (distance->parsed()) return cmd_distance(ctx, a_path, b_path);
        if (registerc->parsed()) return cmd_register(ctx, reg);
        if (pipeline->parsed()) return cmd_pipeline(ctx, manifest_path, out_dir);
        if (synth->parsed()) return cmd_synth(ctx, synth_out);
        if (eval->parsed()) return cmd_eval_ate(ctx, est_path, gt_path);
    } catch (const Error& e) {
        return fail(e);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        if (json) out << Json{{"ok", false}, {"error", {{"code", "Internal"}, {"message", e.what()}}}}.dump() << '\n';
        return kIoError;
    }
    return kUsage;
}

}  // namespace splatreg::cli
