#pragma once

// Pipeline report output. A report directory holds
//   report.json           summary, per-submap outcomes, trajectories
//   trajectory_est.txt    TUM: timestamp tx ty tz qx qy qz qw (accepted submaps)
//   trajectory_gt.txt     same layout, written only with ground truth
//   losses.csv            submap,step,mw2,photo,depth,total
// Timestamps are submap indices.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "splatreg/io/manifest.hpp"

namespace splatreg {

struct TimedPose {
    double timestamp = 0.0;
    TrajectoryPose pose;
};

inline std::string format_tum(const std::vector<TimedPose>& poses) {
    std::ostringstream out;
    out << std::setprecision(17);
    for (const auto& p : poses) {
        const auto& q = p.pose.orientation;
        out << p.timestamp << ' ' << p.pose.position.x() << ' ' << p.pose.position.y() << ' ' << p.pose.position.z()
            << ' ' << q.x << ' ' << q.y << ' ' << q.z << ' ' << q.w << '\n';
    }
    return out.str();
}

/// Parses TUM lines; '#' starts a comment line.
inline std::vector<TimedPose> parse_tum(const std::string& text, const std::string& source = "trajectory") {
    std::vector<TimedPose> out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto tok = detail::ply::split_ws(line);
        if (tok.empty() || tok[0].starts_with('#')) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        if (tok.size() != 8) throw Error(ErrorCode::ParseError, where + ": expected 8 values");
        double v[8];
        for (int i = 0; i < 8; ++i) {
            if (!detail::ply::parse_double(tok[static_cast<std::size_t>(i)], v[i]) || !std::isfinite(v[i])) {
                throw Error(ErrorCode::ParseError, where + ": bad number '" + std::string(tok[static_cast<std::size_t>(i)]) + "'");
            }
        }
        TimedPose p;
        p.timestamp = v[0];
        p.pose.position = Vec3(v[1], v[2], v[3]);
        const Quaternion q{v[7], v[4], v[5], v[6]};
        if (!(q.norm() > 0.0)) throw Error(ErrorCode::ParseError, where + ": zero quaternion");
        p.pose.orientation = q.normalized();
        out.push_back(p);
    }
    return out;
}

inline std::vector<TimedPose> read_tum(const std::filesystem::path& path) {
    return parse_tum(read_file_bytes(path), path.string());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot create '" + path.string() + "'");
    out << text;
    if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path.string() + "'");
}

/// Pairs poses with equal timestamps (within `tolerance`), keeping the
/// order of `estimated`.
inline std::pair<std::vector<Vec3>, std::vector<Vec3>> associate(const std::vector<TimedPose>& estimated,
                                                                 const std::vector<TimedPose>& ground_truth,
                                                                 double tolerance = 1e-6) {
    std::pair<std::vector<Vec3>, std::vector<Vec3>> out;
    for (const auto& e : estimated) {
        for (const auto& g : ground_truth) {
            if (std::abs(e.timestamp - g.timestamp) <= tolerance) {
                out.first.push_back(e.pose.position);
                out.second.push_back(g.pose.position);
                break;
            }
        }
    }
    return out;
}

inline std::optional<ErrorCode> error_code_from_string(std::string_view s) {
    for (int i = 0; i <= static_cast<int>(ErrorCode::IoError); ++i) {
        const auto c = static_cast<ErrorCode>(i);
        if (to_string(c) == s) return c;
    }
    return std::nullopt;
}

inline Json registration_to_json(const RegistrationResult& r) {
    Json stages = Json::array();
    for (const auto& s : r.stages) {
        stages.push_back({{"epsilon_relative", s.epsilon_relative},
                          {"epsilon_absolute", s.epsilon_absolute},
                          {"best_loss_start", s.best_loss_start},
                          {"best_loss_end", s.best_loss_end},
                          {"procrustes_updates", s.procrustes_updates},
                          {"steps", s.steps},
                          {"plateaued", s.plateaued}});
    }
    const auto& l = r.final_losses;
    return {{"theta", sim3_to_json(r.theta)},
            {"final_losses",
             {{"mw2", l.mw2}, {"photo", l.photo}, {"depth", l.depth}, {"total", l.total}, {"depth_empty", l.depth_empty}}},
            {"converged", r.converged},
            {"steps_used", r.steps_used},
            {"stages", stages}};
}

inline Json pose_to_json(const TrajectoryPose& p) {
    const auto& q = p.orientation;
    return {{"position", {p.position.x(), p.position.y(), p.position.z()}}, {"orientation", {q.w, q.x, q.y, q.z}}};
}

inline Json report_to_json(const PipelineReport& report) {
    Json subs = Json::array();
    for (const auto& s : report.submaps) {
        Json e = {{"index", s.index},
                  {"accepted", s.accepted},
                  {"mw2_initial", s.mw2_initial},
                  {"mw2_final", s.mw2_final},
                  {"registration", registration_to_json(s.result)}};
        if (!s.error.empty()) e["error"] = s.error;
        if (s.error_code) e["error_code"] = std::string(to_string(*s.error_code));
        subs.push_back(std::move(e));
    }
    auto poses = [](const std::vector<TrajectoryPose>& v) {
        Json a = Json::array();
        for (const auto& p : v) a.push_back(pose_to_json(p));
        return a;
    };
    Json j = {{"schema_version", kManifestSchemaVersion},
              {"scene_extent", report.scene_extent},
              {"map_size_before_prune", report.map_size_before_prune},
              {"map_size_after_prune", report.map_size_after_prune},
              {"submaps", subs},
              {"trajectory_estimated", poses(report.trajectory_estimated)},
              {"trajectory_valid", report.trajectory_valid},
              {"trajectory_ground_truth", poses(report.trajectory_ground_truth)}};
    j["ate_rmse"] = report.ate_rmse ? Json(*report.ate_rmse) : Json(nullptr);
    return j;
}

namespace detail {

inline PipelineReport report_from_json_unchecked(const Json& j) {
    using namespace detail::json_schema;
    std::vector<std::string> ignored;
    require_object(j, "");
    PipelineReport r;
    r.scene_extent = positive(require(j, "", "scene_extent"), "/scene_extent");
    auto size_field = [&](const char* key) {
        const Json& v = require(j, "", key);
        if (!v.is_number_unsigned()) fail(child("", key), "expected a non-negative integer");
        return v.get<std::size_t>();
    };
    r.map_size_before_prune = size_field("map_size_before_prune");
    r.map_size_after_prune = size_field("map_size_after_prune");

    const Json& subs = require(j, "", "submaps");
    require_array(subs, "/submaps");
    for (std::size_t i = 0; i < subs.size(); ++i) {
        const std::string p = child("/submaps", i);
        const Json& s = subs[i];
        require_object(s, p);
        SubmapOutcome o;
        const Json& idx = require(s, p, "index");
        if (!idx.is_number_unsigned()) fail(child(p, "index"), "expected a non-negative integer");
        o.index = idx.get<std::size_t>();
        const Json& acc = require(s, p, "accepted");
        if (!acc.is_boolean()) fail(child(p, "accepted"), "expected a boolean");
        o.accepted = acc.get<bool>();
        o.mw2_initial = number(require(s, p, "mw2_initial"), child(p, "mw2_initial"));
        o.mw2_final = number(require(s, p, "mw2_final"), child(p, "mw2_final"));
        if (s.contains("error")) {
            if (!s.at("error").is_string()) fail(child(p, "error"), "expected a string");
            o.error = s.at("error").get<std::string>();
        }
        if (s.contains("error_code")) {
            const Json& c = s.at("error_code");
            if (!c.is_string() || !error_code_from_string(c.get<std::string>())) fail(child(p, "error_code"), "unknown error code");
            o.error_code = error_code_from_string(c.get<std::string>());
        }
        const std::string rp = child(p, "registration");
        const Json& reg = require(s, p, "registration");
        require_object(reg, rp);
        o.result.theta = sim3_from_json(require(reg, rp, "theta"), child(rp, "theta"), ignored);
        const std::string lp = child(rp, "final_losses");
        const Json& l = require(reg, rp, "final_losses");
        require_object(l, lp);
        o.result.final_losses.mw2 = number(require(l, lp, "mw2"), child(lp, "mw2"));
        o.result.final_losses.photo = number(require(l, lp, "photo"), child(lp, "photo"));
        o.result.final_losses.depth = number(require(l, lp, "depth"), child(lp, "depth"));
        o.result.final_losses.total = number(require(l, lp, "total"), child(lp, "total"));
        o.result.final_losses.depth_empty = require(l, lp, "depth_empty").get<bool>();
        o.result.converged = require(reg, rp, "converged").get<bool>();
        o.result.steps_used = require(reg, rp, "steps_used").get<int>();
        r.submaps.push_back(std::move(o));
    }

    auto poses = [&](const char* key, std::vector<TrajectoryPose>& out) {
        const std::string p = child("", key);
        const Json& a = require(j, "", key);
        require_array(a, p);
        for (std::size_t i = 0; i < a.size(); ++i) {
            const std::string pp = child(p, i);
            require_object(a[i], pp);
            TrajectoryPose t;
            t.position = vector<3>(require(a[i], pp, "position"), child(pp, "position"));
            const auto q = vector<4>(require(a[i], pp, "orientation"), child(pp, "orientation"));
            t.orientation = Quaternion{q[0], q[1], q[2], q[3]};
            out.push_back(t);
        }
    };
    poses("trajectory_estimated", r.trajectory_estimated);
    poses("trajectory_ground_truth", r.trajectory_ground_truth);
    const Json& valid = require(j, "", "trajectory_valid");
    require_array(valid, "/trajectory_valid");
    for (std::size_t i = 0; i < valid.size(); ++i) {
        if (!valid[i].is_boolean()) fail(child("/trajectory_valid", i), "expected a boolean");
        r.trajectory_valid.push_back(valid[i].get<bool>());
    }
    const Json& ate = require(j, "", "ate_rmse");
    if (!ate.is_null()) r.ate_rmse = number(ate, "/ate_rmse");
    return r;
}

}  // namespace detail

/// Reads back what report_to_json writes, except per-step histories and
/// the merged map.
inline PipelineReport report_from_json(const Json& j) {
    try {
        return detail::report_from_json_unchecked(j);
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::SchemaError, e.what());
    }
}

inline std::string format_losses_csv(const PipelineReport& report) {
    std::ostringstream out;
    out << std::setprecision(17) << "submap,step,mw2,photo,depth,total\n";
    for (const auto& s : report.submaps) {
        for (const auto& h : s.result.history) {
            out << s.index << ',' << h.step << ',' << h.mw2 << ',' << h.photo << ',' << h.depth << ',' << h.total << '\n';
        }
    }
    return out.str();
}

/// Writes report.json, the TUM trajectories and losses.csv into `dir`.
inline void write_report(const PipelineReport& report, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create '" + dir.string() + "': " + ec.message());
    write_text_file(dir / "report.json", report_to_json(report).dump(2) + "\n");

    std::vector<TimedPose> est, gt;
    for (std::size_t i = 0; i < report.trajectory_estimated.size(); ++i) {
        const bool valid = i >= report.trajectory_valid.size() || report.trajectory_valid[i];
        if (valid) est.push_back({static_cast<double>(i), report.trajectory_estimated[i]});
    }
    for (std::size_t i = 0; i < report.trajectory_ground_truth.size(); ++i) {
        gt.push_back({static_cast<double>(i), report.trajectory_ground_truth[i]});
    }
    write_text_file(dir / "trajectory_est.txt", format_tum(est));
    if (!gt.empty()) write_text_file(dir / "trajectory_gt.txt", format_tum(gt));
    write_text_file(dir / "losses.csv", format_losses_csv(report));
}

}  // namespace splatreg
