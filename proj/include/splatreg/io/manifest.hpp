#pragma once

// Scene manifests (JSON, schema_version 1):
//
//   {
//     "schema_version": 1,
//     "scene_extent": 4.2,                      optional, > 0
//     "submaps": [
//       {
//         "ply": "submap_00.ply",               relative to the manifest
//         "cameras": [                          optional, local frame
//           {"fx": 64, "fy": 64, "cx": 32, "cy": 24, "width": 64, "height": 48,
//            "rotation": [[1,0,0],[0,1,0],[0,0,1]],   world -> camera
//            "translation": [0,0,3]}
//         ],
//         "ground_truth": {                     optional, local -> world
//           "rotation": [1,0,0,0], "translation": [0,0,0], "scale": 1}
//       }
//     ]
//   }
//
// Without "scene_extent" the largest bounding-box side of submap 0 is used.
// Unknown keys produce warnings, not errors.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "splatreg/io/ply.hpp"
#include "splatreg/pipeline.hpp"

namespace splatreg {

inline constexpr int kManifestSchemaVersion = 1;

using Json = nlohmann::json;

namespace detail::json_schema {

[[noreturn]] inline void fail(const std::string& pointer, const std::string& what) {
    throw Error(ErrorCode::SchemaError, (pointer.empty() ? std::string("/") : pointer) + ": " + what);
}

inline std::string child(const std::string& pointer, const std::string& key) {
    std::string escaped;
    for (char c : key) {
        if (c == '~') escaped += "~0";
        else if (c == '/') escaped += "~1";
        else escaped += c;
    }
    return pointer + "/" + escaped;
}

inline std::string child(const std::string& pointer, std::size_t index) { return pointer + "/" + std::to_string(index); }

inline const Json& require(const Json& obj, const std::string& pointer, const std::string& key) {
    if (!obj.contains(key)) fail(child(pointer, key), "required field is missing");
    return obj.at(key);
}

inline void require_object(const Json& j, const std::string& pointer) {
    if (!j.is_object()) fail(pointer, "expected an object");
}

inline void require_array(const Json& j, const std::string& pointer) {
    if (!j.is_array()) fail(pointer, "expected an array");
}

inline double number(const Json& j, const std::string& pointer) {
    if (!j.is_number()) fail(pointer, "expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) fail(pointer, "expected a finite number");
    return v;
}

inline double positive(const Json& j, const std::string& pointer) {
    const double v = number(j, pointer);
    if (!(v > 0.0)) fail(pointer, "expected a positive number");
    return v;
}

inline int positive_int(const Json& j, const std::string& pointer) {
    if (!j.is_number_integer()) fail(pointer, "expected an integer");
    const auto v = j.get<std::int64_t>();
    if (v <= 0 || v > 1 << 20) fail(pointer, "expected an integer in [1, 2^20]");
    return static_cast<int>(v);
}

template <int N>
Eigen::Matrix<double, N, 1> vector(const Json& j, const std::string& pointer) {
    require_array(j, pointer);
    if (j.size() != N) fail(pointer, "expected " + std::to_string(N) + " numbers");
    Eigen::Matrix<double, N, 1> v;
    for (int i = 0; i < N; ++i) v[i] = number(j[static_cast<std::size_t>(i)], child(pointer, static_cast<std::size_t>(i)));
    return v;
}

inline void warn_unknown(const Json& obj, const std::string& pointer, std::initializer_list<const char*> known,
                         std::vector<std::string>& warnings) {
    const std::set<std::string> k(known.begin(), known.end());
    for (const auto& [key, _] : obj.items())
        if (!k.contains(key)) warnings.push_back(child(pointer, key) + ": unknown field ignored");
}

}  // namespace detail::json_schema

inline Camera camera_from_json(const Json& j, const std::string& pointer, std::vector<std::string>& warnings) {
    using namespace detail::json_schema;
    require_object(j, pointer);
    warn_unknown(j, pointer, {"fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"}, warnings);
    Camera c;
    c.intrinsics.fx = positive(require(j, pointer, "fx"), child(pointer, "fx"));
    c.intrinsics.fy = positive(require(j, pointer, "fy"), child(pointer, "fy"));
    c.intrinsics.cx = number(require(j, pointer, "cx"), child(pointer, "cx"));
    c.intrinsics.cy = number(require(j, pointer, "cy"), child(pointer, "cy"));
    c.intrinsics.width = positive_int(require(j, pointer, "width"), child(pointer, "width"));
    c.intrinsics.height = positive_int(require(j, pointer, "height"), child(pointer, "height"));
    if (j.contains("rotation")) {
        const std::string rp = child(pointer, "rotation");
        const Json& r = j.at("rotation");
        require_array(r, rp);
        if (r.size() != 3) fail(rp, "expected 3 rows");
        for (std::size_t i = 0; i < 3; ++i) c.rotation.row(static_cast<Eigen::Index>(i)) = vector<3>(r[i], child(rp, i)).transpose();
        if ((c.rotation.transpose() * c.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
            c.rotation.determinant() < 0.0) {
            fail(rp, "not a rotation matrix");
        }
        // Re-orthonormalize text-rounded input.
        const Eigen::JacobiSVD<Mat3> svd(c.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
        c.rotation = svd.matrixU() * svd.matrixV().transpose();
    }
    if (j.contains("translation")) c.translation = vector<3>(j.at("translation"), child(pointer, "translation"));
    return c;
}

inline Json camera_to_json(const Camera& c) {
    Json rot = Json::array();
    for (int i = 0; i < 3; ++i) rot.push_back({c.rotation(i, 0), c.rotation(i, 1), c.rotation(i, 2)});
    return {{"fx", c.intrinsics.fx},         {"fy", c.intrinsics.fy},       {"cx", c.intrinsics.cx},
            {"cy", c.intrinsics.cy},         {"width", c.intrinsics.width}, {"height", c.intrinsics.height},
            {"rotation", rot},               {"translation", {c.translation.x(), c.translation.y(), c.translation.z()}}};
}

/// Accepts either a bare array of cameras or {"cameras": [...]}.
inline std::vector<Camera> cameras_from_json(const Json& j, std::vector<std::string>& warnings) {
    using namespace detail::json_schema;
    const Json* list = &j;
    std::string pointer;
    if (j.is_object()) {
        warn_unknown(j, "", {"cameras"}, warnings);
        list = &require(j, "", "cameras");
        pointer = "/cameras";
    }
    require_array(*list, pointer);
    std::vector<Camera> out;
    for (std::size_t i = 0; i < list->size(); ++i) out.push_back(camera_from_json((*list)[i], child(pointer, i), warnings));
    return out;
}

inline Json sim3_to_json(const Sim3Params& t) {
    return {{"rotation", {t.q.w, t.q.x, t.q.y, t.q.z}}, {"translation", {t.t.x(), t.t.y(), t.t.z()}}, {"scale", t.scale()}};
}

inline Sim3Params sim3_from_json(const Json& j, const std::string& pointer, std::vector<std::string>& warnings) {
    using namespace detail::json_schema;
    require_object(j, pointer);
    warn_unknown(j, pointer, {"rotation", "translation", "scale"}, warnings);
    Sim3Params t;
    const auto q = vector<4>(require(j, pointer, "rotation"), child(pointer, "rotation"));
    if (!(q.norm() > 1e-12)) fail(child(pointer, "rotation"), "quaternion has zero norm");
    t.q = Quaternion{q[0], q[1], q[2], q[3]}.normalized();
    t.t = vector<3>(require(j, pointer, "translation"), child(pointer, "translation"));
    t.log_s = std::log(positive(require(j, pointer, "scale"), child(pointer, "scale")));
    return t;
}

struct ManifestLoadResult {
    SceneManifest manifest;
    std::vector<std::string> warnings;
};

inline Json parse_json_text(const std::string& text, const std::string& source) {
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::ParseError, source + ": " + e.what());
    }
}

/// Validates a manifest document. PLY paths are resolved against `base`
/// and loaded unless `load_plys` is false.
inline ManifestLoadResult manifest_from_json(const Json& j, const std::filesystem::path& base, bool load_plys = true) {
    using namespace detail::json_schema;
    ManifestLoadResult r;
    require_object(j, "");
    warn_unknown(j, "", {"schema_version", "scene_extent", "submaps"}, r.warnings);
    const Json& ver = require(j, "", "schema_version");
    if (!ver.is_number_integer() || ver.get<std::int64_t>() != kManifestSchemaVersion) {
        fail("/schema_version", "unsupported schema version (expected " + std::to_string(kManifestSchemaVersion) + ")");
    }
    const Json& subs = require(j, "", "submaps");
    require_array(subs, "/submaps");
    if (subs.empty()) fail("/submaps", "expected at least one submap");
    for (std::size_t i = 0; i < subs.size(); ++i) {
        const std::string p = child("/submaps", i);
        const Json& s = subs[i];
        require_object(s, p);
        warn_unknown(s, p, {"ply", "cameras", "ground_truth"}, r.warnings);
        SubmapEntry e;
        const Json& ply = require(s, p, "ply");
        if (!ply.is_string() || ply.get<std::string>().empty()) fail(child(p, "ply"), "expected a non-empty path string");
        std::filesystem::path path = ply.get<std::string>();
        if (path.is_relative()) path = base / path;
        e.ply = path.string();
        if (s.contains("cameras")) {
            const std::string cp = child(p, "cameras");
            require_array(s.at("cameras"), cp);
            for (std::size_t c = 0; c < s.at("cameras").size(); ++c) {
                e.cameras.push_back(camera_from_json(s.at("cameras")[c], child(cp, c), r.warnings));
            }
        }
        if (s.contains("ground_truth")) e.ground_truth = sim3_from_json(s.at("ground_truth"), child(p, "ground_truth"), r.warnings);
        if (load_plys) {
            auto ply_result = read_splat_ply_detailed(path);
            for (auto& w : ply_result.warnings) r.warnings.push_back(e.ply + ": " + w);
            e.mixture = std::move(ply_result.mixture);
        }
        r.manifest.submaps.push_back(std::move(e));
    }
    if (j.contains("scene_extent")) {
        r.manifest.scene_extent = positive(j.at("scene_extent"), "/scene_extent");
    } else if (load_plys) {
        const auto box = detail::bounds(r.manifest.submaps.front().mixture);
        const double side = (box.hi - box.lo).maxCoeff();
        r.manifest.scene_extent = side > 0.0 ? side : 1.0;
    }
    return r;
}

inline ManifestLoadResult read_manifest_detailed(const std::filesystem::path& path) {
    const Json j = parse_json_text(read_file_bytes(path), path.string());
    return manifest_from_json(j, path.parent_path());
}

inline SceneManifest read_manifest(const std::filesystem::path& path) { return read_manifest_detailed(path).manifest; }

/// Writes submap_<k>.ply files and manifest.json into `dir`; returns the
/// manifest path.
inline std::filesystem::path write_manifest(const SceneManifest& manifest, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create '" + dir.string() + "': " + ec.message());
    Json subs = Json::array();
    for (std::size_t k = 0; k < manifest.submaps.size(); ++k) {
        const auto& s = manifest.submaps[k];
        std::ostringstream name;
        name << "submap_" << std::setw(2) << std::setfill('0') << k << ".ply";
        write_splat_ply(s.mixture, dir / name.str());
        Json e = {{"ply", name.str()}};
        if (!s.cameras.empty()) {
            e["cameras"] = Json::array();
            for (const auto& c : s.cameras) e["cameras"].push_back(camera_to_json(c));
        }
        if (s.ground_truth) e["ground_truth"] = sim3_to_json(*s.ground_truth);
        subs.push_back(std::move(e));
    }
    const Json j = {{"schema_version", kManifestSchemaVersion}, {"scene_extent", manifest.scene_extent}, {"submaps", subs}};
    const auto path = dir / "manifest.json";
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoError, "cannot create '" + path.string() + "'");
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path.string() + "'");
    return path;
}

}  // namespace splatreg
