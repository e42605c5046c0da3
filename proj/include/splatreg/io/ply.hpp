#pragma once

// 3D Gaussian Splatting PLY files: ASCII or binary little-endian vertex
// elements with the usual property names (x y z, f_dc_*, opacity, scale_*,
// rot_*). Other elements and properties are skipped.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "splatreg/core.hpp"
#include "splatreg/eigen3x3.hpp"

namespace splatreg {

inline constexpr double kShC0 = 0.28209479177387814;

struct PlyReadResult {
    GaussianMixture mixture;
    std::size_t records = 0;
    std::size_t rejected_records = 0;         // NaN/Inf or zero quaternion
    std::size_t skipped_sh_properties = 0;    // f_rest_*
    std::vector<std::string> warnings;
};

namespace detail::ply {

enum class Format { ascii, binary_le, binary_be };

enum class Scalar { i8, u8, i16, u16, i32, u32, f32, f64 };

inline bool parse_scalar(std::string_view s, Scalar& out) {
    if (s == "char" || s == "int8") out = Scalar::i8;
    else if (s == "uchar" || s == "uint8") out = Scalar::u8;
    else if (s == "short" || s == "int16") out = Scalar::i16;
    else if (s == "ushort" || s == "uint16") out = Scalar::u16;
    else if (s == "int" || s == "int32") out = Scalar::i32;
    else if (s == "uint" || s == "uint32") out = Scalar::u32;
    else if (s == "float" || s == "float32") out = Scalar::f32;
    else if (s == "double" || s == "float64") out = Scalar::f64;
    else return false;
    return true;
}

inline std::size_t scalar_size(Scalar t) {
    switch (t) {
        case Scalar::i8: case Scalar::u8: return 1;
        case Scalar::i16: case Scalar::u16: return 2;
        case Scalar::i32: case Scalar::u32: case Scalar::f32: return 4;
        case Scalar::f64: return 8;
    }
    return 0;
}

struct Property {
    std::string name;
    Scalar type = Scalar::f32;
    bool is_list = false;
    Scalar count_type = Scalar::u8;
};

struct Element {
    std::string name;
    std::uint64_t count = 0;
    std::vector<Property> properties;

    bool fixed_size() const {
        return std::none_of(properties.begin(), properties.end(), [](const Property& p) { return p.is_list; });
    }
    std::size_t record_size() const {
        std::size_t n = 0;
        for (const auto& p : properties) n += scalar_size(p.type);
        return n;
    }
};

struct Header {
    Format format = Format::ascii;
    std::vector<Element> elements;
    std::size_t data_offset = 0;  // byte offset of the body
    int body_line = 0;            // 1-based line number of the first body line
};

[[noreturn]] inline void fail(const std::string& where, const std::string& what) {
    throw Error(ErrorCode::ParseError, where + ": " + what);
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        const std::size_t j = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
        if (i > j) out.push_back(line.substr(j, i - j));
    }
    return out;
}

inline bool parse_u64(std::string_view s, std::uint64_t& out) {
    if (s.empty() || s.size() > 19) return false;
    std::uint64_t v = 0;
    for (char c : s) {
        if (c < '0' || c > '9') return false;
        v = v * 10 + static_cast<std::uint64_t>(c - '0');
    }
    out = v;
    return true;
}

inline Header parse_header(const std::string& bytes) {
    Header h;
    std::size_t pos = 0;
    int line_no = 0;
    bool saw_format = false;
    auto next_line = [&](std::string_view& line) {
        if (pos >= bytes.size()) return false;
        std::size_t end = bytes.find('\n', pos);
        if (end == std::string::npos) end = bytes.size();
        line = std::string_view(bytes).substr(pos, end - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        pos = end + 1;
        ++line_no;
        return true;
    };
    std::string_view line;
    if (!next_line(line) || line != "ply") fail("line 1", "missing 'ply' magic");
    while (true) {
        if (line_no > 10000 || !next_line(line)) fail("header", "missing end_header");
        const std::string where = "line " + std::to_string(line_no);
        const auto tok = split_ws(line);
        if (tok.empty()) continue;
        if (tok[0] == "end_header") break;
        if (tok[0] == "comment" || tok[0] == "obj_info") continue;
        if (tok[0] == "format") {
            if (tok.size() != 3) fail(where, "malformed format line");
            if (tok[1] == "ascii") h.format = Format::ascii;
            else if (tok[1] == "binary_little_endian") h.format = Format::binary_le;
            else if (tok[1] == "binary_big_endian") h.format = Format::binary_be;
            else fail(where, "unknown format '" + std::string(tok[1]) + "'");
            saw_format = true;
        } else if (tok[0] == "element") {
            Element e;
            if (tok.size() != 3 || !parse_u64(tok[2], e.count)) fail(where, "malformed element line");
            e.name = std::string(tok[1]);
            h.elements.push_back(std::move(e));
        } else if (tok[0] == "property") {
            if (h.elements.empty()) fail(where, "property before any element");
            Property p;
            if (tok.size() == 3) {
                if (!parse_scalar(tok[1], p.type)) fail(where, "unknown property type '" + std::string(tok[1]) + "'");
                p.name = std::string(tok[2]);
            } else if (tok.size() == 5 && tok[1] == "list") {
                p.is_list = true;
                if (!parse_scalar(tok[2], p.count_type) || !parse_scalar(tok[3], p.type)) {
                    fail(where, "unknown list property type");
                }
                if (p.count_type == Scalar::f32 || p.count_type == Scalar::f64) fail(where, "list count must be integral");
                p.name = std::string(tok[4]);
            } else {
                fail(where, "malformed property line");
            }
            h.elements.back().properties.push_back(std::move(p));
        } else {
            fail(where, "unknown header keyword '" + std::string(tok[0]) + "'");
        }
    }
    if (!saw_format) fail("header", "missing format line");
    h.data_offset = pos;
    h.body_line = line_no + 1;
    return h;
}

/// Sequential reader over the body; every accessor checks bounds.
class BinaryCursor {
public:
    BinaryCursor(const std::string& bytes, std::size_t offset) : bytes_(bytes), pos_(offset) {}

    std::size_t remaining() const { return bytes_.size() - pos_; }

    double read(Scalar t, std::uint64_t record) {
        const std::size_t n = scalar_size(t);
        if (remaining() < n) fail("record " + std::to_string(record), "unexpected end of file");
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        switch (t) {
            case Scalar::i8: return static_cast<double>(load<std::int8_t>(p));
            case Scalar::u8: return static_cast<double>(load<std::uint8_t>(p));
            case Scalar::i16: return static_cast<double>(load<std::int16_t>(p));
            case Scalar::u16: return static_cast<double>(load<std::uint16_t>(p));
            case Scalar::i32: return static_cast<double>(load<std::int32_t>(p));
            case Scalar::u32: return static_cast<double>(load<std::uint32_t>(p));
            case Scalar::f32: return static_cast<double>(load<float>(p));
            case Scalar::f64: return load<double>(p);
        }
        return 0.0;
    }

    void skip(std::size_t n, std::uint64_t record) {
        if (remaining() < n) fail("record " + std::to_string(record), "unexpected end of file");
        pos_ += n;
    }

private:
    template <class T>
    static T load(const char* p) {
        static_assert(std::endian::native == std::endian::little, "binary PLY reading assumes a little-endian host");
        T v;
        std::memcpy(&v, p, sizeof(T));
        return v;
    }

    const std::string& bytes_;
    std::size_t pos_;
};

inline bool parse_double(std::string_view s, double& out) {
    // strtod needs a terminated buffer; tokens are short.
    if (s.empty() || s.size() > 64) return false;
    char buf[65];
    std::memcpy(buf, s.data(), s.size());
    buf[s.size()] = '\0';
    char* end = nullptr;
    out = std::strtod(buf, &end);
    return end == buf + s.size();
}

struct Slots {
    int x = -1, y = -1, z = -1;
    int dc[3] = {-1, -1, -1};
    int opacity = -1;
    int scale[3] = {-1, -1, -1};
    int rot[4] = {-1, -1, -1, -1};
};

inline Slots locate(const Element& e, PlyReadResult& result) {
    Slots s;
    for (std::size_t i = 0; i < e.properties.size(); ++i) {
        const auto& p = e.properties[i];
        const int k = static_cast<int>(i);
        if (p.is_list) {
            throw Error(ErrorCode::UnsupportedLayout, "list property '" + p.name + "' in the vertex element");
        }
        const std::string& n = p.name;
        if (n == "x") s.x = k;
        else if (n == "y") s.y = k;
        else if (n == "z") s.z = k;
        else if (n == "opacity") s.opacity = k;
        else if (n.size() == 6 && n.starts_with("f_dc_") && n[5] >= '0' && n[5] <= '2') s.dc[n[5] - '0'] = k;
        else if (n.size() == 7 && n.starts_with("scale_") && n[6] >= '0' && n[6] <= '2') s.scale[n[6] - '0'] = k;
        else if (n.size() == 5 && n.starts_with("rot_") && n[4] >= '0' && n[4] <= '3') s.rot[n[4] - '0'] = k;
        else if (n.starts_with("f_rest_")) ++result.skipped_sh_properties;
    }
    std::vector<std::string> missing;
    auto need = [&](int slot, const char* name) {
        if (slot < 0) missing.emplace_back(name);
    };
    need(s.x, "x");
    need(s.y, "y");
    need(s.z, "z");
    for (int c = 0; c < 3; ++c) need(s.dc[c], c == 0 ? "f_dc_0" : c == 1 ? "f_dc_1" : "f_dc_2");
    need(s.opacity, "opacity");
    for (int c = 0; c < 3; ++c) need(s.scale[c], c == 0 ? "scale_0" : c == 1 ? "scale_1" : "scale_2");
    const char* rot_names[4] = {"rot_0", "rot_1", "rot_2", "rot_3"};
    for (int c = 0; c < 4; ++c) need(s.rot[c], rot_names[c]);
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw Error(ErrorCode::UnsupportedLayout, "vertex element is missing properties: " + list);
    }
    return s;
}

/// Builds a component from one record; false when the record is unusable.
inline bool to_component(const std::vector<double>& v, const Slots& s, GaussianComponent& g) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    const Quaternion q{v[s.rot[0]], v[s.rot[1]], v[s.rot[2]], v[s.rot[3]]};
    const double qn = q.norm();
    if (!(qn > 0.0) || !std::isfinite(qn)) return false;
    const Vec3 log_scale(v[s.scale[0]], v[s.scale[1]], v[s.scale[2]]);
    if ((log_scale.array() > 300.0).any()) return false;
    g.mean = Vec3(v[s.x], v[s.y], v[s.z]);
    g.covariance = covariance_from_splat_params(log_scale, q.normalized()) + kCovarianceRegularization * Mat3::Identity();
    g.opacity = 1.0 / (1.0 + std::exp(-v[s.opacity]));
    for (int c = 0; c < 3; ++c) g.color[c] = std::clamp(0.5 + kShC0 * v[s.dc[c]], 0.0, 1.0);
    g.weight = 0.0;
    return g.is_finite();
}

inline void skip_element_binary(BinaryCursor& cur, const Element& e) {
    if (e.fixed_size()) {
        const std::size_t rs = e.record_size();
        if (rs > 0 && e.count > cur.remaining() / rs) fail("element '" + e.name + "'", "unexpected end of file");
        cur.skip(static_cast<std::size_t>(e.count) * rs, 0);
        return;
    }
    for (std::uint64_t r = 0; r < e.count; ++r) {
        for (const auto& p : e.properties) {
            if (p.is_list) {
                const double n = cur.read(p.count_type, r);
                if (n < 0.0) fail("element '" + e.name + "'", "negative list length");
                const auto bytes = static_cast<std::uint64_t>(n) * scalar_size(p.type);
                if (bytes > cur.remaining()) fail("element '" + e.name + "'", "unexpected end of file");
                cur.skip(static_cast<std::size_t>(bytes), r);
            } else {
                cur.skip(scalar_size(p.type), r);
            }
        }
    }
}

}  // namespace detail::ply

/// Parses PLY bytes already in memory. Records with non-finite values are
/// dropped and counted; at least one usable record must remain.
inline PlyReadResult parse_splat_ply(const std::string& bytes) {
    using namespace detail::ply;
    const Header h = parse_header(bytes);
    if (h.format == Format::binary_be) {
        throw Error(ErrorCode::UnsupportedLayout, "binary_big_endian PLY is not supported");
    }
    std::size_t vertex_index = h.elements.size();
    for (std::size_t i = 0; i < h.elements.size(); ++i)
        if (h.elements[i].name == "vertex") {
            vertex_index = i;
            break;
        }
    if (vertex_index == h.elements.size()) throw Error(ErrorCode::UnsupportedLayout, "no vertex element");

    PlyReadResult result;
    const Element& ve = h.elements[vertex_index];
    const Slots slots = locate(ve, result);
    const std::size_t nprop = ve.properties.size();
    std::vector<double> values(nprop);

    auto accept = [&]() {
        GaussianComponent g;
        if (to_component(values, slots, g)) result.mixture.components.push_back(g);
        else ++result.rejected_records;
    };

    if (h.format == Format::binary_le) {
        BinaryCursor cur(bytes, h.data_offset);
        for (std::size_t i = 0; i < vertex_index; ++i) skip_element_binary(cur, h.elements[i]);
        const std::size_t rs = ve.record_size();
        if (rs == 0 || ve.count > cur.remaining() / rs) {
            fail("vertex element", "file holds fewer bytes than " + std::to_string(ve.count) + " records need");
        }
        result.mixture.components.reserve(static_cast<std::size_t>(ve.count));
        for (std::uint64_t r = 0; r < ve.count; ++r) {
            for (std::size_t k = 0; k < nprop; ++k) values[k] = cur.read(ve.properties[k].type, r);
            accept();
        }
    } else {
        std::size_t pos = h.data_offset;
        int line_no = h.body_line - 1;
        auto next_tokens = [&](std::vector<std::string_view>& tok) {
            while (pos < bytes.size()) {
                std::size_t end = bytes.find('\n', pos);
                if (end == std::string::npos) end = bytes.size();
                const std::string_view line = std::string_view(bytes).substr(pos, end - pos);
                pos = end + 1;
                ++line_no;
                tok = split_ws(line);
                if (!tok.empty()) return true;
            }
            return false;
        };
        std::vector<std::string_view> tok;
        for (std::size_t i = 0; i < vertex_index; ++i)
            for (std::uint64_t r = 0; r < h.elements[i].count; ++r)
                if (!next_tokens(tok)) fail("line " + std::to_string(line_no), "unexpected end of file");
        for (std::uint64_t r = 0; r < ve.count; ++r) {
            const std::string where = "line " + std::to_string(line_no + 1) + " (record " + std::to_string(r) + ")";
            if (!next_tokens(tok)) fail(where, "unexpected end of file");
            if (tok.size() != nprop) {
                fail(where, "expected " + std::to_string(nprop) + " values, found " + std::to_string(tok.size()));
            }
            for (std::size_t k = 0; k < nprop; ++k)
                if (!parse_double(tok[k], values[k])) fail(where, "bad number '" + std::string(tok[k]) + "'");
            accept();
        }
    }
    result.records = static_cast<std::size_t>(ve.count);
    if (result.skipped_sh_properties > 0) {
        result.warnings.push_back("skipped " + std::to_string(result.skipped_sh_properties) +
                                  " higher-order SH properties (f_rest_*)");
    }
    if (result.rejected_records > 0) {
        result.warnings.push_back("rejected " + std::to_string(result.rejected_records) +
                                  " records with non-finite or degenerate values");
    }
    if (result.mixture.empty()) throw Error(ErrorCode::EmptyMixture, "PLY holds no usable splat records");
    result.mixture = normalize_weights(std::move(result.mixture));
    return result;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw Error(ErrorCode::IoError, "cannot read '" + path.string() + "'");
    return std::move(ss).str();
}

inline PlyReadResult read_splat_ply_detailed(const std::filesystem::path& path) {
    try {
        return parse_splat_ply(read_file_bytes(path));
    } catch (const Error& e) {
        if (e.code() == ErrorCode::IoError) throw;
        throw Error(e.code(), path.string() + ": " + std::string(e.what()).substr(to_string(e.code()).size() + 2));
    }
}

inline GaussianMixture read_splat_ply(const std::filesystem::path& path) {
    return read_splat_ply_detailed(path).mixture;
}

namespace detail::ply {

/// Splat parameters of a covariance with the read-side regularization
/// removed. Eigenvector signs: largest-magnitude entry positive, then the
/// smallest-eigenvalue axis flips if needed to make a proper rotation.
inline void splat_params(const Mat3& covariance, Vec3& log_scale, Quaternion& q) {
    const auto eig = symmetric_eigen3(0.5 * (covariance + covariance.transpose()));
    if (!(eig.values[0] > 0.0)) throw Error(ErrorCode::NotPositiveDefinite, "covariance is not positive definite");
    Mat3 v = eig.vectors;
    for (int j = 0; j < 3; ++j) {
        Eigen::Index arg = 0;
        v.col(j).cwiseAbs().maxCoeff(&arg);
        if (v(arg, j) < 0.0) v.col(j) = -v.col(j);
    }
    if (v.determinant() < 0.0) v.col(0) = -v.col(0);
    for (int j = 0; j < 3; ++j) {
        const double stored = eig.values[j] - kCovarianceRegularization;
        const double floor = 1e-3 * kCovarianceRegularization;
        log_scale[j] = 0.5 * std::log(std::max(stored, floor));
    }
    q = rotation_to_quat(v);
}

}  // namespace detail::ply

/// Serializes a mixture as binary little-endian PLY (float32 properties).
inline std::string format_splat_ply(const GaussianMixture& mixture) {
    if (mixture.empty()) throw Error(ErrorCode::EmptyMixture, "cannot write an empty mixture");
    std::string out;
    out += "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(mixture.size()) + "\n";
    for (const char* name : {"x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
                             "rot_0", "rot_1", "rot_2", "rot_3"}) {
        out += "property float ";
        out += name;
        out += '\n';
    }
    out += "end_header\n";
    out.reserve(out.size() + mixture.size() * 14 * sizeof(float));
    for (const auto& g : mixture.components) {
        if (!g.is_finite()) throw Error(ErrorCode::InvalidArgument, "mixture holds non-finite values");
        Vec3 log_scale;
        Quaternion q;
        detail::ply::splat_params(g.covariance, log_scale, q);
        const double op = std::clamp(g.opacity, 1e-6, 1.0 - 1e-6);
        const float rec[14] = {
            static_cast<float>(g.mean.x()), static_cast<float>(g.mean.y()), static_cast<float>(g.mean.z()),
            static_cast<float>((g.color.x() - 0.5) / kShC0), static_cast<float>((g.color.y() - 0.5) / kShC0),
            static_cast<float>((g.color.z() - 0.5) / kShC0), static_cast<float>(std::log(op / (1.0 - op))),
            static_cast<float>(log_scale.x()), static_cast<float>(log_scale.y()), static_cast<float>(log_scale.z()),
            static_cast<float>(q.w), static_cast<float>(q.x), static_cast<float>(q.y), static_cast<float>(q.z)};
        static_assert(std::endian::native == std::endian::little, "binary PLY writing assumes a little-endian host");
        out.append(reinterpret_cast<const char*>(rec), sizeof rec);
    }
    return out;
}

inline void write_splat_ply(const GaussianMixture& mixture, const std::filesystem::path& path) {
    const std::string bytes = format_splat_ply(mixture);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot create '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path.string() + "'");
}

}  // namespace splatreg
