#pragma once

// Portable float maps (PFM): "PF" for RGB, "Pf" for one channel, float32
// little-endian, rows stored bottom to top.

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "splatreg/io/ply.hpp"
#include "splatreg/render.hpp"

namespace splatreg {

struct FloatImage {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<float> data;  // row-major, top row first, interleaved channels

    float at(int x, int y, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

inline std::string format_pfm(const FloatImage& img) {
    if (img.channels != 1 && img.channels != 3) throw Error(ErrorCode::InvalidArgument, "PFM needs 1 or 3 channels");
    if (img.width <= 0 || img.height <= 0 ||
        img.data.size() != static_cast<std::size_t>(img.width) * img.height * img.channels) {
        throw Error(ErrorCode::DimensionMismatch, "image size does not match its data");
    }
    static_assert(std::endian::native == std::endian::little, "PFM writing assumes a little-endian host");
    std::string out = std::string(img.channels == 3 ? "PF" : "Pf") + "\n" + std::to_string(img.width) + " " +
                      std::to_string(img.height) + "\n-1.0\n";
    const std::size_t row = static_cast<std::size_t>(img.width) * img.channels;
    for (int y = img.height - 1; y >= 0; --y) {
        out.append(reinterpret_cast<const char*>(img.data.data() + static_cast<std::size_t>(y) * row), row * sizeof(float));
    }
    return out;
}

inline FloatImage parse_pfm(const std::string& bytes) {
    auto fail = [](const std::string& what) -> FloatImage { throw Error(ErrorCode::ParseError, "PFM: " + what); };
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        return bytes.substr(start, pos - start);
    };
    FloatImage img;
    const std::string magic = token();
    if (magic == "PF") img.channels = 3;
    else if (magic == "Pf") img.channels = 1;
    else return fail("bad magic");
    double w = 0, h = 0, scale = 0;
    if (!detail::ply::parse_double(token(), w) || !detail::ply::parse_double(token(), h) ||
        !detail::ply::parse_double(token(), scale)) {
        return fail("bad header");
    }
    if (!(w >= 1 && h >= 1 && w <= 1 << 16 && h <= 1 << 16) || w != std::floor(w) || h != std::floor(h)) {
        return fail("bad dimensions");
    }
    if (!(scale < 0.0)) return fail("only little-endian PFM is supported");
    ++pos;  // the single whitespace byte ending the header
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    const std::size_t count = static_cast<std::size_t>(img.width) * img.height * img.channels;
    if (pos > bytes.size() || bytes.size() - pos < count * sizeof(float)) return fail("truncated data");
    img.data.resize(count);
    const std::size_t row = static_cast<std::size_t>(img.width) * img.channels;
    for (int y = img.height - 1, r = 0; y >= 0; --y, ++r) {
        std::memcpy(img.data.data() + static_cast<std::size_t>(y) * row, bytes.data() + pos + r * row * sizeof(float),
                    row * sizeof(float));
    }
    return img;
}

inline FloatImage read_pfm(const std::filesystem::path& path) {
    try {
        return parse_pfm(read_file_bytes(path));
    } catch (const Error& e) {
        if (e.code() != ErrorCode::ParseError) throw;
        throw Error(ErrorCode::ParseError, path.string() + ": " + std::string(e.what()).substr(12));
    }
}

inline void write_pfm(const FloatImage& img, const std::filesystem::path& path) {
    const std::string bytes = format_pfm(img);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot create '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path.string() + "'");
}

inline FloatImage rgb_image(const RenderOutput& r) {
    FloatImage img{r.width, r.height, 3, {}};
    img.data.assign(r.rgb.begin(), r.rgb.end());
    return img;
}

inline FloatImage depth_image(const RenderOutput& r) {
    FloatImage img{r.width, r.height, 1, {}};
    img.data.assign(r.depth.begin(), r.depth.end());
    return img;
}

inline FloatImage alpha_image(const RenderOutput& r) {
    FloatImage img{r.width, r.height, 1, {}};
    img.data.assign(r.alpha.begin(), r.alpha.end());
    return img;
}

}  // namespace splatreg
