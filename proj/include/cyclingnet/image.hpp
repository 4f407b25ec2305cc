#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cyclingnet/errors.hpp"

namespace cyclingnet {

/// Raster image, row-major height x width x channels, intensities in [0, 1].
/// One channel for grayscale frames, three for color.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
};

namespace detail {

inline int next_pnm_token(std::istream& in, std::string& tok) {
    tok.clear();
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return 1;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok.empty() ? 0 : 1;
}

}  // namespace detail

/// Reads a binary netpbm image (P5 grayscale or P6 color, 8-bit).
inline Image read_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image: " + path.string());
    std::string magic, tok;
    if (!detail::next_pnm_token(in, magic) || (magic != "P5" && magic != "P6"))
        throw DataError("unsupported image format (want binary P5/P6): " + path.string());
    const int channels = magic == "P6" ? 3 : 1;
    long vals[3];
    for (long& v : vals) {
        if (!detail::next_pnm_token(in, tok)) throw DataError("truncated header: " + path.string());
        try {
            v = std::stol(tok);
        } catch (const std::exception&) {
            throw DataError("bad header token '" + tok + "' in " + path.string());
        }
    }
    const long w = vals[0], h = vals[1], maxval = vals[2];
    if (w <= 0 || h <= 0) throw DataError("bad image extents in " + path.string());
    if (maxval <= 0 || maxval > 255)
        throw DataError("only 8-bit images supported: " + path.string());
    Image img(static_cast<int>(h), static_cast<int>(w), channels);
    std::vector<unsigned char> raw(img.size());
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw DataError("truncated pixel data: " + path.string());
    const float scale = 1.0f / static_cast<float>(maxval);
    for (std::size_t i = 0; i < raw.size(); ++i) img.data[i] = raw[i] * scale;
    return img;
}

/// Writes a binary netpbm image (P5 for one channel, P6 for three), 8-bit.
inline void write_image(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3)
        throw DataError("write_image: only 1- or 3-channel images supported");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image: " + path.string());
    out << (img.channels == 3 ? "P6" : "P5") << '\n'
        << img.width << ' ' << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const float v = std::clamp(img.data[i], 0.0f, 1.0f);
        raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw DataError("short write: " + path.string());
}

/// Bilinear resample to out_h x out_w (half-pixel-centered sampling).
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
    if (src.empty()) throw std::invalid_argument("resize_bilinear: empty image");
    if (src.height == out_h && src.width == out_w) return src;
    Image dst(out_h, out_w, src.channels);
    const float sy = static_cast<float>(src.height) / out_h;
    const float sx = static_cast<float>(src.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        float fy = (y + 0.5f) * sy - 0.5f;
        fy = std::clamp(fy, 0.0f, static_cast<float>(src.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const float wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            float fx = (x + 0.5f) * sx - 0.5f;
            fx = std::clamp(fx, 0.0f, static_cast<float>(src.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const float wx = fx - x0;
            for (int c = 0; c < src.channels; ++c) {
                const float top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
                const float bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
                dst.at(y, x, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return dst;
}

/// Luma conversion (0.299 R + 0.587 G + 0.114 B); grayscale passes through.
inline Image to_gray(const Image& src) {
    if (src.channels == 1) return src;
    if (src.channels != 3) throw std::invalid_argument("to_gray: expected 1 or 3 channels");
    Image dst(src.height, src.width, 1);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x)
            dst.at(y, x, 0) = 0.299f * src.at(y, x, 0) + 0.587f * src.at(y, x, 1) +
                              0.114f * src.at(y, x, 2);
    return dst;
}

}  // namespace cyclingnet
