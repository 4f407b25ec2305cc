#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cyclingnet/errors.hpp"
#include "cyclingnet/image.hpp"

namespace cyclingnet {

/// Farneback tuning knobs. The defaults follow common practice for this
/// algorithm; all are configurable.
struct FlowParams {
    int pyramid_levels = 3;
    double pyramid_scale = 0.5;
    int window_size = 15;
    int iterations = 3;
    int poly_n = 5;
    double poly_sigma = 1.1;

    void validate() const {
        if (pyramid_levels < 1) throw std::invalid_argument("FlowParams: pyramid_levels must be >= 1");
        if (!(pyramid_scale > 0.0 && pyramid_scale < 1.0))
            throw std::invalid_argument("FlowParams: pyramid_scale must lie in (0, 1)");
        if (window_size < 1 || window_size % 2 == 0)
            throw std::invalid_argument("FlowParams: window_size must be odd and positive");
        if (iterations < 1) throw std::invalid_argument("FlowParams: iterations must be >= 1");
        if (poly_n < 3 || poly_n % 2 == 0)
            throw std::invalid_argument("FlowParams: poly_n must be odd and >= 3");
        if (poly_sigma <= 0.0) throw std::invalid_argument("FlowParams: poly_sigma must be positive");
    }

    /// FNV-1a over the canonical parameter string; keys flow-cache entries.
    std::uint64_t hash() const {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%d|%.6f|%d|%d|%d|%.6f", pyramid_levels, pyramid_scale,
                      window_size, iterations, poly_n, poly_sigma);
        std::uint64_t h = 1469598103934665603ull;
        for (const char* p = buf; *p; ++p) {
            h ^= static_cast<unsigned char>(*p);
            h *= 1099511628211ull;
        }
        return h;
    }
};

/// Per-pixel displacement field between two consecutive frames, in pixels
/// per frame. u is the horizontal (column) component, v the vertical (row).
struct FlowField {
    int height = 0;
    int width = 0;
    std::vector<float> u, v;

    FlowField() = default;
    FlowField(int h, int w)
        : height(h), width(w),
          u(static_cast<std::size_t>(h) * w, 0.0f),
          v(static_cast<std::size_t>(h) * w, 0.0f) {}

    std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * width + x; }
};

/// Per-pixel quadratic fit f(d) = c + b.d + d^T A d over local offsets
/// d = (dx, dy), with A = [[a11, a12], [a12, a22]] symmetric.
struct PolyCoeffs {
    int height = 0;
    int width = 0;
    std::vector<float> c, bx, by, a11, a22, a12;

    PolyCoeffs() = default;
    PolyCoeffs(int h, int w) : height(h), width(w) {
        const std::size_t n = static_cast<std::size_t>(h) * w;
        c.assign(n, 0.0f);
        bx.assign(n, 0.0f);
        by.assign(n, 0.0f);
        a11.assign(n, 0.0f);
        a22.assign(n, 0.0f);
        a12.assign(n, 0.0f);
    }

    std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * width + x; }
};

namespace detail {

inline std::vector<float> gaussian_kernel(int radius, double sigma) {
    std::vector<float> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
        k[i + radius] = static_cast<float>(v);
        sum += v;
    }
    for (float& v : k) v = static_cast<float>(v / sum);
    return k;
}

/// Separable blur of a single float plane with replicate borders.
inline void separable_blur(std::vector<float>& plane, int height, int width,
                           const std::vector<float>& kernel) {
    const int radius = static_cast<int>(kernel.size() / 2);
    std::vector<float> tmp(plane.size());
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            float acc = 0.0f;
            for (int k = -radius; k <= radius; ++k) {
                const int xx = std::clamp(x + k, 0, width - 1);
                acc += kernel[k + radius] * plane[static_cast<std::size_t>(y) * width + xx];
            }
            tmp[static_cast<std::size_t>(y) * width + x] = acc;
        }
    for (int x = 0; x < width; ++x)
        for (int y = 0; y < height; ++y) {
            float acc = 0.0f;
            for (int k = -radius; k <= radius; ++k) {
                const int yy = std::clamp(y + k, 0, height - 1);
                acc += kernel[k + radius] * tmp[static_cast<std::size_t>(yy) * width + x];
            }
            plane[static_cast<std::size_t>(y) * width + x] = acc;
        }
}

inline Image gaussian_blur(const Image& src, double sigma) {
    if (sigma <= 0.0) return src;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    const auto kernel = gaussian_kernel(radius, sigma);
    Image out = src;
    for (int c = 0; c < src.channels; ++c) {
        std::vector<float> plane(static_cast<std::size_t>(src.height) * src.width);
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x)
                plane[static_cast<std::size_t>(y) * src.width + x] = src.at(y, x, c);
        separable_blur(plane, src.height, src.width, kernel);
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x)
                out.at(y, x, c) = plane[static_cast<std::size_t>(y) * src.width + x];
    }
    return out;
}

}  // namespace detail

/// Weighted least-squares quadratic fit of every poly_n x poly_n Gaussian
/// neighborhood. Border pixels inherit the nearest interior estimate.
inline PolyCoeffs polynomial_expansion(const Image& frame, int poly_n, double poly_sigma) {
    if (poly_n < 3 || poly_n % 2 == 0)
        throw std::invalid_argument("polynomial_expansion: poly_n must be odd and >= 3");
    const Image gray = to_gray(frame);
    const int H = gray.height, W = gray.width;
    const int n = poly_n / 2;
    if (H < poly_n || W < poly_n)
        throw std::invalid_argument("polynomial_expansion: frame smaller than neighborhood");

    // 1-d applicability g and its moment kernels
    std::vector<double> g(poly_n), xg(poly_n), xxg(poly_n);
    double gsum = 0.0;
    for (int i = -n; i <= n; ++i) {
        g[i + n] = std::exp(-(static_cast<double>(i) * i) / (2.0 * poly_sigma * poly_sigma));
        gsum += g[i + n];
    }
    double m2 = 0.0, m4 = 0.0;
    for (int i = -n; i <= n; ++i) {
        g[i + n] /= gsum;
        xg[i + n] = i * g[i + n];
        xxg[i + n] = static_cast<double>(i) * i * g[i + n];
        m2 += g[i + n] * i * i;
        m4 += g[i + n] * i * i * i * i;
    }

    // Invert the coupled (1, dx^2, dy^2) block of the normal-equation matrix
    //   [1   m2    m2  ]
    //   [m2  m4    m2^2]
    //   [m2  m2^2  m4  ]
    // once per call; the linear and cross terms decouple (1/m2, 1/m2^2).
    double M[3][4] = {{1.0, m2, m2, 0.0}, {m2, m4, m2 * m2, 0.0}, {m2, m2 * m2, m4, 0.0}};
    double inv[3][3];
    for (int col = 0; col < 3; ++col) {
        double A[3][4];
        std::memcpy(A, M, sizeof A);
        A[0][3] = col == 0;
        A[1][3] = col == 1;
        A[2][3] = col == 2;
        for (int i = 0; i < 3; ++i) {
            int piv = i;
            for (int r = i + 1; r < 3; ++r)
                if (std::abs(A[r][i]) > std::abs(A[piv][i])) piv = r;
            for (int cc = 0; cc < 4; ++cc) std::swap(A[i][cc], A[piv][cc]);
            for (int r = 0; r < 3; ++r) {
                if (r == i) continue;
                const double f = A[r][i] / A[i][i];
                for (int cc = i; cc < 4; ++cc) A[r][cc] -= f * A[i][cc];
            }
        }
        for (int i = 0; i < 3; ++i) inv[i][col] = A[i][3] / A[i][i];
    }

    // Vertical pass: V0 = g*f, V1 = (i g)*f, V2 = (i^2 g)*f, replicate rows.
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<double> v0(plane), v1(plane), v2(plane);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double a0 = 0.0, a1 = 0.0, a2 = 0.0;
            for (int i = -n; i <= n; ++i) {
                const int yy = std::clamp(y + i, 0, H - 1);
                const double f = gray.at(yy, x, 0);
                a0 += g[i + n] * f;
                a1 += xg[i + n] * f;
                a2 += xxg[i + n] * f;
            }
            const std::size_t id = static_cast<std::size_t>(y) * W + x;
            v0[id] = a0;
            v1[id] = a1;
            v2[id] = a2;
        }

    PolyCoeffs out(H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double p0 = 0, p_dx = 0, p_dy = 0, p_dx2 = 0, p_dy2 = 0, p_dxdy = 0;
            for (int j = -n; j <= n; ++j) {
                const int xx = std::clamp(x + j, 0, W - 1);
                const std::size_t id = static_cast<std::size_t>(y) * W + xx;
                p0 += g[j + n] * v0[id];
                p_dx += xg[j + n] * v0[id];
                p_dy += g[j + n] * v1[id];
                p_dx2 += xxg[j + n] * v0[id];
                p_dy2 += g[j + n] * v2[id];
                p_dxdy += xg[j + n] * v1[id];
            }
            const std::size_t id = out.idx(y, x);
            out.bx[id] = static_cast<float>(p_dx / m2);
            out.by[id] = static_cast<float>(p_dy / m2);
            out.a12[id] = static_cast<float>(p_dxdy / (m2 * m2) * 0.5);
            const double cc = inv[0][0] * p0 + inv[0][1] * p_dx2 + inv[0][2] * p_dy2;
            const double kxx = inv[1][0] * p0 + inv[1][1] * p_dx2 + inv[1][2] * p_dy2;
            const double kyy = inv[2][0] * p0 + inv[2][1] * p_dx2 + inv[2][2] * p_dy2;
            out.c[id] = static_cast<float>(cc);
            out.a11[id] = static_cast<float>(kxx);
            out.a22[id] = static_cast<float>(kyy);
        }

    // border ring inherits the nearest interior estimate
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int iy = std::clamp(y, n, H - 1 - n);
            const int ix = std::clamp(x, n, W - 1 - n);
            if (iy == y && ix == x) continue;
            const std::size_t dst = out.idx(y, x), src = out.idx(iy, ix);
            out.c[dst] = out.c[src];
            out.bx[dst] = out.bx[src];
            out.by[dst] = out.by[src];
            out.a11[dst] = out.a11[src];
            out.a22[dst] = out.a22[src];
            out.a12[dst] = out.a12[src];
        }
    return out;
}

namespace detail {

/// One displacement refinement pass: coefficient matching with the current
/// flow as warp prior, Gaussian window averaging of the per-pixel normal
/// equations, then a guarded 2x2 solve.
inline void refine_flow(const PolyCoeffs& p1, const PolyCoeffs& p2, FlowField& flow,
                        int window_size) {
    const int H = p1.height, W = p1.width;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<float> g00(plane), g01(plane), g11(plane), h0(plane), h1(plane);

    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const std::size_t id = flow.idx(y, x);
            const float du = flow.u[id], dv = flow.v[id];
            // bilinear sample of the second frame's coefficients at (x+du, y+dv)
            float sx = std::clamp(x + du, 0.0f, static_cast<float>(W - 1));
            float sy = std::clamp(y + dv, 0.0f, static_cast<float>(H - 1));
            const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
            const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
            const float wx = sx - x0, wy = sy - y0;
            auto sample = [&](const std::vector<float>& c) {
                const float top = c[p2.idx(y0, x0)] * (1 - wx) + c[p2.idx(y0, x1)] * wx;
                const float bot = c[p2.idx(y1, x0)] * (1 - wx) + c[p2.idx(y1, x1)] * wx;
                return top * (1 - wy) + bot * wy;
            };
            const float a11 = 0.5f * (p1.a11[id] + sample(p2.a11));
            const float a22 = 0.5f * (p1.a22[id] + sample(p2.a22));
            const float a12 = 0.5f * (p1.a12[id] + sample(p2.a12));
            float dbx = 0.5f * (p1.bx[id] - sample(p2.bx));
            float dby = 0.5f * (p1.by[id] - sample(p2.by));
            dbx += a11 * du + a12 * dv;
            dby += a12 * du + a22 * dv;
            g00[id] = a11 * a11 + a12 * a12;
            g01[id] = a12 * (a11 + a22);
            g11[id] = a22 * a22 + a12 * a12;
            h0[id] = a11 * dbx + a12 * dby;
            h1[id] = a12 * dbx + a22 * dby;
        }

    const int radius = window_size / 2;
    const double sigma = 0.3 * radius + 0.35;
    const auto kernel = gaussian_kernel(radius, sigma);
    separable_blur(g00, H, W, kernel);
    separable_blur(g01, H, W, kernel);
    separable_blur(g11, H, W, kernel);
    separable_blur(h0, H, W, kernel);
    separable_blur(h1, H, W, kernel);

    // Solve the averaged 2x2 system per pixel. The conditioning test is
    // relative to the matrix scale; nearly singular pixels (aperture
    // regions, flat patches) keep the prior estimate.
    for (std::size_t id = 0; id < plane; ++id) {
        const double tr_half = 0.5 * (static_cast<double>(g00[id]) + g11[id]);
        const double det = static_cast<double>(g00[id]) * g11[id] -
                           static_cast<double>(g01[id]) * g01[id];
        if (det > 1e-6 * tr_half * tr_half) {
            flow.u[id] = static_cast<float>((g11[id] * h0[id] - g01[id] * h1[id]) / det);
            flow.v[id] = static_cast<float>((g00[id] * h1[id] - g01[id] * h0[id]) / det);
        }
    }
}

}  // namespace detail

/// Dense coarse-to-fine displacement estimation between two frames of equal
/// extents. Positive u means scene content moved toward +x from prev to next,
/// so prev(x) ~ next(x + d(x)).
inline FlowField estimate_flow(const Image& prev, const Image& next, const FlowParams& params) {
    params.validate();
    if (prev.height != next.height || prev.width != next.width)
        throw std::invalid_argument("estimate_flow: frame extents differ");
    const Image g_prev = to_gray(prev);
    const Image g_next = to_gray(next);

    int levels = params.pyramid_levels;
    const int min_extent = std::min(prev.height, prev.width);
    while (levels > 1 &&
           min_extent * std::pow(params.pyramid_scale, levels - 1) < 2 * params.poly_n + 2)
        --levels;

    FlowField flow;
    for (int level = levels - 1; level >= 0; --level) {
        const double sc = std::pow(params.pyramid_scale, level);
        const int lh = std::max(params.poly_n, static_cast<int>(std::lround(prev.height * sc)));
        const int lw = std::max(params.poly_n, static_cast<int>(std::lround(prev.width * sc)));
        const double blur_sigma = level == 0 ? 0.0 : (1.0 / sc - 1.0) * 0.5;
        const Image lev_prev = resize_bilinear(detail::gaussian_blur(g_prev, blur_sigma), lh, lw);
        const Image lev_next = resize_bilinear(detail::gaussian_blur(g_next, blur_sigma), lh, lw);

        if (flow.height == 0) {
            flow = FlowField(lh, lw);
        } else {
            FlowField up(lh, lw);
            const float fu = static_cast<float>(lw) / flow.width;
            const float fv = static_cast<float>(lh) / flow.height;
            for (int y = 0; y < lh; ++y)
                for (int x = 0; x < lw; ++x) {
                    const int py = std::min(static_cast<int>(y / fv), flow.height - 1);
                    const int px = std::min(static_cast<int>(x / fu), flow.width - 1);
                    up.u[up.idx(y, x)] = flow.u[flow.idx(py, px)] * fu;
                    up.v[up.idx(y, x)] = flow.v[flow.idx(py, px)] * fv;
                }
            flow = std::move(up);
        }

        const PolyCoeffs p1 = polynomial_expansion(lev_prev, params.poly_n, params.poly_sigma);
        const PolyCoeffs p2 = polynomial_expansion(lev_next, params.poly_n, params.poly_sigma);
        for (int it = 0; it < params.iterations; ++it)
            detail::refine_flow(p1, p2, flow, params.window_size);
    }
    return flow;
}

/// Hue from direction, value from magnitude normalized by the field maximum
/// (black when the field is still), saturation 1; converted to RGB.
inline Image flow_to_color(const FlowField& flow) {
    Image out(flow.height, flow.width, 3);
    float max_mag = 0.0f;
    for (std::size_t i = 0; i < flow.u.size(); ++i)
        max_mag = std::max(max_mag, std::hypot(flow.u[i], flow.v[i]));
    for (int y = 0; y < flow.height; ++y)
        for (int x = 0; x < flow.width; ++x) {
            const std::size_t id = flow.idx(y, x);
            const float mag = std::hypot(flow.u[id], flow.v[id]);
            const float value = max_mag > 0.0f ? mag / max_mag : 0.0f;
            float hue = std::atan2(flow.v[id], flow.u[id]) * 180.0f / static_cast<float>(M_PI);
            if (hue < 0.0f) hue += 360.0f;
            // HSV -> RGB with saturation 1
            const float hp = hue / 60.0f;
            const float cx = value * (1.0f - std::abs(std::fmod(hp, 2.0f) - 1.0f));
            float r = 0, gch = 0, b = 0;
            switch (static_cast<int>(hp) % 6) {
                case 0: r = value; gch = cx; break;
                case 1: r = cx; gch = value; break;
                case 2: gch = value; b = cx; break;
                case 3: gch = cx; b = value; break;
                case 4: r = cx; b = value; break;
                default: r = value; b = cx; break;
            }
            out.at(y, x, 0) = r;
            out.at(y, x, 1) = gch;
            out.at(y, x, 2) = b;
        }
    return out;
}

// ----- flow cache file format -----
// 16-byte header: 8-byte magic "CYFLOW01", u32 width, u32 height (little
// endian), then height*width little-endian float32 (u, v) pairs, row-major.

inline constexpr char kFlowMagic[8] = {'C', 'Y', 'F', 'L', 'O', 'W', '0', '1'};

inline void write_flow_file(const std::filesystem::path& path, const FlowField& flow) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write flow file: " + path.string());
    out.write(kFlowMagic, 8);
    const std::uint32_t w = static_cast<std::uint32_t>(flow.width);
    const std::uint32_t h = static_cast<std::uint32_t>(flow.height);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
    std::vector<float> inter(flow.u.size() * 2);
    for (std::size_t i = 0; i < flow.u.size(); ++i) {
        inter[2 * i] = flow.u[i];
        inter[2 * i + 1] = flow.v[i];
    }
    out.write(reinterpret_cast<const char*>(inter.data()),
              static_cast<std::streamsize>(inter.size() * sizeof(float)));
    if (!out) throw DataError("short write on flow file: " + path.string());
}

inline FlowField read_flow_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open flow file: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::memcmp(magic, kFlowMagic, 8) != 0)
        throw DataError("bad flow file magic: " + path.string());
    std::uint32_t w = 0, h = 0;
    in.read(reinterpret_cast<char*>(&w), 4);
    in.read(reinterpret_cast<char*>(&h), 4);
    if (!in || w == 0 || h == 0) throw DataError("bad flow file header: " + path.string());
    FlowField flow(static_cast<int>(h), static_cast<int>(w));
    std::vector<float> inter(static_cast<std::size_t>(w) * h * 2);
    in.read(reinterpret_cast<char*>(inter.data()),
            static_cast<std::streamsize>(inter.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(inter.size() * sizeof(float)))
        throw DataError("truncated flow file: " + path.string());
    for (std::size_t i = 0; i < flow.u.size(); ++i) {
        flow.u[i] = inter[2 * i];
        flow.v[i] = inter[2 * i + 1];
    }
    return flow;
}

/// True when a cache entry exists with a valid header and matching extents.
inline bool flow_file_fresh(const std::filesystem::path& path, int height, int width) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return false;
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::memcmp(magic, kFlowMagic, 8) != 0) return false;
    std::uint32_t w = 0, h = 0;
    in.read(reinterpret_cast<char*>(&w), 4);
    in.read(reinterpret_cast<char*>(&h), 4);
    if (!in || w != static_cast<std::uint32_t>(width) || h != static_cast<std::uint32_t>(height))
        return false;
    in.seekg(0, std::ios::end);
    const auto expect = 16 + static_cast<std::streamoff>(w) * h * 2 * sizeof(float);
    return in.tellg() == expect;
}

}  // namespace cyclingnet
