#pragma once

// Camera frustum geometry: depth discretization, frustum meshgrid, the
// world<->frustum transforms, and RoI normalization of world coordinates.

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "petr/common.hpp"

namespace petr {

using Vec4 = std::array<double, 4>;
using Mat4 = std::array<double, 16>;  // row-major

inline Mat4 mat4_identity() {
    Mat4 m{};
    m[0] = m[5] = m[10] = m[15] = 1.0;
    return m;
}

inline Mat4 mat4_mul(const Mat4& a, const Mat4& b) {
    Mat4 c{};
    for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 4; ++k) {
            const double av = a[i * 4 + k];
            for (int j = 0; j < 4; ++j) c[i * 4 + j] += av * b[k * 4 + j];
        }
    return c;
}

inline Vec4 mat4_apply(const Mat4& m, const Vec4& v) {
    Vec4 r{};
    for (int i = 0; i < 4; ++i)
        r[i] = m[i * 4 + 0] * v[0] + m[i * 4 + 1] * v[1] + m[i * 4 + 2] * v[2] + m[i * 4 + 3] * v[3];
    return r;
}

// LU factorization with partial pivoting; nullopt when |det| <= 1e-12.
inline std::optional<Mat4> mat4_inverse_lu(const Mat4& m) {
    double lu[16];
    for (int i = 0; i < 16; ++i) lu[i] = m[i];
    int piv[4] = {0, 1, 2, 3};
    double det = 1.0;
    for (int k = 0; k < 4; ++k) {
        int p = k;
        double best = std::fabs(lu[k * 4 + k]);
        for (int i = k + 1; i < 4; ++i) {
            const double v = std::fabs(lu[i * 4 + k]);
            if (v > best) {
                best = v;
                p = i;
            }
        }
        if (best == 0.0) return std::nullopt;
        if (p != k) {
            for (int j = 0; j < 4; ++j) std::swap(lu[k * 4 + j], lu[p * 4 + j]);
            std::swap(piv[k], piv[p]);
            det = -det;
        }
        det *= lu[k * 4 + k];
        for (int i = k + 1; i < 4; ++i) {
            lu[i * 4 + k] /= lu[k * 4 + k];
            for (int j = k + 1; j < 4; ++j) lu[i * 4 + j] -= lu[i * 4 + k] * lu[k * 4 + j];
        }
    }
    if (std::fabs(det) <= 1e-12) return std::nullopt;

    Mat4 inv{};
    for (int col = 0; col < 4; ++col) {
        double b[4] = {0, 0, 0, 0};
        for (int i = 0; i < 4; ++i) b[i] = (piv[i] == col) ? 1.0 : 0.0;
        // forward substitution (unit lower)
        for (int i = 1; i < 4; ++i)
            for (int j = 0; j < i; ++j) b[i] -= lu[i * 4 + j] * b[j];
        // back substitution
        for (int i = 3; i >= 0; --i) {
            for (int j = i + 1; j < 4; ++j) b[i] -= lu[i * 4 + j] * b[j];
            b[i] /= lu[i * 4 + i];
        }
        for (int i = 0; i < 4; ++i) inv[i * 4 + col] = b[i];
    }
    return inv;
}

inline double mat4_det(const Mat4& m) {
    double lu[16];
    for (int i = 0; i < 16; ++i) lu[i] = m[i];
    double det = 1.0;
    for (int k = 0; k < 4; ++k) {
        int p = k;
        double best = std::fabs(lu[k * 4 + k]);
        for (int i = k + 1; i < 4; ++i)
            if (std::fabs(lu[i * 4 + k]) > best) {
                best = std::fabs(lu[i * 4 + k]);
                p = i;
            }
        if (best == 0.0) return 0.0;
        if (p != k) {
            for (int j = 0; j < 4; ++j) std::swap(lu[k * 4 + j], lu[p * 4 + j]);
            det = -det;
        }
        det *= lu[k * 4 + k];
        for (int i = k + 1; i < 4; ++i) {
            const double f = lu[i * 4 + k] / lu[k * 4 + k];
            for (int j = k + 1; j < 4; ++j) lu[i * 4 + j] -= f * lu[k * 4 + j];
        }
    }
    return det;
}

// ----------------------------- camera rig -----------------------------

// Per-view world->frustum transforms plus image geometry. A frustum point is
// (u*d, v*d, d, 1) with (u, v) in pixels and d the depth along the optical axis.
struct CameraRig {
    std::size_t n_views = 0;
    std::vector<Mat4> k_mats;
    std::size_t image_w = 0, image_h = 0;
    std::size_t stride = 1;

    CameraRig() = default;
    CameraRig(std::vector<Mat4> mats, std::size_t w, std::size_t h, std::size_t s)
        : n_views(mats.size()), k_mats(std::move(mats)), image_w(w), image_h(h), stride(s) {
        if (n_views == 0) throw ParameterError("CameraRig: no views");
        if (s == 0 || w % s != 0 || h % s != 0) {
            throw ParameterError("CameraRig: image size " + std::to_string(w) + "x" + std::to_string(h) +
                                 " not divisible by stride " + std::to_string(s));
        }
        for (std::size_t i = 0; i < n_views; ++i) {
            if (std::fabs(mat4_det(k_mats[i])) <= 1e-12) {
                throw GeometryError("CameraRig: K matrix of view " + std::to_string(i) + " is singular");
            }
        }
    }

    std::size_t feat_w() const { return image_w / stride; }
    std::size_t feat_h() const { return image_h / stride; }
};

// ----------------------------- depth bins -----------------------------

enum class DepthMode { UD, LID };

// UD: d_j = d_min + j*(d_max-d_min)/(D-1)
// LID: d_j = d_min + (d_max-d_min)*j*(j+1)/(D*(D-1)), so gaps grow linearly
// and d_0 = d_min, d_{D-1} = d_max.
inline std::vector<double> make_depth_bins(DepthMode mode, double d_min, double d_max, std::size_t d) {
    if (!(d_min > 0.0) || !(d_min < d_max)) {
        throw ParameterError("make_depth_bins: need 0 < d_min < d_max, got [" + std::to_string(d_min) +
                             ", " + std::to_string(d_max) + "]");
    }
    if (d < 2) throw ParameterError("make_depth_bins: need at least 2 bins");
    std::vector<double> bins(d);
    const double range = d_max - d_min;
    const double dd = static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
        const double jd = static_cast<double>(j);
        if (mode == DepthMode::UD) {
            bins[j] = d_min + jd * range / (dd - 1.0);
        } else {
            bins[j] = d_min + range * jd * (jd + 1.0) / (dd * (dd - 1.0));
        }
    }
    bins[0] = d_min;
    if (mode == DepthMode::UD) bins[d - 1] = d_max;
    return bins;
}

// ----------------------------- frustum grid -----------------------------

// Shared-by-all-views meshgrid of homogeneous frustum points, one per
// (depth bin, feature row, feature col). (u, v) are feature-cell centers
// in pixels: ((col+0.5)*stride, (row+0.5)*stride).
struct FrustumGrid {
    std::size_t w = 0, h = 0, d = 0;
    std::vector<Vec4> points;  // index (di*h + hi)*w + wi

    const Vec4& at(std::size_t di, std::size_t hi, std::size_t wi) const {
        return points[(di * h + hi) * w + wi];
    }
};

inline FrustumGrid build_frustum_grid(const CameraRig& rig, const std::vector<double>& bins) {
    if (bins.empty()) throw ParameterError("build_frustum_grid: no depth bins");
    FrustumGrid g;
    g.w = rig.feat_w();
    g.h = rig.feat_h();
    g.d = bins.size();
    g.points.resize(g.w * g.h * g.d);
    const double s = static_cast<double>(rig.stride);
    for (std::size_t di = 0; di < g.d; ++di) {
        const double depth = bins[di];
        for (std::size_t hi = 0; hi < g.h; ++hi) {
            const double v = (static_cast<double>(hi) + 0.5) * s;
            for (std::size_t wi = 0; wi < g.w; ++wi) {
                const double u = (static_cast<double>(wi) + 0.5) * s;
                g.points[(di * g.h + hi) * g.w + wi] = Vec4{u * depth, v * depth, depth, 1.0};
            }
        }
    }
    return g;
}

// ----------------------------- RoI -----------------------------

struct RoI {
    double x_min = 0, y_min = 0, z_min = 0, x_max = 0, y_max = 0, z_max = 0;

    RoI() = default;
    RoI(double xmin, double ymin, double zmin, double xmax, double ymax, double zmax)
        : x_min(xmin), y_min(ymin), z_min(zmin), x_max(xmax), y_max(ymax), z_max(zmax) {
        if (!(x_max > x_min && y_max > y_min && z_max > z_min)) {
            throw ParameterError("RoI: max must be strictly greater than min per axis");
        }
    }

    std::array<double, 3> mins() const { return {x_min, y_min, z_min}; }
    std::array<double, 3> extents() const { return {x_max - x_min, y_max - y_min, z_max - z_min}; }

    std::array<double, 3> normalize(double x, double y, double z) const {
        return {(x - x_min) / (x_max - x_min), (y - y_min) / (y_max - y_min),
                (z - z_min) / (z_max - z_min)};
    }

    std::array<double, 3> denormalize(double nx, double ny, double nz) const {
        return {x_min + nx * (x_max - x_min), y_min + ny * (y_max - y_min),
                z_min + nz * (z_max - z_min)};
    }

    bool contains(double x, double y, double z) const {
        return x >= x_min && x <= x_max && y >= y_min && y <= y_max && z >= z_min && z <= z_max;
    }
};

// ----------------------------- unproject / project -----------------------------

// Raw (unnormalized) world coordinates of the grid points under one view.
struct WorldPoints {
    std::size_t d = 0, h = 0, w = 0;
    std::vector<Vec4> pts;  // same indexing as FrustumGrid

    const Vec4& at(std::size_t di, std::size_t hi, std::size_t wi) const {
        return pts[(di * h + hi) * w + wi];
    }
};

inline WorldPoints unproject(const CameraRig& rig, std::size_t view, const FrustumGrid& grid) {
    if (view >= rig.n_views) throw ParameterError("unproject: view index out of range");
    const auto inv = mat4_inverse_lu(rig.k_mats[view]);
    if (!inv) throw GeometryError("unproject: K matrix of view " + std::to_string(view) + " is singular");
    WorldPoints out;
    out.d = grid.d;
    out.h = grid.h;
    out.w = grid.w;
    out.pts.resize(grid.points.size());
    for (std::size_t i = 0; i < grid.points.size(); ++i) out.pts[i] = mat4_apply(*inv, grid.points[i]);
    return out;
}

struct Projection {
    Vec4 frustum{};   // (u*d, v*d, d, 1)
    double u = 0, v = 0, depth = 0;
    bool behind = false;  // depth <= 0; u, v not meaningful then
};

inline Projection project(const CameraRig& rig, std::size_t view, const Vec4& world) {
    if (view >= rig.n_views) throw ParameterError("project: view index out of range");
    Projection p;
    p.frustum = mat4_apply(rig.k_mats[view], world);
    p.depth = p.frustum[2];
    if (p.depth <= 0.0) {
        p.behind = true;
        return p;
    }
    p.u = p.frustum[0] / p.depth;
    p.v = p.frustum[1] / p.depth;
    return p;
}

// ----------------------------- normalized coordinate grid -----------------------------

// Per-view (D*4, H_F, W_F) channel stack of normalized (x, y, z, 1) per depth
// bin. Out-of-RoI points keep the same affine map and may leave [0, 1]; the
// homogeneous component passes through as 1.
struct WorldCoordGrid {
    std::size_t d = 0, h = 0, w = 0;
    std::vector<double> chw;  // ((di*4 + comp) * h + hi) * w + wi

    double at(std::size_t channel, std::size_t hi, std::size_t wi) const {
        return chw[(channel * h + hi) * w + wi];
    }

    // (h*w, d*4) matrix, row per cell, for the position-embedding MLP
    std::vector<double> cell_matrix() const {
        std::vector<double> m(h * w * d * 4);
        const std::size_t cols = d * 4;
        for (std::size_t hi = 0; hi < h; ++hi)
            for (std::size_t wi = 0; wi < w; ++wi)
                for (std::size_t ch = 0; ch < cols; ++ch)
                    m[(hi * w + wi) * cols + ch] = chw[(ch * h + hi) * w + wi];
        return m;
    }
};

inline WorldCoordGrid normalize_coords(const WorldPoints& raw, const RoI& roi) {
    WorldCoordGrid g;
    g.d = raw.d;
    g.h = raw.h;
    g.w = raw.w;
    g.chw.resize(raw.d * 4 * raw.h * raw.w);
    for (std::size_t di = 0; di < raw.d; ++di) {
        for (std::size_t hi = 0; hi < raw.h; ++hi) {
            for (std::size_t wi = 0; wi < raw.w; ++wi) {
                const Vec4& p = raw.at(di, hi, wi);
                const auto n = roi.normalize(p[0], p[1], p[2]);
                const std::size_t base = di * 4;
                g.chw[((base + 0) * g.h + hi) * g.w + wi] = n[0];
                g.chw[((base + 1) * g.h + hi) * g.w + wi] = n[1];
                g.chw[((base + 2) * g.h + hi) * g.w + wi] = n[2];
                g.chw[((base + 3) * g.h + hi) * g.w + wi] = p[3];
            }
        }
    }
    return g;
}

}  // namespace petr
