#pragma once

// Synthetic multi-camera world: outward-looking ring rigs, random box scenes,
// and a small convex-hull rasterizer that provides training images and exact
// ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "petr/common.hpp"
#include "petr/geometry.hpp"

namespace petr {

struct Box3D {
    std::array<double, 3> center{};  // meters
    std::array<double, 3> size{};    // w, l, h; all > 0
    double yaw = 0.0;                // radians in (-pi, pi]
    int class_id = 0;
};

struct Scene {
    std::uint64_t seed = 0;
    CameraRig rig;
    std::vector<Box3D> boxes;
};

// ----------------------------- rig construction -----------------------------

// Cameras at equal azimuth spacing on a ring of the given radius, looking
// outward. World frame is z-up; camera frame is x-right, y-down, z-forward.
inline CameraRig make_ring_rig(std::size_t n_views, double radius, std::size_t image_w,
                               std::size_t image_h, std::size_t stride, double fov_deg) {
    if (n_views < 1) throw ParameterError("make_ring_rig: need at least one view");
    if (!(fov_deg > 0.0 && fov_deg < 180.0)) {
        throw ParameterError("make_ring_rig: fov must be in (0, 180), got " + std::to_string(fov_deg));
    }
    const double f = (static_cast<double>(image_w) / 2.0) / std::tan(fov_deg * M_PI / 360.0);
    Mat4 intr = mat4_identity();
    intr[0] = f;
    intr[2] = static_cast<double>(image_w) / 2.0;
    intr[5] = f;
    intr[6] = static_cast<double>(image_h) / 2.0;

    std::vector<Mat4> mats;
    mats.reserve(n_views);
    for (std::size_t i = 0; i < n_views; ++i) {
        const double az = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n_views);
        const double fx = std::cos(az), fy = std::sin(az);
        // rows of R: right = forward x up, down = forward x right, forward
        const double right[3] = {fy, -fx, 0.0};
        const double down[3] = {0.0, 0.0, -1.0};
        const double fwd[3] = {fx, fy, 0.0};
        const double cam[3] = {radius * fx, radius * fy, 0.0};
        Mat4 ext = mat4_identity();
        const double* rows[3] = {right, down, fwd};
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) ext[r * 4 + c] = rows[r][c];
            ext[r * 4 + 3] = -(rows[r][0] * cam[0] + rows[r][1] * cam[1] + rows[r][2] * cam[2]);
        }
        mats.push_back(mat4_mul(intr, ext));
    }
    return CameraRig(std::move(mats), image_w, image_h, stride);
}

// ----------------------------- scene sampling -----------------------------

namespace detail {
// nominal (w, l, h) per class, cycled when class_count exceeds the table
inline std::array<double, 3> nominal_size(int class_id) {
    static constexpr std::array<std::array<double, 3>, 6> kTable{{
        {4.4, 2.0, 1.7},   // car-like
        {2.2, 1.0, 1.6},   // bike-like
        {7.5, 2.8, 3.2},   // truck-like
        {1.0, 1.0, 1.9},   // pedestrian-like
        {3.0, 3.0, 2.4},   // kiosk-like
        {1.6, 1.6, 3.4},   // pole-like
    }};
    return kTable[static_cast<std::size_t>(class_id) % kTable.size()];
}
}  // namespace detail

// Uniform centers in the RoI shrunk by a 10% margin per side, rejecting
// centers closer than min_center_dist to the rig origin in the xy plane.
// Sizes are per-class nominal +-20%, yaw uniform in (-pi, pi].
inline Scene sample_scene(std::uint64_t seed, const CameraRig& rig, const RoI& roi,
                          std::pair<int, int> n_boxes_range, int class_count,
                          double min_center_dist = 0.0) {
    if (class_count < 1) throw ParameterError("sample_scene: class_count must be positive");
    if (n_boxes_range.first < 0 || n_boxes_range.second < n_boxes_range.first) {
        throw ParameterError("sample_scene: bad box count range");
    }
    Scene s;
    s.seed = seed;
    s.rig = rig;
    Rng rng(splitmix64(seed));
    const int n = rng.uniform_int(n_boxes_range.first, n_boxes_range.second);
    const auto ext = roi.extents();
    const double mx = 0.1 * ext[0], my = 0.1 * ext[1], mz = 0.1 * ext[2];
    for (int b = 0; b < n; ++b) {
        Box3D box;
        for (int tries = 0; tries < 1000; ++tries) {
            box.center[0] = rng.uniform(roi.x_min + mx, roi.x_max - mx);
            box.center[1] = rng.uniform(roi.y_min + my, roi.y_max - my);
            box.center[2] = rng.uniform(roi.z_min + mz, roi.z_max - mz);
            if (std::hypot(box.center[0], box.center[1]) >= min_center_dist) break;
        }
        box.class_id = rng.uniform_int(0, class_count - 1);
        const auto nom = detail::nominal_size(box.class_id);
        for (int k = 0; k < 3; ++k) box.size[k] = nom[k] * rng.uniform(0.8, 1.2);
        box.yaw = rng.uniform(-M_PI, M_PI);
        if (box.yaw <= -M_PI) box.yaw = M_PI;
        s.boxes.push_back(box);
    }
    return s;
}

inline std::array<Vec4, 8> box_corners(const Box3D& b) {
    const double cy = std::cos(b.yaw), sy = std::sin(b.yaw);
    const double hw = b.size[0] / 2.0, hl = b.size[1] / 2.0, hh = b.size[2] / 2.0;
    std::array<Vec4, 8> out;
    int idx = 0;
    for (int sx : {-1, 1})
        for (int sl : {-1, 1})
            for (int sz : {-1, 1}) {
                const double lx = sx * hw, ly = sl * hl, lz = sz * hh;
                out[idx++] = Vec4{b.center[0] + cy * lx - sy * ly,
                                  b.center[1] + sy * lx + cy * ly,
                                  b.center[2] + lz, 1.0};
            }
    return out;
}

// ----------------------------- rendering -----------------------------

struct Images {
    std::size_t n_views = 0, h = 0, w = 0;
    std::vector<double> data;  // (n_views, 3, h, w)

    double& at(std::size_t v, std::size_t c, std::size_t y, std::size_t x) {
        return data[((v * 3 + c) * h + y) * w + x];
    }
    double at(std::size_t v, std::size_t c, std::size_t y, std::size_t x) const {
        return data[((v * 3 + c) * h + y) * w + x];
    }
};

inline std::array<double, 3> class_color(int class_id) {
    static constexpr std::array<std::array<double, 3>, 6> kColors{{
        {0.95, 0.25, 0.20},
        {0.20, 0.85, 0.30},
        {0.25, 0.40, 0.95},
        {0.95, 0.85, 0.20},
        {0.85, 0.25, 0.85},
        {0.20, 0.85, 0.85},
    }};
    return kColors[static_cast<std::size_t>(class_id) % kColors.size()];
}

namespace detail {

struct Pt2 {
    double x, y;
};

inline double cross(const Pt2& o, const Pt2& a, const Pt2& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Andrew monotone chain; returns CCW hull
inline std::vector<Pt2> convex_hull(std::vector<Pt2> pts) {
    std::sort(pts.begin(), pts.end(), [](const Pt2& a, const Pt2& b) {
        return a.x < b.x || (a.x == b.x && a.y < b.y);
    });
    pts.erase(std::unique(pts.begin(), pts.end(),
                          [](const Pt2& a, const Pt2& b) { return a.x == b.x && a.y == b.y; }),
              pts.end());
    const std::size_t n = pts.size();
    if (n < 3) return pts;
    std::vector<Pt2> hull(2 * n);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    const std::size_t lower = k + 1;
    for (std::size_t i = n - 1; i-- > 0;) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

inline bool inside_hull(const std::vector<Pt2>& hull, double x, double y) {
    if (hull.size() < 3) return false;
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const Pt2& a = hull[i];
        const Pt2& b = hull[(i + 1) % hull.size()];
        if ((b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x) < 0.0) return false;
    }
    return true;
}

}  // namespace detail

// Painter's algorithm over convex silhouettes: project the 8 corners of each
// box, fill the convex hull of the in-front projections with the class color
// shaded by 1/depth, far boxes first. Background is a fixed gradient.
inline Images render(const Scene& scene) {
    const CameraRig& rig = scene.rig;
    Images img;
    img.n_views = rig.n_views;
    img.h = rig.image_h;
    img.w = rig.image_w;
    img.data.assign(img.n_views * 3 * img.h * img.w, 0.0);

    for (std::size_t v = 0; v < rig.n_views; ++v) {
        for (std::size_t y = 0; y < img.h; ++y)
            for (std::size_t x = 0; x < img.w; ++x) {
                img.at(v, 0, y, x) = 0.08 * static_cast<double>(y) / static_cast<double>(img.h);
                img.at(v, 1, y, x) = 0.08 * static_cast<double>(x) / static_cast<double>(img.w);
                img.at(v, 2, y, x) = 0.05;
            }

        // far-to-near by center depth in this view
        std::vector<std::pair<double, std::size_t>> order;
        for (std::size_t b = 0; b < scene.boxes.size(); ++b) {
            const auto& c = scene.boxes[b].center;
            const auto pr = project(rig, v, Vec4{c[0], c[1], c[2], 1.0});
            order.emplace_back(pr.depth, b);
        }
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            return a.first > b.first || (a.first == b.first && a.second < b.second);
        });

        for (const auto& [depth, bi] : order) {
            const Box3D& box = scene.boxes[bi];
            std::vector<detail::Pt2> proj;
            double min_d = 1e30;
            for (const Vec4& corner : box_corners(box)) {
                const auto pr = project(rig, v, corner);
                if (pr.behind) continue;
                proj.push_back({pr.u, pr.v});
                min_d = std::min(min_d, pr.depth);
            }
            if (proj.size() < 3) continue;
            const auto hull = detail::convex_hull(std::move(proj));
            if (hull.size() < 3) continue;
            double x0 = 1e30, x1 = -1e30, y0 = 1e30, y1 = -1e30;
            for (const auto& p : hull) {
                x0 = std::min(x0, p.x);
                x1 = std::max(x1, p.x);
                y0 = std::min(y0, p.y);
                y1 = std::max(y1, p.y);
            }
            const long px0 = std::max(0L, static_cast<long>(std::floor(x0)));
            const long px1 = std::min(static_cast<long>(img.w) - 1, static_cast<long>(std::ceil(x1)));
            const long py0 = std::max(0L, static_cast<long>(std::floor(y0)));
            const long py1 = std::min(static_cast<long>(img.h) - 1, static_cast<long>(std::ceil(y1)));
            const auto col = class_color(box.class_id);
            const double shade = std::clamp(10.0 / std::max(min_d, 1.0), 0.15, 1.0);
            for (long py = py0; py <= py1; ++py) {
                for (long px = px0; px <= px1; ++px) {
                    if (!detail::inside_hull(hull, static_cast<double>(px) + 0.5,
                                             static_cast<double>(py) + 0.5))
                        continue;
                    for (int c = 0; c < 3; ++c)
                        img.at(v, static_cast<std::size_t>(c), static_cast<std::size_t>(py),
                               static_cast<std::size_t>(px)) = col[static_cast<std::size_t>(c)] * shade;
                }
            }
        }
    }
    return img;
}

// ----------------------------- JSON serialization -----------------------------

inline nlohmann::json scene_to_json(const Scene& s) {
    nlohmann::json j;
    j["seed"] = s.seed;
    nlohmann::json rig;
    rig["n_views"] = s.rig.n_views;
    rig["image_size"] = {s.rig.image_w, s.rig.image_h};
    rig["stride"] = s.rig.stride;
    nlohmann::json mats = nlohmann::json::array();
    for (const auto& m : s.rig.k_mats) {
        mats.push_back(std::vector<double>(m.begin(), m.end()));
    }
    rig["k_mats"] = mats;
    j["rig"] = rig;
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : s.boxes) {
        boxes.push_back({{"center", b.center}, {"size", b.size}, {"yaw", b.yaw}, {"class_id", b.class_id}});
    }
    j["boxes"] = boxes;
    return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
    Scene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    const auto& rig = j.at("rig");
    std::vector<Mat4> mats;
    for (const auto& mj : rig.at("k_mats")) {
        const auto v = mj.get<std::vector<double>>();
        if (v.size() != 16) throw ConfigError("scene rig: k_mat must have 16 entries");
        Mat4 m;
        std::copy(v.begin(), v.end(), m.begin());
        mats.push_back(m);
    }
    const auto sz = rig.at("image_size").get<std::vector<std::size_t>>();
    if (sz.size() != 2) throw ConfigError("scene rig: image_size must be [w, h]");
    s.rig = CameraRig(std::move(mats), sz[0], sz[1], rig.at("stride").get<std::size_t>());
    for (const auto& bj : j.at("boxes")) {
        Box3D b;
        const auto c = bj.at("center").get<std::vector<double>>();
        const auto szv = bj.at("size").get<std::vector<double>>();
        if (c.size() != 3 || szv.size() != 3) throw ConfigError("scene box: center/size must have 3 entries");
        std::copy(c.begin(), c.end(), b.center.begin());
        std::copy(szv.begin(), szv.end(), b.size.begin());
        b.yaw = bj.at("yaw").get<double>();
        b.class_id = bj.at("class_id").get<int>();
        s.boxes.push_back(b);
    }
    return s;
}

}  // namespace petr
