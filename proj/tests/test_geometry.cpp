#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "petr/geometry.hpp"
#include "petr/scenegen.hpp"

using namespace petr;

namespace {

// random well-conditioned world->frustum matrix: pinhole intrinsics times a
// rigid transform from a random unit quaternion
Mat4 random_k(Rng& rng) {
    const double q0 = rng.gauss(), q1 = rng.gauss(), q2 = rng.gauss(), q3 = rng.gauss();
    const double n = std::sqrt(q0 * q0 + q1 * q1 + q2 * q2 + q3 * q3);
    const double w = q0 / n, x = q1 / n, y = q2 / n, z = q3 / n;
    Mat4 ext = mat4_identity();
    ext[0] = 1 - 2 * (y * y + z * z);
    ext[1] = 2 * (x * y - w * z);
    ext[2] = 2 * (x * z + w * y);
    ext[4] = 2 * (x * y + w * z);
    ext[5] = 1 - 2 * (x * x + z * z);
    ext[6] = 2 * (y * z - w * x);
    ext[8] = 2 * (x * z - w * y);
    ext[9] = 2 * (y * z + w * x);
    ext[10] = 1 - 2 * (x * x + y * y);
    for (int i = 0; i < 3; ++i) ext[i * 4 + 3] = rng.uniform(-5.0, 5.0);
    Mat4 intr = mat4_identity();
    intr[0] = rng.uniform(50.0, 400.0);
    intr[5] = rng.uniform(50.0, 400.0);
    intr[2] = rng.uniform(20.0, 100.0);
    intr[6] = rng.uniform(20.0, 100.0);
    return mat4_mul(intr, ext);
}

}  // namespace

TEST_CASE("depth bins: UD endpoints exact, LID starts at d_min", "[geometry]") {
    const auto ud = make_depth_bins(DepthMode::UD, 1.0, 61.2, 64);
    CHECK(ud.front() == 1.0);
    CHECK(ud.back() == 61.2);
    const auto lid = make_depth_bins(DepthMode::LID, 0.7, 42.0, 9);
    CHECK(lid.front() == 0.7);
    CHECK(lid.back() == Catch::Approx(42.0).margin(1e-12));
}

TEST_CASE("LID gaps grow strictly, enumerated from the closed form", "[geometry]") {
    const std::size_t d = 64;
    const double dmin = 1.0, dmax = 61.2;
    const auto lid = make_depth_bins(DepthMode::LID, dmin, dmax, d);
    // direct formula oracle
    for (std::size_t j = 0; j < d; ++j) {
        const double expect =
            dmin + (dmax - dmin) * static_cast<double>(j) * (static_cast<double>(j) + 1.0) /
                       (static_cast<double>(d) * (static_cast<double>(d) - 1.0));
        CHECK(lid[j] == Catch::Approx(expect).margin(1e-12));
    }
    for (std::size_t j = 0; j + 2 < d; ++j) {
        CHECK(lid[j + 2] - lid[j + 1] > lid[j + 1] - lid[j]);
    }
}

TEST_CASE("depth bins are strictly increasing within range", "[geometry]") {
    for (auto mode : {DepthMode::UD, DepthMode::LID}) {
        const auto bins = make_depth_bins(mode, 2.0, 50.0, 16);
        for (std::size_t j = 0; j + 1 < bins.size(); ++j) CHECK(bins[j] < bins[j + 1]);
        CHECK(bins.front() >= 2.0);
        CHECK(bins.back() <= 50.0 + 1e-12);
    }
}

TEST_CASE("depth bin parameter errors", "[geometry]") {
    CHECK_THROWS_AS(make_depth_bins(DepthMode::UD, 0.0, 10.0, 4), ParameterError);
    CHECK_THROWS_AS(make_depth_bins(DepthMode::UD, 5.0, 5.0, 4), ParameterError);
    CHECK_THROWS_AS(make_depth_bins(DepthMode::LID, 1.0, 10.0, 1), ParameterError);
}

TEST_CASE("frustum grid holds cell-center points", "[geometry]") {
    std::vector<Mat4> mats{mat4_identity()};
    CameraRig rig(std::move(mats), 32, 16, 16);  // feat 2x1
    const auto grid1 = build_frustum_grid(rig, {1.0});
    REQUIRE(grid1.points.size() == 2);
    CHECK(grid1.at(0, 0, 0) == Vec4{8.0, 8.0, 1.0, 1.0});
    CHECK(grid1.at(0, 0, 1) == Vec4{24.0, 8.0, 1.0, 1.0});

    const auto grid3 = build_frustum_grid(rig, {1.0, 2.0, 5.0});
    CHECK(grid3.points.size() == 6);

    // every stored point satisfies p0 = u*p2, p1 = v*p2 with (u, v) recomputed
    for (std::size_t di = 0; di < grid3.d; ++di)
        for (std::size_t hi = 0; hi < grid3.h; ++hi)
            for (std::size_t wi = 0; wi < grid3.w; ++wi) {
                const Vec4& p = grid3.at(di, hi, wi);
                const double u = (static_cast<double>(wi) + 0.5) * 16.0;
                const double v = (static_cast<double>(hi) + 0.5) * 16.0;
                CHECK(p[0] == Catch::Approx(u * p[2]).margin(1e-12));
                CHECK(p[1] == Catch::Approx(v * p[2]).margin(1e-12));
            }
}

TEST_CASE("frustum grid is shared across views", "[geometry]") {
    const auto rig = make_ring_rig(4, 1.0, 64, 64, 16, 90.0);
    const auto bins = make_depth_bins(DepthMode::LID, 1.0, 30.0, 8);
    const auto a = build_frustum_grid(rig, bins);
    const auto b = build_frustum_grid(rig, bins);
    CHECK(a.points == b.points);  // pure function of rig geometry + bins
}

TEST_CASE("unproject with identity and translation K", "[geometry]") {
    CameraRig rig_id({mat4_identity()}, 32, 32, 16);
    const auto grid = build_frustum_grid(rig_id, {1.0, 3.0});
    const auto w_id = unproject(rig_id, 0, grid);
    for (std::size_t i = 0; i < grid.points.size(); ++i) {
        for (int k = 0; k < 4; ++k) CHECK(w_id.pts[i][k] == Catch::Approx(grid.points[i][k]).margin(1e-12));
    }

    Mat4 trans = mat4_identity();
    trans[3] = 2.0;
    trans[7] = -1.0;
    trans[11] = 0.5;
    CameraRig rig_t({trans}, 32, 32, 16);
    const auto w_t = unproject(rig_t, 0, grid);
    for (std::size_t i = 0; i < grid.points.size(); ++i) {
        CHECK(w_t.pts[i][0] == Catch::Approx(grid.points[i][0] - 2.0).margin(1e-12));
        CHECK(w_t.pts[i][1] == Catch::Approx(grid.points[i][1] + 1.0).margin(1e-12));
        CHECK(w_t.pts[i][2] == Catch::Approx(grid.points[i][2] - 0.5).margin(1e-12));
    }
}

TEST_CASE("project basics", "[geometry]") {
    CameraRig rig({mat4_identity()}, 32, 32, 16);
    const auto p = project(rig, 0, Vec4{2, 3, 1, 1});
    CHECK_FALSE(p.behind);
    CHECK(p.u == Catch::Approx(2.0));
    CHECK(p.v == Catch::Approx(3.0));
    CHECK(p.depth == Catch::Approx(1.0));

    // behind-camera is a tagged result, not an exception
    const auto b = project(rig, 0, Vec4{0, 0, -2, 1});
    CHECK(b.behind);
}

TEST_CASE("point on the optical axis projects to the principal point", "[geometry]") {
    const auto rig = make_ring_rig(1, 0.0, 96, 96, 16, 90.0);
    // camera 0 looks along +x from the origin
    const auto p = project(rig, 0, Vec4{7.0, 0.0, 0.0, 1.0});
    REQUIRE_FALSE(p.behind);
    CHECK(p.u == Catch::Approx(48.0).margin(1e-9));
    CHECK(p.v == Catch::Approx(48.0).margin(1e-9));
}

TEST_CASE("project(unproject(p)) round-trips within 1e-9", "[geometry]") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        CameraRig rig({random_k(rng)}, 32, 32, 16);
        const std::size_t d = 3;
        std::vector<double> bins{rng.uniform(0.5, 2.0), rng.uniform(3.0, 8.0), rng.uniform(10.0, 40.0)};
        const auto grid = build_frustum_grid(rig, bins);
        const auto world = unproject(rig, 0, grid);
        for (std::size_t i = 0; i < grid.points.size(); ++i) {
            const auto back = project(rig, 0, world.pts[i]);
            for (int k = 0; k < 4; ++k) {
                CHECK(std::fabs(back.frustum[k] - grid.points[i][k]) < 1e-9);
            }
        }
        (void)d;
    }
}

TEST_CASE("unproject(project(w)) identity on random visible points", "[geometry]") {
    Rng rng(77);
    const auto rig = make_ring_rig(3, 1.0, 64, 64, 16, 100.0);
    int tested = 0;
    for (int i = 0; i < 500; ++i) {
        const Vec4 w{rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-5, 5), 1.0};
        for (std::size_t v = 0; v < rig.n_views; ++v) {
            const auto pr = project(rig, v, w);
            if (pr.behind) continue;
            const auto inv = mat4_inverse_lu(rig.k_mats[v]);
            REQUIRE(inv.has_value());
            const Vec4 back = mat4_apply(*inv, pr.frustum);
            for (int k = 0; k < 3; ++k) CHECK(std::fabs(back[k] - w[k]) < 1e-9);
            ++tested;
        }
    }
    CHECK(tested > 100);
}

TEST_CASE("singular K is rejected", "[geometry]") {
    Mat4 bad{};  // zero matrix
    CHECK_THROWS_AS(CameraRig({bad}, 32, 32, 16), GeometryError);
    CHECK_THROWS_AS(CameraRig({mat4_identity()}, 33, 32, 16), ParameterError);
}

TEST_CASE("normalization contract on the paper RoI", "[geometry]") {
    const RoI roi(-61.2, -61.2, -10.0, 61.2, 61.2, 10.0);
    const auto lo = roi.normalize(-61.2, -61.2, -10.0);
    CHECK(lo == std::array<double, 3>{0.0, 0.0, 0.0});
    const auto hi = roi.normalize(61.2, 61.2, 10.0);
    CHECK(hi == std::array<double, 3>{1.0, 1.0, 1.0});
    const auto mid = roi.normalize(0.0, 0.0, 0.0);
    CHECK(mid == std::array<double, 3>{0.5, 0.5, 0.5});
}

TEST_CASE("normalize_coords matches the scalar formula and keeps w=1", "[geometry]") {
    Rng rng(9);
    CameraRig rig({random_k(rng)}, 32, 32, 16);
    const auto grid = build_frustum_grid(rig, {1.0, 4.0});
    const auto raw = unproject(rig, 0, grid);
    const RoI roi(-10, -8, -2, 12, 9, 3);
    const auto g = normalize_coords(raw, roi);
    REQUIRE(g.chw.size() == 2 * 4 * 2 * 2);
    for (std::size_t di = 0; di < g.d; ++di)
        for (std::size_t hi = 0; hi < g.h; ++hi)
            for (std::size_t wi = 0; wi < g.w; ++wi) {
                const Vec4& p = raw.at(di, hi, wi);
                CHECK(g.at(di * 4 + 0, hi, wi) == (p[0] - roi.x_min) / (roi.x_max - roi.x_min));
                CHECK(g.at(di * 4 + 1, hi, wi) == (p[1] - roi.y_min) / (roi.y_max - roi.y_min));
                CHECK(g.at(di * 4 + 2, hi, wi) == (p[2] - roi.z_min) / (roi.z_max - roi.z_min));
                CHECK(g.at(di * 4 + 3, hi, wi) == 1.0);
            }
}

TEST_CASE("normalization is strictly monotone and unclipped", "[geometry]") {
    const RoI roi(-20, -20, -3, 20, 20, 3);
    const auto a = roi.normalize(-25.0, 0.0, 0.0);
    CHECK(a[0] < 0.0);  // out-of-RoI values leave [0,1] rather than clip
    const auto b = roi.normalize(30.0, 0.0, 0.0);
    CHECK(b[0] > 1.0);
    double prev = -1e30;
    for (double x = -30.0; x <= 30.0; x += 1.7) {
        const double n = roi.normalize(x, 0, 0)[0];
        CHECK(n > prev);
        prev = n;
    }
}

TEST_CASE("cell_matrix lays out rows per cell", "[geometry]") {
    CameraRig rig({mat4_identity()}, 32, 32, 16);
    const auto grid = build_frustum_grid(rig, {1.0, 2.0});
    const auto g = normalize_coords(unproject(rig, 0, grid), RoI(-10, -10, -10, 10, 10, 10));
    const auto m = g.cell_matrix();
    REQUIRE(m.size() == g.h * g.w * g.d * 4);
    for (std::size_t hi = 0; hi < g.h; ++hi)
        for (std::size_t wi = 0; wi < g.w; ++wi)
            for (std::size_t ch = 0; ch < g.d * 4; ++ch)
                CHECK(m[(hi * g.w + wi) * g.d * 4 + ch] == g.at(ch, hi, wi));
}
