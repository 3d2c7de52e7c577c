#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "petr/posenc.hpp"
#include "petr/scenegen.hpp"
#include "oracles.hpp"

using namespace petr;

namespace {

struct Fixture {
    ParamSet ps;
    Rng rng{17};
    std::size_t h = 2, w = 3, d = 2, cf = 5, c = 8;
    PosEncoder enc;

    explicit Fixture(PEConfig cfg = {}) {
        cfg.channels = 8;
        cfg.pe_hidden = 16;
        enc = PosEncoder(ps, cfg, /*n_views=*/2, d, cf, h, w, rng);
    }
};

Array random_cells(Rng& rng, std::size_t hw, std::size_t cols) {
    return Array::uniform01({hw, cols}, rng);
}

}  // namespace

TEST_CASE("encode_3d_pe is pointwise", "[posenc]") {
    Fixture f;
    Array cells = random_cells(f.rng, f.h * f.w, f.d * 4);
    // make two cells identical
    for (std::size_t k = 0; k < f.d * 4; ++k) cells.at2(4, k) = cells.at2(1, k);
    Tape t;
    Array pe = f.enc.encode_3d_pe(t, cells);
    REQUIRE(pe.shape() == Shape{f.h * f.w, f.c});
    for (std::size_t k = 0; k < f.c; ++k) CHECK(pe.at2(4, k) == pe.at2(1, k));
}

TEST_CASE("encode_3d_pe collapses to the bias when the second layer is zeroed", "[posenc]") {
    Fixture f;
    Array* w2 = f.ps.find("posenc.pe_mlp2.w");
    Array* b2 = f.ps.find("posenc.pe_mlp2.b");
    REQUIRE(w2);
    REQUIRE(b2);
    std::fill(w2->vec().begin(), w2->vec().end(), 0.0);
    for (std::size_t i = 0; i < b2->size(); ++i) b2->at(i) = 0.1 * static_cast<double>(i);
    Tape t;
    Array pe = f.enc.encode_3d_pe(t, random_cells(f.rng, f.h * f.w, f.d * 4));
    for (std::size_t r = 0; r < f.h * f.w; ++r)
        for (std::size_t k = 0; k < f.c; ++k) CHECK(pe.at2(r, k) == b2->at(k));
}

TEST_CASE("encode_3d_pe matches a per-cell scalar-loop oracle", "[posenc]") {
    Fixture f;
    Array cells = random_cells(f.rng, f.h * f.w, f.d * 4);
    Tape t;
    Array pe = f.enc.encode_3d_pe(t, cells);

    const Array& w1 = *f.ps.find("posenc.pe_mlp1.w");
    const Array& b1 = *f.ps.find("posenc.pe_mlp1.b");
    const Array& w2 = *f.ps.find("posenc.pe_mlp2.w");
    const Array& b2 = *f.ps.find("posenc.pe_mlp2.b");
    const std::size_t hidden = b1.size();
    for (std::size_t r = 0; r < f.h * f.w; ++r) {
        std::vector<double> mid(hidden, 0.0);
        for (std::size_t j = 0; j < hidden; ++j) {
            double s = b1.at(j);
            for (std::size_t i = 0; i < f.d * 4; ++i) s += cells.at2(r, i) * w1.at2(i, j);
            mid[j] = std::max(0.0, s);
        }
        for (std::size_t k = 0; k < f.c; ++k) {
            double s = b2.at(k);
            for (std::size_t j = 0; j < hidden; ++j) s += mid[j] * w2.at2(j, k);
            CHECK(std::fabs(pe.at2(r, k) - s) < 1e-12);
        }
    }
}

TEST_CASE("encode_3d_pe commutes with spatial permutation", "[posenc]") {
    Fixture f;
    Array cells = random_cells(f.rng, f.h * f.w, f.d * 4);
    const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    Array permuted = Array::zeros(cells.shape());
    for (std::size_t r = 0; r < perm.size(); ++r)
        for (std::size_t k = 0; k < f.d * 4; ++k) permuted.at2(r, k) = cells.at2(perm[r], k);
    Tape t;
    Array pe = f.enc.encode_3d_pe(t, cells);
    Array pe_perm = f.enc.encode_3d_pe(t, permuted);
    for (std::size_t r = 0; r < perm.size(); ++r)
        for (std::size_t k = 0; k < f.c; ++k) CHECK(pe_perm.at2(r, k) == pe.at2(perm[r], k));
}

TEST_CASE("2D sinusoidal embedding contracts", "[posenc]") {
    const Array a = encode_2d_pe(3, 4, 16);
    const Array b = encode_2d_pe(3, 4, 16);
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);

    // distinguishes neighboring cells
    bool differs = false;
    for (std::size_t k = 0; k < 16; ++k) differs |= a.at2(0, k) != a.at2(1, k);
    CHECK(differs);

    // per-position channel norms identical (sin^2 + cos^2 pairing)
    double ref = 0.0;
    for (std::size_t r = 0; r < 12; ++r) {
        double n = 0.0;
        for (std::size_t k = 0; k < 16; ++k) n += a.at2(r, k) * a.at2(r, k);
        if (r == 0) ref = n;
        CHECK(std::fabs(n - ref) < 1e-9);
    }

    CHECK_THROWS_AS(encode_2d_pe(3, 4, 18), ParameterError);
}

TEST_CASE("multi-view prior distinguishes views and learns", "[posenc]") {
    PEConfig cfg;
    cfg.use_3d = false;
    cfg.use_mv = true;
    Fixture f(cfg);
    Tape t;
    Array v0 = f.enc.encode_mv_prior(t, 0);
    Array v1 = f.enc.encode_mv_prior(t, 1);
    bool differs = false;
    for (std::size_t k = 0; k < f.c; ++k) differs |= v0.at(k) != v1.at(k);
    CHECK(differs);

    // broadcastable into a (H*W, C) map
    Array dummy = Array::zeros({f.h * f.w, f.d * 4});
    Array map = f.enc.pe_for_view(t, 0, dummy);
    CHECK(map.shape() == Shape{f.h * f.w, f.c});

    // one optimizer step with a nonzero grad changes the vector
    Array* mv = f.ps.find("posenc.mv");
    REQUIRE(mv);
    const std::vector<double> before = mv->vec();
    Tape t2;
    Array loss = t2.sum(f.enc.pe_for_view(t2, 1, dummy));
    f.ps.zero_grads();
    t2.backward(loss);
    AdamWState st;
    adamw_step(f.ps.arrays, st, 1e-2, 0.0);
    bool changed = false;
    for (std::size_t i = f.c; i < 2 * f.c; ++i) changed |= mv->vec()[i] != before[i];
    CHECK(changed);
    // view 0's vector took no gradient from a view-1 loss
    for (std::size_t i = 0; i < f.c; ++i) CHECK(mv->grad_at(i) == 0.0);
}

TEST_CASE("fuse identities for add and multiply", "[posenc]") {
    for (const Fusion mode : {Fusion::add, Fusion::multiply}) {
        PEConfig cfg;
        cfg.fusion = mode;
        Fixture f(cfg);
        Array f2d_a = random_cells(f.rng, f.h * f.w, f.cf);
        Array f2d_b = random_cells(f.rng, f.h * f.w, f.cf);
        const double neutral = mode == Fusion::add ? 0.0 : 1.0;
        std::vector<Array> pes{Array::full({f.h * f.w, f.c}, neutral),
                               Array::full({f.h * f.w, f.c}, neutral)};
        Tape t;
        auto out = f.enc.fuse(t, {f2d_a, f2d_b}, pes);

        const Array& pw = *f.ps.find("posenc.proj.w");
        const Array& pb = *f.ps.find("posenc.proj.b");
        const auto projected =
            oracles::naive_matmul(f2d_a.vec(), pw.vec(), f.h * f.w, f.cf, f.c);
        for (std::size_t r = 0; r < f.h * f.w; ++r)
            for (std::size_t k = 0; k < f.c; ++k)
                CHECK(out.per_view[0].at2(r, k) ==
                      Catch::Approx(projected[r * f.c + k] + pb.at(k)).margin(1e-12));
    }
}

TEST_CASE("fuse concat matches an explicit block-matrix oracle", "[posenc]") {
    PEConfig cfg;
    cfg.fusion = Fusion::concat;
    Fixture f(cfg);
    Array f2d = random_cells(f.rng, f.h * f.w, f.cf);
    Array pe = random_cells(f.rng, f.h * f.w, f.c);
    Tape t;
    auto out = f.enc.fuse(t, {f2d, f2d}, {pe, pe});
    REQUIRE(out.per_view[0].shape() == Shape{f.h * f.w, f.c});  // back to C channels

    const Array& pw = *f.ps.find("posenc.proj.w");
    const Array& pb = *f.ps.find("posenc.proj.b");
    const Array& cw = *f.ps.find("posenc.cat_reduce.w");
    const Array& cb = *f.ps.find("posenc.cat_reduce.b");
    // fused = [proj(f2d) | pe] * Wcat + bcat = proj(f2d)*Wtop + pe*Wbot + bcat
    for (std::size_t r = 0; r < f.h * f.w; ++r) {
        for (std::size_t k = 0; k < f.c; ++k) {
            double expect = cb.at(k);
            for (std::size_t j = 0; j < f.c; ++j) {
                double proj = pb.at(j);
                for (std::size_t i = 0; i < f.cf; ++i) proj += f2d.at2(r, i) * pw.at2(i, j);
                expect += proj * cw.at2(j, k);
                expect += pe.at2(r, j) * cw.at2(f.c + j, k);
            }
            CHECK(out.per_view[0].at2(r, k) == Catch::Approx(expect).margin(1e-10));
        }
    }
}

TEST_CASE("fuse(add) responds linearly to increments of either argument", "[posenc]") {
    Fixture f;
    Array f2d = random_cells(f.rng, f.h * f.w, f.cf);
    Array pe = random_cells(f.rng, f.h * f.w, f.c);
    Array dpe = random_cells(f.rng, f.h * f.w, f.c);
    Tape t;
    Array base = f.enc.fuse(t, {f2d, f2d}, {pe, pe}).per_view[0];
    Array shifted = f.enc.fuse(t, {f2d, f2d}, {t.add(pe, dpe), pe}).per_view[0];
    // PE increments pass through untouched
    for (std::size_t i = 0; i < base.size(); ++i)
        CHECK(shifted.at(i) - base.at(i) == Catch::Approx(dpe.at(i)).margin(1e-12));

    // feature increments pass through the learned projection (no bias)
    Array df = random_cells(f.rng, f.h * f.w, f.cf);
    Array shifted_f = f.enc.fuse(t, {t.add(f2d, df), f2d}, {pe, pe}).per_view[0];
    const Array& pw = *f.ps.find("posenc.proj.w");
    const auto delta = oracles::naive_matmul(df.vec(), pw.vec(), f.h * f.w, f.cf, f.c);
    for (std::size_t i = 0; i < base.size(); ++i)
        CHECK(shifted_f.at(i) - base.at(i) == Catch::Approx(delta[i]).margin(1e-10));
}

TEST_CASE("flattening is a bijection in (view, row, col) order", "[posenc]") {
    Fixture f;
    std::vector<Array> f2d{random_cells(f.rng, f.h * f.w, f.cf), random_cells(f.rng, f.h * f.w, f.cf)};
    std::vector<Array> pes{random_cells(f.rng, f.h * f.w, f.c), random_cells(f.rng, f.h * f.w, f.c)};
    Tape t;
    auto out = f.enc.fuse(t, f2d, pes);
    REQUIRE(out.flat.shape() == Shape{2 * f.h * f.w, f.c});
    for (std::size_t v = 0; v < 2; ++v)
        for (std::size_t r = 0; r < f.h; ++r)
            for (std::size_t col = 0; col < f.w; ++col)
                for (std::size_t k = 0; k < f.c; ++k) {
                    const std::size_t fi = out.flat_index(v, r, col);
                    CHECK(out.flat.at2(fi, k) == out.per_view[v].at2(r * f.w + col, k));
                }
}

TEST_CASE("pe similarity of the anchor with itself is 1", "[posenc]") {
    Rng rng(5);
    std::vector<Array> pes{Array::gauss({6, 4}, 1.0, rng), Array::gauss({6, 4}, 1.0, rng)};
    const auto maps = pe_similarity_map(pes, 2, 3, 0, 1, 2);
    REQUIRE(maps.size() == 2);
    CHECK(maps[0][1 * 3 + 2] == Catch::Approx(1.0).margin(1e-12));
    for (const auto& m : maps)
        for (double v : m) {
            CHECK(v >= -1.0 - 1e-12);
            CHECK(v <= 1.0 + 1e-12);
        }
}

TEST_CASE("pe similarity handles anti-parallel and zero vectors", "[posenc]") {
    Array a = Array::from({2, 3}, {1, 2, 3, 0, 0, 0});
    Array b = Array::from({2, 3}, {-2, -4, -6, 5, 5, 5});
    const auto maps = pe_similarity_map({a, b}, 1, 2, 0, 0, 0);
    CHECK(maps[1][0] == Catch::Approx(-1.0).margin(1e-12));
    CHECK(maps[0][1] == 0.0);  // zero-norm cell compares as 0
}

TEST_CASE("3D PE of nearby cross-view cells beats random pairs", "[posenc]") {
    const auto rig = make_ring_rig(6, 1.0, 96, 96, 16, 90.0);
    const auto bins = make_depth_bins(DepthMode::LID, 1.0, 30.0, 8);
    const RoI roi(-20, -20, -3, 20, 20, 3);

    ParamSet ps;
    Rng rng(3);
    PEConfig cfg;
    cfg.channels = 32;
    cfg.pe_hidden = 128;
    PosEncoder enc(ps, cfg, rig.n_views, bins.size(), 16, rig.feat_h(), rig.feat_w(), rng);

    const FrustumGrid grid = build_frustum_grid(rig, bins);
    std::vector<Array> pe_views;
    Tape t;
    for (std::size_t v = 0; v < rig.n_views; ++v) {
        const auto wg = normalize_coords(unproject(rig, v, grid), roi);
        pe_views.push_back(enc.encode_3d_pe(t, Array::from({wg.h * wg.w, wg.d * 4}, wg.cell_matrix())));
    }
    const auto stats = oracles::pe_neighbor_stats(pe_views, rig, bins, 2.0);
    INFO("close " << stats.close_mean << " over " << stats.close_pairs << " pairs, random "
                  << stats.random_mean);
    REQUIRE(stats.close_pairs > 0);
    CHECK(stats.close_mean > stats.random_mean);
}
