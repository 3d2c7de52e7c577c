#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "petr/harness.hpp"
#include "petr/loss.hpp"
#include "petr/model.hpp"
#include "oracles.hpp"

using namespace petr;

namespace {

// micro configuration used across the model tests: 2 views of 16x16 images at
// stride 4 (two conv stages), 4x4 feature cells
RunConfig micro_config() {
    RunConfig cfg;
    cfg.n_views = 2;
    cfg.image_w = cfg.image_h = 16;
    cfg.stride = 4;
    cfg.feat_channels = 8;
    cfg.channels = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.n_classes = 2;
    cfg.n_queries = 3;
    cfg.depth_bins = 4;
    cfg.d_min = 1.0;
    cfg.d_max = 12.0;
    cfg.roi = {-10, -10, -2, 10, 10, 2};
    cfg.min_objects = 2;
    cfg.max_objects = 2;
    cfg.min_center_dist = 2.0;
    cfg.eval_scenes = 2;
    return cfg;
}

void set_identity(Array w) {
    REQUIRE(w.shape()[0] == w.shape()[1]);
    std::fill(w.vec().begin(), w.vec().end(), 0.0);
    for (std::size_t i = 0; i < w.shape()[0]; ++i) w.at2(i, i) = 1.0;
}

void set_zero(Array a) { std::fill(a.vec().begin(), a.vec().end(), 0.0); }

}  // namespace

TEST_CASE("backbone shape contract and zero-input collapse", "[model]") {
    ParamSet ps;
    Rng rng(1);
    TinyBackbone bb(ps, 16, 12, rng);
    Tape t;
    Array img = Array::zeros({3, 96, 96});
    Array f = bb.forward(t, img);
    CHECK(f.shape() == Shape{12, 6, 6});

    // zero biases + zero image -> exactly zero feature map, any padding
    for (auto& name : ps.names)
        if (name.ends_with(".b")) set_zero(*ps.find(name));
    Tape t2;
    Array f0 = bb.forward(t2, img);
    for (std::size_t i = 0; i < f0.size(); ++i) CHECK(f0.at(i) == 0.0);

    // deterministic: same input twice is bit-identical
    Tape t3;
    Array f1 = bb.forward(t3, img);
    CHECK(f0.vec() == f1.vec());
}

TEST_CASE("backbone gradcheck through two conv layers on 3x16x16", "[model]") {
    ParamSet ps;
    Rng rng(2);
    TinyBackbone bb(ps, 4, 6, rng);  // two stages
    REQUIRE(bb.layers.size() == 2);
    Rng drng(3);
    Array img = Array::uniform01({3, 16, 16}, drng);
    Array w = Array::gauss({6, 4, 4}, 1.0, drng);
    auto eval = [&] {
        Tape t;
        return t.sum(t.mul(bb.forward(t, img), w)).at(0);
    };
    ps.zero_grads();
    Tape t;
    t.backward(t.sum(t.mul(bb.forward(t, img), w)));
    std::vector<std::pair<std::string, Array>> arrays;
    for (std::size_t i = 0; i < ps.count(); ++i) arrays.emplace_back(ps.names[i], ps.arrays[i]);
    const auto rep = oracles::check_gradients(eval, arrays);
    INFO(rep.worst);
    CHECK(rep.max_err <= 1e-3);
}

TEST_CASE("query generator grid modes produce the paper-faithful counts", "[model]") {
    PetrConfig cfg;
    cfg.pe.channels = cfg.channels;
    cfg.pe.pe_hidden = 4 * cfg.channels;
    Rng rng(4);
    {
        ParamSet ps;
        cfg.anchor_mode = AnchorMode::fix_3d;
        QuerySet qs(ps, cfg, rng);
        CHECK(qs.m == 16 * 16 * 6);  // 1536
    }
    {
        ParamSet ps;
        cfg.anchor_mode = AnchorMode::fix_bev;
        QuerySet qs(ps, cfg, rng);
        CHECK(qs.m == 39 * 39);
        for (std::size_t i = 0; i < qs.m; ++i) {
            CHECK(qs.anchors.at2(i, 2) == 0.5);  // BEV grid sits at z = 0.5
            CHECK(qs.anchors.at2(i, 0) >= 0.0);
            CHECK(qs.anchors.at2(i, 0) <= 1.0);
        }
    }
    {
        ParamSet ps;
        cfg.anchor_mode = AnchorMode::learned_3d;
        cfg.n_queries = 1500;  // paper-faithful default
        QuerySet qs(ps, cfg, rng);
        CHECK(qs.m == 1500);
        for (std::size_t i = 0; i < qs.anchors.size(); ++i) {
            CHECK(qs.anchors.at(i) >= 0.0);
            CHECK(qs.anchors.at(i) < 1.0);
        }
    }
    {
        ParamSet ps;
        cfg.anchor_mode = AnchorMode::none;
        cfg.n_queries = 7;
        QuerySet qs(ps, cfg, rng);
        CHECK(qs.m == 7);
        CHECK(ps.find("queries.content") != nullptr);
        Tape t;
        auto [q0, qpe] = qs.generate(t);
        CHECK(q0.shape() == Shape{7, cfg.channels});
        CHECK(qpe.shape() == Shape{7, cfg.channels});
    }
}

TEST_CASE("identical anchor rows give identical query embeddings", "[model]") {
    PetrConfig cfg;
    cfg.n_queries = 5;
    cfg.pe.channels = cfg.channels;
    cfg.pe.pe_hidden = 4 * cfg.channels;
    ParamSet ps;
    Rng rng(6);
    QuerySet qs(ps, cfg, rng);
    for (int k = 0; k < 3; ++k) qs.anchors.at2(3, k) = qs.anchors.at2(1, k);
    Tape t;
    auto [q0, qpe] = qs.generate(t);
    for (std::size_t k = 0; k < cfg.channels; ++k) CHECK(qpe.at2(3, k) == qpe.at2(1, k));
    for (std::size_t i = 0; i < q0.size(); ++i) CHECK(q0.at(i) == 0.0);
}

TEST_CASE("uniform-attention decoder layer matches the closed form", "[model]") {
    const std::size_t c = 8, m = 3, keys = 5;
    ParamSet ps;
    Rng rng(7);
    DecoderLayer layer(ps, "dec", c, 1, 2 * c, rng);

    // self-attention contributes nothing (zero value/output projections);
    // cross-attention becomes uniform mean pooling (zero q/k, identity v/o)
    set_zero(layer.self_attn.wv.w);
    set_zero(layer.self_attn.wv.b);
    set_zero(layer.self_attn.wo.w);
    set_zero(layer.self_attn.wo.b);
    set_zero(layer.cross_attn.wq.w);
    set_zero(layer.cross_attn.wq.b);
    set_zero(layer.cross_attn.wk.w);
    set_zero(layer.cross_attn.wk.b);
    set_identity(layer.cross_attn.wv.w);
    set_zero(layer.cross_attn.wv.b);
    set_identity(layer.cross_attn.wo.w);
    set_zero(layer.cross_attn.wo.b);

    Rng drng(8);
    Array memory = Array::gauss({keys, c}, 1.0, drng);
    Array qpe = Array::gauss({m, c}, 1.0, drng);
    Array q0 = Array::zeros({m, c});
    Tape t;
    Array out = layer.forward(t, q0, qpe, memory);

    // oracle: layernormed FFN applied to the layernormed mean value vector
    auto ln = [&](std::vector<double> x, const Array& g, const Array& b) {
        double mu = 0, var = 0;
        for (double v : x) mu += v;
        mu /= static_cast<double>(x.size());
        for (double v : x) var += (v - mu) * (v - mu);
        var /= static_cast<double>(x.size());
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = g.at(i) * ((x[i] - mu) * inv) + b.at(i);
        return x;
    };
    std::vector<double> mean(c, 0.0);
    for (std::size_t kck = 0; kck < keys; ++kck)
        for (std::size_t j = 0; j < c; ++j) mean[j] += memory.at2(kck, j) / static_cast<double>(keys);
    // q after self block: LN(0 + 0) = 0; after cross block: LN(0 + mean)
    std::vector<double> q1 = ln(mean, layer.ln2_g, layer.ln2_b);
    // FFN
    const std::size_t hidden = layer.ff1.b.size();
    std::vector<double> mid(hidden, 0.0);
    for (std::size_t j = 0; j < hidden; ++j) {
        double s = layer.ff1.b.at(j);
        for (std::size_t i = 0; i < c; ++i) s += q1[i] * layer.ff1.w.at2(i, j);
        mid[j] = std::max(0.0, s);
    }
    std::vector<double> ffn(c, 0.0);
    for (std::size_t j = 0; j < c; ++j) {
        double s = layer.ff2.b.at(j);
        for (std::size_t i = 0; i < hidden; ++i) s += mid[i] * layer.ff2.w.at2(i, j);
        ffn[j] = q1[j] + s;
    }
    const std::vector<double> expect = ln(ffn, layer.ln3_g, layer.ln3_b);
    for (std::size_t qi = 0; qi < m; ++qi)
        for (std::size_t j = 0; j < c; ++j)
            CHECK(out.at2(qi, j) == Catch::Approx(expect[j]).margin(1e-12));
}

TEST_CASE("attention rows are probability distributions", "[model]") {
    ParamSet ps;
    Rng rng(9);
    DecoderStack dec(ps, 2, 8, 2, rng);
    Rng drng(10);
    Array memory = Array::gauss({7, 8}, 1.0, drng);
    Array qpe = Array::gauss({4, 8}, 1.0, drng);
    Tape t;
    std::vector<Array> attn;
    dec.forward(t, Array::zeros({4, 8}), qpe, memory, &attn);
    REQUIRE_FALSE(attn.empty());
    for (const Array& a : attn) {
        const std::size_t rows = a.shape()[0], cols = a.shape()[1];
        for (std::size_t i = 0; i < rows; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                CHECK(a.at2(i, j) >= 0.0);
                sum += a.at2(i, j);
            }
            CHECK(std::fabs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("cross-attention output is invariant to permuting the memory rows", "[model]") {
    ParamSet ps;
    Rng rng(11);
    DecoderStack dec(ps, 1, 8, 2, rng);
    Rng drng(12);
    const std::size_t keys = 6;
    Array memory = Array::gauss({keys, 8}, 1.0, drng);
    Array qpe = Array::gauss({3, 8}, 1.0, drng);

    const std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
    Array permuted = Array::zeros({keys, 8});
    for (std::size_t i = 0; i < keys; ++i)
        for (std::size_t j = 0; j < 8; ++j) permuted.at2(i, j) = memory.at2(perm[i], j);

    Tape t;
    Array a = dec.forward(t, Array::zeros({3, 8}), qpe, memory).back();
    Array b = dec.forward(t, Array::zeros({3, 8}), qpe, permuted).back();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.at(i) == Catch::Approx(b.at(i)).margin(1e-9));
}

TEST_CASE("head zero-weight collapse and box decode", "[model]") {
    ParamSet ps;
    Rng rng(13);
    DetectionHead head(ps, 8, 3, rng);
    for (auto& a : ps.arrays) set_zero(a);
    Rng drng(14);
    Tape t;
    auto out = head.forward(t, Array::gauss({4, 8}, 1.0, drng));
    for (std::size_t i = 0; i < out.class_logits.size(); ++i) CHECK(out.class_logits.at(i) == 0.0);
    Tape t2;
    Array probs = t2.sigmoid(out.class_logits);
    for (std::size_t i = 0; i < probs.size(); ++i) CHECK(probs.at(i) == 0.5);

    const RoI roi(-20, -20, -3, 20, 20, 3);
    const double anchor[3] = {0.25, 0.5, 0.75};
    // zero offsets decode to the de-normalized anchor
    const double reg0[8] = {0, 0, 0, std::log(2.0), std::log(3.0), std::log(1.5), 0, 1};
    const Box3D b0 = decode_box(reg0, anchor, roi, 1);
    CHECK(b0.center[0] == Catch::Approx(-10.0));
    CHECK(b0.center[1] == Catch::Approx(0.0));
    CHECK(b0.center[2] == Catch::Approx(1.5));
    CHECK(b0.size[0] == Catch::Approx(2.0));
    CHECK(b0.size[1] == Catch::Approx(3.0));
    CHECK(b0.size[2] == Catch::Approx(1.5));
    CHECK(b0.yaw == Catch::Approx(0.0));

    // planted yaw of 0.7 rad recovered through atan2(sin, cos)
    const double reg1[8] = {0.1, -0.1, 0.0, 0.0, 0.0, 0.0, std::sin(0.7), std::cos(0.7)};
    CHECK(decode_box(reg1, anchor, roi, 0).yaw == Catch::Approx(0.7).margin(1e-6));

    // encode/decode round-trip
    Box3D gt;
    gt.center = {3.0, -4.0, 1.0};
    gt.size = {2.5, 1.5, 1.2};
    gt.yaw = -2.1;
    gt.class_id = 2;
    const auto enc = encode_box(gt, anchor, roi);
    const Box3D back = decode_box(enc.data(), anchor, roi, gt.class_id);
    for (int k = 0; k < 3; ++k) {
        CHECK(back.center[k] == Catch::Approx(gt.center[k]).margin(1e-12));
        CHECK(back.size[k] == Catch::Approx(gt.size[k]).margin(1e-12));
    }
    CHECK(back.yaw == Catch::Approx(gt.yaw).margin(1e-12));
}

TEST_CASE("full model: deep supervision count and query permutation equivariance", "[model]") {
    RunConfig rc = micro_config();
    const Scene scene = make_train_scene(rc, rc.make_rig(), 0, 0);
    const Images imgs = render(scene);

    PetrModel model(rc.to_petr_config(), rc.make_rig(), 42);
    Tape t;
    const auto heads = model.forward(t, imgs);
    CHECK(heads.size() == rc.n_layers);

    // permute the learned anchors; outputs must permute identically
    const std::vector<std::size_t> perm{2, 0, 1};
    PetrModel model2(rc.to_petr_config(), rc.make_rig(), 42);  // identical init
    Array a1 = model.anchors();
    Array a2 = model2.anchors();
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (int k = 0; k < 3; ++k) a2.at2(i, k) = a1.at2(perm[i], k);
    Tape t2;
    const auto heads2 = model2.forward(t2, imgs);
    const auto& l1 = heads.back().class_logits;
    const auto& l2 = heads2.back().class_logits;
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t k = 0; k < l1.shape()[1]; ++k)
            CHECK(l2.at2(i, k) == Catch::Approx(l1.at2(perm[i], k)).margin(1e-12));
    const auto& r1 = heads.back().box_regression;
    const auto& r2 = heads2.back().box_regression;
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t k = 0; k < kBoxDim; ++k)
            CHECK(r2.at2(i, k) == Catch::Approx(r1.at2(perm[i], k)).margin(1e-12));
}

TEST_CASE("decoder layer gradcheck on 2 queries x 4 keys x 8 channels", "[model]") {
    ParamSet ps;
    Rng rng(15);
    DecoderLayer layer(ps, "dec", 8, 2, 16, rng);
    Rng drng(16);
    Array memory = Array::gauss({4, 8}, 1.0, drng);
    Array qpe = Array::gauss({2, 8}, 1.0, drng);
    Array q0 = Array::gauss({2, 8}, 1.0, drng);
    Array w = Array::gauss({2, 8}, 1.0, drng);
    auto eval = [&] {
        Tape t;
        return t.sum(t.mul(layer.forward(t, q0, qpe, memory), w)).at(0);
    };
    ps.zero_grads();
    q0.zero_grad();
    qpe.zero_grad();
    memory.zero_grad();
    Tape t;
    t.backward(t.sum(t.mul(layer.forward(t, q0, qpe, memory), w)));
    std::vector<std::pair<std::string, Array>> arrays{{"q0", q0}, {"qpe", qpe}, {"memory", memory}};
    for (std::size_t i = 0; i < ps.count(); ++i) arrays.emplace_back(ps.names[i], ps.arrays[i]);
    const auto rep = oracles::check_gradients(eval, arrays);
    INFO(rep.worst);
    CHECK(rep.max_err <= 1e-3);
}

TEST_CASE("model rejects mismatched rig and config", "[model]") {
    RunConfig rc = micro_config();
    auto wrong = rc;
    wrong.n_views = 3;
    CHECK_THROWS_AS(PetrModel(rc.to_petr_config(), wrong.make_rig(), 0), ConfigError);
    auto bad = rc;
    bad.n_heads = 3;  // does not divide channels
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
