#pragma once

// Full detector: tiny convolutional backbone, anchor-point query generator,
// DETR-style transformer decoder over the flattened position-aware features,
// and the classification/regression head with deep supervision.

#include <cmath>
#include <string>
#include <vector>

#include "petr/diffarray.hpp"
#include "petr/geometry.hpp"
#include "petr/nn.hpp"
#include "petr/posenc.hpp"
#include "petr/scenegen.hpp"

namespace petr {

enum class AnchorMode { none, fix_bev, fix_3d, learned_3d };

inline AnchorMode anchor_mode_from_string(const std::string& s) {
    if (s == "none") return AnchorMode::none;
    if (s == "fix_bev") return AnchorMode::fix_bev;
    if (s == "fix_3d") return AnchorMode::fix_3d;
    if (s == "learned_3d") return AnchorMode::learned_3d;
    throw ConfigError("unknown anchor_mode '" + s + "' (expected none|fix_bev|fix_3d|learned_3d)");
}

inline const char* anchor_mode_to_string(AnchorMode m) {
    switch (m) {
        case AnchorMode::none: return "none";
        case AnchorMode::fix_bev: return "fix_bev";
        case AnchorMode::fix_3d: return "fix_3d";
        default: return "learned_3d";
    }
}

struct PetrConfig {
    std::size_t n_views = 6;
    std::size_t image_w = 96, image_h = 96;
    std::size_t stride = 16;
    std::size_t feat_channels = 64;  // C_f
    std::size_t channels = 64;       // C
    std::size_t n_heads = 4;
    std::size_t n_layers = 3;        // L
    std::size_t n_classes = 4;
    std::size_t n_queries = 100;     // M (none / learned_3d modes)
    AnchorMode anchor_mode = AnchorMode::learned_3d;
    std::size_t fix_bev_side = 39;
    std::array<std::size_t, 3> fix_3d_dims{16, 16, 6};
    PEConfig pe{};
    DepthMode depth_mode = DepthMode::LID;
    double d_min = 1.0, d_max = 30.0;
    std::size_t depth_bins = 16;
    RoI roi{-20.0, -20.0, -3.0, 20.0, 20.0, 3.0};

    void validate() const {
        if (channels % n_heads != 0) {
            throw ConfigError("channels " + std::to_string(channels) + " not divisible by n_heads " +
                              std::to_string(n_heads));
        }
        if (channels % 4 != 0) throw ConfigError("channels must be divisible by 4");
        if (n_layers < 1) throw ConfigError("need at least one decoder layer");
        std::size_t s = stride;
        while (s > 1 && s % 2 == 0) s /= 2;
        if (s != 1) throw ConfigError("stride must be a power of two");
        pe.validate();
    }
};

// ----------------------------- backbone -----------------------------

// Stack of stride-2 3x3 convolutions, one per factor of two in the stride.
struct TinyBackbone {
    std::vector<Conv3x3> layers;

    TinyBackbone() = default;
    TinyBackbone(ParamSet& ps, std::size_t stride, std::size_t out_channels, Rng& rng) {
        std::size_t n_stages = 0;
        for (std::size_t s = stride; s > 1; s /= 2) ++n_stages;
        if (n_stages == 0) throw ConfigError("backbone stride must be >= 2");
        std::size_t cin = 3;
        for (std::size_t i = 0; i < n_stages; ++i) {
            const std::size_t cout = (i + 1 == n_stages) ? out_channels
                                                         : std::min<std::size_t>(16ULL << i, 128);
            layers.emplace_back(ps, "backbone.conv" + std::to_string(i), cin, cout, 2, rng);
            cin = cout;
        }
    }

    // (3, H, W) -> (C_f, H/s, W/s); ReLU between stages, last stage linear
    Array forward(Tape& t, const Array& image) const {
        Array x = image;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            x = layers[i].forward(t, x);
            if (i + 1 < layers.size()) x = t.relu(x);
        }
        return x;
    }

    // convenience: (3, H, W) -> (H_F*W_F, C_f) cell-major feature matrix
    Array forward_cells(Tape& t, const Array& image) const {
        Array f = forward(t, image);
        const std::size_t c = f.shape()[0], hw = f.shape()[1] * f.shape()[2];
        return t.transpose2d(t.reshape(f, {c, hw}));
    }
};

// ----------------------------- query generator -----------------------------

struct QuerySet {
    AnchorMode mode = AnchorMode::learned_3d;
    Array anchors;   // (M, 3); parameter for learned_3d, constant otherwise
    Array content;   // (M, C) learnable, only for mode none
    Linear mlp1, mlp2;
    std::size_t m = 0, channels = 0;

    QuerySet() = default;
    QuerySet(ParamSet& ps, const PetrConfig& cfg, Rng& rng)
        : mode(cfg.anchor_mode), channels(cfg.channels) {
        switch (mode) {
            case AnchorMode::none:
                m = cfg.n_queries;
                anchors = Array::zeros({m, 3});
                content = ps.add("queries.content", Array::gauss({m, cfg.channels}, 0.02, rng));
                break;
            case AnchorMode::fix_bev: {
                const std::size_t side = cfg.fix_bev_side;
                m = side * side;
                anchors = Array::zeros({m, 3});
                for (std::size_t i = 0; i < side; ++i)
                    for (std::size_t j = 0; j < side; ++j) {
                        double* row = anchors.data() + (i * side + j) * 3;
                        row[0] = side > 1 ? static_cast<double>(i) / static_cast<double>(side - 1) : 0.5;
                        row[1] = side > 1 ? static_cast<double>(j) / static_cast<double>(side - 1) : 0.5;
                        row[2] = 0.5;
                    }
                break;
            }
            case AnchorMode::fix_3d: {
                const auto d = cfg.fix_3d_dims;
                m = d[0] * d[1] * d[2];
                anchors = Array::zeros({m, 3});
                std::size_t r = 0;
                for (std::size_t i = 0; i < d[0]; ++i)
                    for (std::size_t j = 0; j < d[1]; ++j)
                        for (std::size_t k = 0; k < d[2]; ++k, ++r) {
                            double* row = anchors.data() + r * 3;
                            row[0] = d[0] > 1 ? static_cast<double>(i) / static_cast<double>(d[0] - 1) : 0.5;
                            row[1] = d[1] > 1 ? static_cast<double>(j) / static_cast<double>(d[1] - 1) : 0.5;
                            row[2] = d[2] > 1 ? static_cast<double>(k) / static_cast<double>(d[2] - 1) : 0.5;
                        }
                break;
            }
            case AnchorMode::learned_3d:
                m = cfg.n_queries;
                anchors = ps.add("queries.anchors", Array::uniform01({m, 3}, rng));
                break;
        }
        if (mode != AnchorMode::none) {
            mlp1 = Linear(ps, "queries.mlp1", 3, cfg.channels, rng);
            mlp2 = Linear(ps, "queries.mlp2", cfg.channels, cfg.channels, rng);
        }
    }

    // returns {Q_0, query_pe}; Q_0 starts at zero, anchor information rides
    // on the additive query position embedding
    std::pair<Array, Array> generate(Tape& t) const {
        Array q0 = Array::zeros({m, channels});
        if (mode == AnchorMode::none) {
            return {q0, t.add_scalar(content, 0.0)};
        }
        Array pe = mlp2.forward(t, t.relu(mlp1.forward(t, anchors)));
        return {q0, pe};
    }
};

// ----------------------------- attention / decoder -----------------------------

struct Mha {
    Linear wq, wk, wv, wo;
    std::size_t heads = 1, channels = 0;

    Mha() = default;
    Mha(ParamSet& ps, const std::string& prefix, std::size_t c, std::size_t n_heads, Rng& rng)
        : heads(n_heads), channels(c) {
        if (c % n_heads != 0) throw ConfigError("Mha: channels not divisible by heads");
        wq = Linear(ps, prefix + ".wq", c, c, rng);
        wk = Linear(ps, prefix + ".wk", c, c, rng);
        wv = Linear(ps, prefix + ".wv", c, c, rng);
        wo = Linear(ps, prefix + ".wo", c, c, rng);
    }

    Array forward(Tape& t, const Array& q_in, const Array& k_in, const Array& v_in,
                  std::vector<Array>* attn_out = nullptr) const {
        Array q = wq.forward(t, q_in);
        Array k = wk.forward(t, k_in);
        Array v = wv.forward(t, v_in);
        const std::size_t dh = channels / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Array> outs;
        outs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            Array qh = t.slice_cols(q, h * dh, (h + 1) * dh);
            Array kh = t.slice_cols(k, h * dh, (h + 1) * dh);
            Array vh = t.slice_cols(v, h * dh, (h + 1) * dh);
            Array scores = t.mul_scalar(t.matmul(qh, t.transpose2d(kh)), scale);
            Array attn = t.softmax(scores, 1);
            if (attn_out) attn_out->push_back(attn);
            outs.push_back(t.matmul(attn, vh));
        }
        return wo.forward(t, t.concat_cols(outs));
    }
};

struct DecoderLayer {
    Mha self_attn, cross_attn;
    Linear ff1, ff2;
    Array ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;

    DecoderLayer() = default;
    DecoderLayer(ParamSet& ps, const std::string& prefix, std::size_t c, std::size_t heads,
                 std::size_t ffn_hidden, Rng& rng) {
        self_attn = Mha(ps, prefix + ".self", c, heads, rng);
        cross_attn = Mha(ps, prefix + ".cross", c, heads, rng);
        ff1 = Linear(ps, prefix + ".ff1", c, ffn_hidden, rng);
        ff2 = Linear(ps, prefix + ".ff2", ffn_hidden, c, rng);
        ln1_g = ps.add(prefix + ".ln1.g", Array::full({c}, 1.0));
        ln1_b = ps.add(prefix + ".ln1.b", Array::zeros({c}));
        ln2_g = ps.add(prefix + ".ln2.g", Array::full({c}, 1.0));
        ln2_b = ps.add(prefix + ".ln2.b", Array::zeros({c}));
        ln3_g = ps.add(prefix + ".ln3.g", Array::full({c}, 1.0));
        ln3_b = ps.add(prefix + ".ln3.b", Array::zeros({c}));
    }

    // query self-attention (query PE on q and k), cross-attention over the
    // flattened 3D position-aware features, FFN; post-norm residuals
    Array forward(Tape& t, const Array& q_in, const Array& qpe, const Array& memory,
                  std::vector<Array>* attn_out = nullptr) const {
        Array qk = t.add(q_in, qpe);
        Array sa = self_attn.forward(t, qk, qk, q_in, attn_out);
        Array q = t.layernorm(t.add(q_in, sa), ln1_g, ln1_b);
        Array ca = cross_attn.forward(t, t.add(q, qpe), memory, memory, attn_out);
        q = t.layernorm(t.add(q, ca), ln2_g, ln2_b);
        Array ff = ff2.forward(t, t.relu(ff1.forward(t, q)));
        return t.layernorm(t.add(q, ff), ln3_g, ln3_b);
    }
};

struct DecoderStack {
    std::vector<DecoderLayer> layers;

    DecoderStack() = default;
    DecoderStack(ParamSet& ps, std::size_t n_layers, std::size_t c, std::size_t heads, Rng& rng) {
        const std::size_t ffn_hidden = 4 * c;
        for (std::size_t l = 0; l < n_layers; ++l) {
            layers.emplace_back(ps, "decoder.layer" + std::to_string(l), c, heads, ffn_hidden, rng);
        }
    }

    // all per-layer outputs retained for deep supervision
    std::vector<Array> forward(Tape& t, const Array& q0, const Array& qpe, const Array& memory,
                               std::vector<Array>* attn_out = nullptr) const {
        std::vector<Array> outs;
        Array q = q0;
        for (const auto& layer : layers) {
            q = layer.forward(t, q, qpe, memory, attn_out);
            outs.push_back(q);
        }
        return outs;
    }
};

// ----------------------------- head -----------------------------

// box regression layout: (dx, dy, dz, log w, log l, log h, sin yaw, cos yaw)
inline constexpr std::size_t kBoxDim = 8;

struct HeadOutput {
    Array class_logits;    // (M, n_classes)
    Array box_regression;  // (M, 8)
};

struct DetectionHead {
    Linear trunk, cls, reg;

    DetectionHead() = default;
    DetectionHead(ParamSet& ps, std::size_t c, std::size_t n_classes, Rng& rng) {
        trunk = Linear(ps, "head.trunk", c, c, rng);
        cls = Linear(ps, "head.cls", c, n_classes, rng);
        reg = Linear(ps, "head.reg", c, kBoxDim, rng);
    }

    HeadOutput forward(Tape& t, const Array& q) const {
        Array h = t.relu(trunk.forward(t, q));
        return HeadOutput{cls.forward(t, h), reg.forward(t, h)};
    }
};

// ----------------------------- box codec -----------------------------

inline std::array<double, kBoxDim> encode_box(const Box3D& gt, const double* anchor, const RoI& roi) {
    const auto n = roi.normalize(gt.center[0], gt.center[1], gt.center[2]);
    return {n[0] - anchor[0], n[1] - anchor[1], n[2] - anchor[2],
            std::log(gt.size[0]), std::log(gt.size[1]), std::log(gt.size[2]),
            std::sin(gt.yaw), std::cos(gt.yaw)};
}

inline Box3D decode_box(const double* reg, const double* anchor, const RoI& roi, int class_id) {
    Box3D b;
    const auto c = roi.denormalize(anchor[0] + reg[0], anchor[1] + reg[1], anchor[2] + reg[2]);
    b.center = {c[0], c[1], c[2]};
    b.size = {std::exp(reg[3]), std::exp(reg[4]), std::exp(reg[5])};
    b.yaw = std::atan2(reg[6], reg[7]);
    b.class_id = class_id;
    return b;
}

// ----------------------------- full model -----------------------------

class PetrModel {
public:
    PetrModel(const PetrConfig& cfg, const CameraRig& rig, std::uint64_t seed)
        : cfg_(cfg), rig_(rig) {
        cfg_.validate();
        if (rig.n_views != cfg.n_views || rig.image_w != cfg.image_w || rig.image_h != cfg.image_h ||
            rig.stride != cfg.stride) {
            throw ConfigError("PetrModel: rig geometry disagrees with the model config");
        }
        Rng rng(mix_seed(seed, 0x6d6f64656cULL));
        backbone_ = TinyBackbone(params_, cfg.stride, cfg.feat_channels, rng);
        posenc_ = PosEncoder(params_, cfg.pe, cfg.n_views, cfg.depth_bins, cfg.feat_channels,
                             rig.feat_h(), rig.feat_w(), rng);
        queries_ = QuerySet(params_, cfg, rng);
        decoder_ = DecoderStack(params_, cfg.n_layers, cfg.channels, cfg.n_heads, rng);
        head_ = DetectionHead(params_, cfg.channels, cfg.n_classes, rng);
        rebuild_coords();
    }

    const PetrConfig& config() const { return cfg_; }
    const CameraRig& rig() const { return rig_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    const QuerySet& queries() const { return queries_; }
    const Array& anchors() const { return queries_.anchors; }
    std::size_t n_queries() const { return queries_.m; }
    const PosEncoder& posenc() const { return posenc_; }

    // offline 3D coordinates: per-view (H*W, D*4) constants
    const std::vector<Array>& p3d_cells() const { return p3d_cells_; }

    Array image_to_array(const Images& imgs, std::size_t view) const {
        const std::size_t n = 3 * imgs.h * imgs.w;
        std::vector<double> buf(imgs.data.begin() + static_cast<long>(view * n),
                                imgs.data.begin() + static_cast<long>((view + 1) * n));
        return Array::from({3, imgs.h, imgs.w}, std::move(buf));
    }

    std::vector<Array> pe_maps(Tape& t) const {
        std::vector<Array> maps;
        for (std::size_t v = 0; v < cfg_.n_views; ++v) maps.push_back(posenc_.pe_for_view(t, v, p3d_cells_[v]));
        return maps;
    }

    // full forward pass: one HeadOutput per decoder layer
    std::vector<HeadOutput> forward(Tape& t, const Images& imgs,
                                    std::vector<Array>* attn_out = nullptr) const {
        if (imgs.n_views != cfg_.n_views || imgs.h != cfg_.image_h || imgs.w != cfg_.image_w) {
            throw DimensionError("forward: image stack (" + std::to_string(imgs.n_views) + ",3," +
                                 std::to_string(imgs.h) + "," + std::to_string(imgs.w) +
                                 ") vs configured (" + std::to_string(cfg_.n_views) + ",3," +
                                 std::to_string(cfg_.image_h) + "," + std::to_string(cfg_.image_w) + ")");
        }
        std::vector<Array> f2d, pes;
        for (std::size_t v = 0; v < cfg_.n_views; ++v) {
            f2d.push_back(backbone_.forward_cells(t, image_to_array(imgs, v)));
            pes.push_back(posenc_.pe_for_view(t, v, p3d_cells_[v]));
        }
        PosAwareFeatures f3d = posenc_.fuse(t, f2d, pes);
        auto [q0, qpe] = queries_.generate(t);
        std::vector<Array> layer_qs = decoder_.forward(t, q0, qpe, f3d.flat, attn_out);
        std::vector<HeadOutput> outs;
        outs.reserve(layer_qs.size());
        for (const Array& q : layer_qs) outs.push_back(head_.forward(t, q));
        return outs;
    }

    const TinyBackbone& backbone() const { return backbone_; }
    const DecoderStack& decoder() const { return decoder_; }
    const DetectionHead& head() const { return head_; }

private:
    void rebuild_coords() {
        const auto bins = make_depth_bins(cfg_.depth_mode, cfg_.d_min, cfg_.d_max, cfg_.depth_bins);
        const FrustumGrid grid = build_frustum_grid(rig_, bins);
        for (std::size_t v = 0; v < cfg_.n_views; ++v) {
            const WorldCoordGrid wg = normalize_coords(unproject(rig_, v, grid), cfg_.roi);
            p3d_cells_.push_back(Array::from({wg.h * wg.w, wg.d * 4}, wg.cell_matrix()));
        }
    }

    PetrConfig cfg_;
    CameraRig rig_;
    ParamSet params_;
    TinyBackbone backbone_;
    PosEncoder posenc_;
    QuerySet queries_;
    DecoderStack decoder_;
    DetectionHead head_;
    std::vector<Array> p3d_cells_;
};

}  // namespace petr
