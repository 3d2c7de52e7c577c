#pragma once

// 3D position encoder: turns per-view normalized coordinate stacks into
// position embeddings, combines them with the optional 2D sinusoidal and
// per-view embeddings, and fuses the result with the image features.

#include <cmath>
#include <string>
#include <vector>

#include "petr/diffarray.hpp"
#include "petr/geometry.hpp"
#include "petr/nn.hpp"

namespace petr {

enum class Fusion { add, concat, multiply };

inline Fusion fusion_from_string(const std::string& s) {
    if (s == "add") return Fusion::add;
    if (s == "concat") return Fusion::concat;
    if (s == "multiply") return Fusion::multiply;
    throw ConfigError("unknown fusion mode '" + s + "' (expected add|concat|multiply)");
}

inline const char* fusion_to_string(Fusion f) {
    switch (f) {
        case Fusion::add: return "add";
        case Fusion::concat: return "concat";
        default: return "multiply";
    }
}

struct PEConfig {
    bool use_2d = false;
    bool use_mv = false;
    bool use_3d = true;
    bool none = false;  // explicit no-PE baseline
    Fusion fusion = Fusion::add;
    std::size_t channels = 64;   // C
    std::size_t pe_hidden = 256; // MLP hidden width, 4*C by convention

    void validate() const {
        if (none) {
            if (use_2d || use_mv || use_3d) {
                throw ConfigError("PEConfig: pe_none excludes the other PE flags");
            }
            return;
        }
        if (!use_2d && !use_mv && !use_3d) {
            throw ConfigError("PEConfig: enable at least one PE flag or set pe_none");
        }
    }
};

// Fixed DETR-style sinusoidal embedding over (row, col): first C/2 channels
// encode the row, the rest the column, sin/cos pairs with temperature 10000.
inline Array encode_2d_pe(std::size_t h, std::size_t w, std::size_t c) {
    if (c % 4 != 0) {
        throw ParameterError("encode_2d_pe: channel count " + std::to_string(c) + " not divisible by 4");
    }
    constexpr double kTemp = 10000.0;
    const std::size_t half = c / 2, pairs = c / 4;
    Array out = Array::zeros({h * w, c});
    for (std::size_t hi = 0; hi < h; ++hi) {
        const double py = (static_cast<double>(hi) + 0.5) / static_cast<double>(h) * 2.0 * M_PI;
        for (std::size_t wi = 0; wi < w; ++wi) {
            const double px = (static_cast<double>(wi) + 0.5) / static_cast<double>(w) * 2.0 * M_PI;
            double* row = out.data() + (hi * w + wi) * c;
            for (std::size_t k = 0; k < pairs; ++k) {
                const double div = std::pow(kTemp, 2.0 * static_cast<double>(k) / static_cast<double>(half));
                row[2 * k] = std::sin(py / div);
                row[2 * k + 1] = std::cos(py / div);
                row[half + 2 * k] = std::sin(px / div);
                row[half + 2 * k + 1] = std::cos(px / div);
            }
        }
    }
    return out;
}

// Per-view fused features, both per-view and flattened for the decoder.
// Flattening order is fixed: (view, row, col).
struct PosAwareFeatures {
    std::vector<Array> per_view;  // each (H_F*W_F, C)
    Array flat;                   // (N*H_F*W_F, C)
    std::size_t n_views = 0, h = 0, w = 0, c = 0;

    std::size_t flat_index(std::size_t view, std::size_t row, std::size_t col) const {
        return (view * h + row) * w + col;
    }
};

class PosEncoder {
public:
    PosEncoder() = default;

    PosEncoder(ParamSet& ps, const PEConfig& cfg, std::size_t n_views, std::size_t d_bins,
               std::size_t feat_channels, std::size_t feat_h, std::size_t feat_w, Rng& rng)
        : cfg_(cfg), n_views_(n_views), h_(feat_h), w_(feat_w) {
        cfg_.validate();
        proj_ = Linear(ps, "posenc.proj", feat_channels, cfg.channels, rng);
        if (cfg_.use_3d) {
            pe1_ = Linear(ps, "posenc.pe_mlp1", d_bins * 4, cfg.pe_hidden, rng);
            pe2_ = Linear(ps, "posenc.pe_mlp2", cfg.pe_hidden, cfg.channels, rng);
        }
        if (cfg_.use_mv) {
            mv_ = ps.add("posenc.mv", Array::gauss({n_views, cfg.channels}, 0.02, rng));
        }
        if (cfg_.fusion == Fusion::concat) {
            cat_reduce_ = Linear(ps, "posenc.cat_reduce", 2 * cfg.channels, cfg.channels, rng);
        }
        if (cfg_.use_2d) pe2d_ = encode_2d_pe(h_, w_, cfg.channels);
    }

    const PEConfig& config() const { return cfg_; }

    // Pointwise MLP over the (D*4)-dim coordinate stack of each cell.
    Array encode_3d_pe(Tape& t, const Array& p3d_cells) const {
        if (p3d_cells.shape()[1] != pe1_.w.shape()[0]) {
            throw DimensionError("encode_3d_pe: coordinate channels " +
                                 std::to_string(p3d_cells.shape()[1]) + " vs MLP input " +
                                 std::to_string(pe1_.w.shape()[0]));
        }
        return pe2_.forward(t, t.relu(pe1_.forward(t, p3d_cells)));
    }

    // Learnable per-view vector, shape (1, C)
    Array encode_mv_prior(Tape& t, std::size_t view) const {
        if (view >= n_views_) throw ParameterError("encode_mv_prior: view out of range");
        return t.gather_rows(mv_, {view});
    }

    // Sum of the enabled embeddings for one view, (H*W, C). Zero map when the
    // explicit none baseline is configured.
    Array pe_for_view(Tape& t, std::size_t view, const Array& p3d_cells) const {
        Array pe = Array::zeros({h_ * w_, cfg_.channels});
        bool any = false;
        if (cfg_.use_3d) {
            pe = encode_3d_pe(t, p3d_cells);
            any = true;
        }
        if (cfg_.use_2d) {
            pe = any ? t.add(pe, pe2d_) : t.add_scalar(pe2d_, 0.0);
            any = true;
        }
        if (cfg_.use_mv) {
            Array row = t.reshape(encode_mv_prior(t, view), {cfg_.channels});
            pe = t.add_rowvec(pe, row);
        }
        return pe;
    }

    // Fuse projected image features with the PE maps and flatten across views.
    PosAwareFeatures fuse(Tape& t, const std::vector<Array>& f2d_views,
                          const std::vector<Array>& pe_views) const {
        if (f2d_views.size() != n_views_ || pe_views.size() != n_views_) {
            throw DimensionError("fuse: expected " + std::to_string(n_views_) + " views");
        }
        PosAwareFeatures out;
        out.n_views = n_views_;
        out.h = h_;
        out.w = w_;
        out.c = cfg_.channels;
        for (std::size_t v = 0; v < n_views_; ++v) {
            Array f = proj_.forward(t, f2d_views[v]);
            if (f.shape() != pe_views[v].shape()) {
                throw DimensionError("fuse: feature shape " + shape_str(f.shape()) + " vs PE shape " +
                                     shape_str(pe_views[v].shape()));
            }
            Array fused;
            switch (cfg_.fusion) {
                case Fusion::add:
                    fused = t.add(f, pe_views[v]);
                    break;
                case Fusion::multiply:
                    fused = t.mul(f, pe_views[v]);
                    break;
                case Fusion::concat: {
                    const Array parts[2] = {f, pe_views[v]};
                    fused = cat_reduce_.forward(t, t.concat_cols(parts));
                    break;
                }
            }
            out.per_view.push_back(fused);
        }
        out.flat = t.concat_rows(out.per_view);
        return out;
    }

    std::size_t feat_h() const { return h_; }
    std::size_t feat_w() const { return w_; }

private:
    PEConfig cfg_;
    std::size_t n_views_ = 0, h_ = 0, w_ = 0;
    Linear proj_, pe1_, pe2_, cat_reduce_;
    Array mv_;
    Array pe2d_;
};

// Cosine similarity between the PE vector at (view, h, w) and every PE vector
// of every view; zero-norm vectors compare as 0.
inline std::vector<std::vector<double>> pe_similarity_map(const std::vector<Array>& pe_views,
                                                          std::size_t h, std::size_t w,
                                                          std::size_t anchor_view,
                                                          std::size_t anchor_h, std::size_t anchor_w) {
    if (anchor_view >= pe_views.size() || anchor_h >= h || anchor_w >= w) {
        throw ParameterError("pe_similarity_map: anchor indices out of range");
    }
    const std::size_t c = pe_views[anchor_view].shape()[1];
    const double* a = pe_views[anchor_view].data() + (anchor_h * w + anchor_w) * c;
    double an = 0.0;
    for (std::size_t i = 0; i < c; ++i) an += a[i] * a[i];
    an = std::sqrt(an);

    std::vector<std::vector<double>> maps;
    for (const auto& pe : pe_views) {
        std::vector<double> m(h * w, 0.0);
        for (std::size_t cell = 0; cell < h * w; ++cell) {
            const double* b = pe.data() + cell * c;
            double bn = 0.0, dot = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
                bn += b[i] * b[i];
                dot += a[i] * b[i];
            }
            bn = std::sqrt(bn);
            m[cell] = (an > 0.0 && bn > 0.0) ? dot / (an * bn) : 0.0;
        }
        maps.push_back(std::move(m));
    }
    return maps;
}

}  // namespace petr
