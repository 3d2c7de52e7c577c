#pragma once

// Set-prediction criterion: Hungarian assignment on a focal+L1 cost,
// focal classification loss, L1 loss on the 8 box regression targets,
// and the lambda-weighted per-layer total.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "petr/diffarray.hpp"
#include "petr/model.hpp"

namespace petr {

constexpr double kFocalAlpha = 0.25;
constexpr double kFocalGamma = 2.0;

// (M predictions) x (G ground truths)
struct CostMatrix {
    std::size_t m = 0, g = 0;
    std::vector<double> values;  // row-major, values[i*g + j]

    CostMatrix() = default;
    CostMatrix(std::size_t m_, std::size_t g_) : m(m_), g(g_), values(m_ * g_, 0.0) {}

    double& at(std::size_t i, std::size_t j) { return values[i * g + j]; }
    double at(std::size_t i, std::size_t j) const { return values[i * g + j]; }
};

struct Assignment {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (prediction, gt)
    std::vector<std::size_t> unmatched_preds;
};

// Jonker-Volgenant style shortest augmenting path solver. Each ground truth
// is matched exactly once, predictions at most once (the prediction side acts
// as the implicit zero-cost padding of the rectangular problem). Requires
// G <= M and finite costs.
inline Assignment hungarian(const CostMatrix& cost) {
    for (double v : cost.values) {
        if (!std::isfinite(v)) throw ContractError("hungarian: non-finite cost entry");
    }
    if (cost.g > cost.m) {
        throw ContractError("hungarian: more ground truths (" + std::to_string(cost.g) +
                            ") than predictions (" + std::to_string(cost.m) + ")");
    }
    const std::size_t n = cost.g;  // rows assigned one by one
    const std::size_t m = cost.m;
    Assignment out;
    if (n == 0) {
        for (std::size_t i = 0; i < m; ++i) out.unmatched_preds.push_back(i);
        return out;
    }
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, kInf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            std::size_t j1 = 0;
            double delta = kInf;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost.at(j - 1, i0 - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<char> matched(m, 0);
    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j]) {
            out.pairs.emplace_back(j - 1, p[j] - 1);
            matched[j - 1] = 1;
        }
    }
    std::sort(out.pairs.begin(), out.pairs.end());
    for (std::size_t i = 0; i < m; ++i)
        if (!matched[i]) out.unmatched_preds.push_back(i);
    return out;
}

inline double assignment_cost(const CostMatrix& cost, const Assignment& a) {
    double s = 0.0;
    for (const auto& [i, j] : a.pairs) s += cost.at(i, j);
    return s;
}

// ----------------------------- focal loss -----------------------------

// target_class[i] is the matched class of prediction i, or -1 for all-negative.
// FL(p_t) = -alpha_t (1-p_t)^gamma log(p_t) summed over every prediction-class
// pair and normalized by the ground-truth count (floored at 1).
inline Array focal_loss(Tape& t, const Array& logits, const std::vector<int>& target_class,
                        double alpha = kFocalAlpha, double gamma = kFocalGamma) {
    if (logits.rank() != 2) throw DimensionError("focal_loss: logits must be (M, n_classes)");
    const std::size_t m = logits.shape()[0], k = logits.shape()[1];
    if (target_class.size() != m) throw DimensionError("focal_loss: one target per prediction required");

    Array tpos = Array::zeros({m, k});
    Array alpha_t = Array::full({m, k}, 1.0 - alpha);
    std::size_t n_gt = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const int c = target_class[i];
        if (c < 0) continue;
        if (static_cast<std::size_t>(c) >= k) throw ContractError("focal_loss: class id out of range");
        tpos.at2(i, static_cast<std::size_t>(c)) = 1.0;
        alpha_t.at2(i, static_cast<std::size_t>(c)) = alpha;
        ++n_gt;
    }
    Array tneg = Array::full({m, k}, 1.0);
    for (std::size_t i = 0; i < m * k; ++i) tneg.at(i) -= tpos.at(i);

    Array p = t.sigmoid(logits);
    Array one_minus_p = t.add_scalar(t.neg(p), 1.0);
    Array pt = t.add(t.mul(tpos, p), t.mul(tneg, one_minus_p));
    Array mod = t.powc(t.add_scalar(t.neg(pt), 1.0), gamma);
    Array nll = t.neg(t.log(t.clamp(pt, 1e-7, 1.0 - 1e-7)));
    Array fl = t.mul(alpha_t, t.mul(mod, nll));
    return t.mul_scalar(t.sum(fl), 1.0 / static_cast<double>(std::max<std::size_t>(n_gt, 1)));
}

// ----------------------------- L1 box loss -----------------------------

// Mean absolute difference over the 8 regression targets of the matched
// pairs, normalized by ground-truth count. Targets are encoded against the
// matched prediction's anchor, on-tape so learned anchors receive gradient.
inline Array l1_box_loss(Tape& t, const Array& box_regression, const Array& anchors,
                         const std::vector<Box3D>& gts, const Assignment& assign, const RoI& roi) {
    const std::size_t n_pairs = assign.pairs.size();
    if (n_pairs == 0) return Array::scalar(0.0);
    std::vector<std::size_t> pred_idx;
    pred_idx.reserve(n_pairs);
    Array gt_centers = Array::zeros({n_pairs, 3});
    Array gt_rest = Array::zeros({n_pairs, 5});
    for (std::size_t r = 0; r < n_pairs; ++r) {
        const auto [pi, gi] = assign.pairs[r];
        if (gi >= gts.size()) throw ContractError("l1_box_loss: assignment refers to missing gt");
        pred_idx.push_back(pi);
        const Box3D& g = gts[gi];
        const auto n = roi.normalize(g.center[0], g.center[1], g.center[2]);
        double* cr = gt_centers.data() + r * 3;
        cr[0] = n[0];
        cr[1] = n[1];
        cr[2] = n[2];
        double* rr = gt_rest.data() + r * 5;
        rr[0] = std::log(g.size[0]);
        rr[1] = std::log(g.size[1]);
        rr[2] = std::log(g.size[2]);
        rr[3] = std::sin(g.yaw);
        rr[4] = std::cos(g.yaw);
    }
    Array pred_rows = t.gather_rows(box_regression, pred_idx);
    Array anchor_rows = t.gather_rows(anchors, pred_idx);
    Array target_centers = t.sub(gt_centers, anchor_rows);
    const Array parts[2] = {target_centers, gt_rest};
    Array targets = t.concat_cols(parts);
    Array diff = t.abs(t.sub(pred_rows, targets));
    return t.mul_scalar(t.sum(diff), 1.0 / (8.0 * static_cast<double>(n_pairs)));
}

// ----------------------------- matching cost -----------------------------

// lambda * focal-style classification cost (DETR-with-focal pairwise form)
// plus the per-pair mean L1 over the 8 encoded regression targets.
inline CostMatrix build_cost(const HeadOutput& head, const Array& anchors,
                             const std::vector<Box3D>& gts, const RoI& roi, double lambda_cls,
                             double alpha = kFocalAlpha, double gamma = kFocalGamma) {
    const std::size_t m = head.class_logits.shape()[0];
    const std::size_t k = head.class_logits.shape()[1];
    CostMatrix cost(m, gts.size());
    for (std::size_t j = 0; j < gts.size(); ++j) {
        const Box3D& g = gts[j];
        if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= k) {
            throw ContractError("build_cost: gt class id out of range");
        }
        for (std::size_t i = 0; i < m; ++i) {
            const double logit = head.class_logits.at2(i, static_cast<std::size_t>(g.class_id));
            const double p = 1.0 / (1.0 + std::exp(-logit));
            const double pc = std::min(1.0 - 1e-7, std::max(1e-7, p));
            const double pos = alpha * std::pow(1.0 - p, gamma) * (-std::log(pc));
            const double neg = (1.0 - alpha) * std::pow(p, gamma) * (-std::log(1.0 - pc));
            const auto enc = encode_box(g, anchors.data() + i * 3, roi);
            double l1 = 0.0;
            for (std::size_t q = 0; q < kBoxDim; ++q)
                l1 += std::fabs(head.box_regression.at2(i, q) - enc[q]);
            cost.at(i, j) = lambda_cls * (pos - neg) + l1 / static_cast<double>(kBoxDim);
        }
    }
    return cost;
}

// ----------------------------- per-layer and total loss -----------------------------

struct LayerLoss {
    Assignment assign;
    Array cls;
    Array l1;
    Array total;
};

inline LayerLoss layer_loss_with_assignment(Tape& t, const HeadOutput& head, const Array& anchors,
                                            const std::vector<Box3D>& gts, const Assignment& assign,
                                            const RoI& roi, double lambda_cls) {
    const std::size_t m = head.class_logits.shape()[0];
    std::vector<int> target_class(m, -1);
    for (const auto& [pi, gi] : assign.pairs) target_class[pi] = gts[gi].class_id;
    LayerLoss out;
    out.assign = assign;
    out.cls = focal_loss(t, head.class_logits, target_class);
    out.l1 = l1_box_loss(t, head.box_regression, anchors, gts, assign, roi);
    out.total = t.add(t.mul_scalar(out.cls, lambda_cls), out.l1);
    return out;
}

inline LayerLoss layer_loss(Tape& t, const HeadOutput& head, const Array& anchors,
                            const std::vector<Box3D>& gts, const RoI& roi, double lambda_cls) {
    const Assignment assign = hungarian(build_cost(head, anchors, gts, roi, lambda_cls));
    return layer_loss_with_assignment(t, head, anchors, gts, assign, roi, lambda_cls);
}

// Fresh Hungarian assignment per decoder layer; per-layer losses summed.
inline Array total_loss(Tape& t, const std::vector<HeadOutput>& heads, const Array& anchors,
                        const std::vector<Box3D>& gts, const RoI& roi, double lambda_cls) {
    if (heads.empty()) throw ContractError("total_loss: no head outputs");
    if (lambda_cls <= 0.0) throw ParameterError("total_loss: lambda_cls must be positive");
    Array total;
    for (const HeadOutput& h : heads) {
        Array li = layer_loss(t, h, anchors, gts, roi, lambda_cls).total;
        total = total.defined() ? t.add(total, li) : li;
    }
    return total;
}

}  // namespace petr
