#pragma once

// Desk-scale detection metrics: per-class greedy center-distance matching at
// thresholds {0.5, 1, 2, 4} m, 11-point interpolated AP, and the mean
// translation error of true positives at the 2 m threshold.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "petr/model.hpp"

namespace petr {

inline constexpr std::array<double, 4> kApThresholds{0.5, 1.0, 2.0, 4.0};

struct Detection {
    std::size_t scene = 0;
    int class_id = 0;
    double score = 0.0;
    std::array<double, 3> center{};
};

struct GtRecord {
    std::size_t scene = 0;
    int class_id = 0;
    std::array<double, 3> center{};
};

struct MetricsReport {
    std::array<double, 4> ap{};  // per threshold
    double mean_ap = 0.0;
    double mate = std::numeric_limits<double>::quiet_NaN();  // TP center error at 2 m
};

namespace detail {

inline double center_dist(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// greedy by descending score; each detection takes the nearest unmatched gt
// of its class in its scene within the threshold
inline void match_class(const std::vector<const Detection*>& dets, const std::vector<const GtRecord*>& gts,
                        double threshold, std::vector<char>& is_tp, std::vector<double>& tp_dist) {
    std::vector<char> taken(gts.size(), 0);
    is_tp.assign(dets.size(), 0);
    tp_dist.clear();
    for (std::size_t d = 0; d < dets.size(); ++d) {
        double best = threshold;
        std::size_t best_g = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g]->scene != dets[d]->scene) continue;
            const double dist = center_dist(dets[d]->center, gts[g]->center);
            if (dist <= best) {
                best = dist;
                best_g = g;
            }
        }
        if (best_g < gts.size()) {
            taken[best_g] = 1;
            is_tp[d] = 1;
            tp_dist.push_back(best);
        }
    }
}

// 11-point interpolated AP from per-detection TP flags (already score-sorted)
inline double ap_11point(const std::vector<char>& is_tp, std::size_t n_gt) {
    if (n_gt == 0) return 0.0;
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < is_tp.size(); ++i) {
        if (is_tp[i]) ++tp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    double ap = 0.0;
    for (int k = 0; k <= 10; ++k) {
        const double r = static_cast<double>(k) / 10.0;
        double pmax = 0.0;
        for (std::size_t i = 0; i < precision.size(); ++i) {
            if (recall[i] >= r) pmax = std::max(pmax, precision[i]);
        }
        ap += pmax;
    }
    return ap / 11.0;
}

}  // namespace detail

inline MetricsReport compute_metrics(std::vector<Detection> dets, const std::vector<GtRecord>& gts,
                                     int n_classes) {
    // deterministic score ordering: score desc, then scene, then center
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.scene < b.scene;
    });

    MetricsReport rep;
    std::vector<double> all_tp_dists_at2;
    for (std::size_t ti = 0; ti < kApThresholds.size(); ++ti) {
        const double thr = kApThresholds[ti];
        double ap_sum = 0.0;
        int classes_with_gt = 0;
        for (int c = 0; c < n_classes; ++c) {
            std::vector<const Detection*> cd;
            for (const auto& d : dets)
                if (d.class_id == c) cd.push_back(&d);
            std::vector<const GtRecord*> cg;
            for (const auto& g : gts)
                if (g.class_id == c) cg.push_back(&g);
            if (cg.empty()) continue;
            ++classes_with_gt;
            std::vector<char> is_tp;
            std::vector<double> tp_dist;
            detail::match_class(cd, cg, thr, is_tp, tp_dist);
            ap_sum += detail::ap_11point(is_tp, cg.size());
            if (thr == 2.0) {
                all_tp_dists_at2.insert(all_tp_dists_at2.end(), tp_dist.begin(), tp_dist.end());
            }
        }
        rep.ap[ti] = classes_with_gt > 0 ? ap_sum / classes_with_gt : 0.0;
    }
    rep.mean_ap = (rep.ap[0] + rep.ap[1] + rep.ap[2] + rep.ap[3]) / 4.0;
    if (!all_tp_dists_at2.empty()) {
        double s = 0.0;
        for (double d : all_tp_dists_at2) s += d;
        rep.mate = s / static_cast<double>(all_tp_dists_at2.size());
    }
    return rep;
}

// Decode one scene's final-layer outputs into detections. Class is the
// argmax of the per-class sigmoid scores; detections below the score
// threshold are dropped.
inline std::vector<Detection> extract_detections(const HeadOutput& head, const Array& anchors,
                                                 const RoI& roi, double score_threshold,
                                                 std::size_t scene_index) {
    const std::size_t m = head.class_logits.shape()[0];
    const std::size_t k = head.class_logits.shape()[1];
    std::vector<Detection> dets;
    for (std::size_t i = 0; i < m; ++i) {
        int best_c = 0;
        double best_logit = head.class_logits.at2(i, 0);
        for (std::size_t c = 1; c < k; ++c) {
            if (head.class_logits.at2(i, c) > best_logit) {
                best_logit = head.class_logits.at2(i, c);
                best_c = static_cast<int>(c);
            }
        }
        const double score = 1.0 / (1.0 + std::exp(-best_logit));
        if (score < score_threshold) continue;
        const Box3D box = decode_box(head.box_regression.data() + i * kBoxDim,
                                     anchors.data() + i * 3, roi, best_c);
        dets.push_back(Detection{scene_index, best_c, score, box.center});
    }
    return dets;
}

}  // namespace petr
