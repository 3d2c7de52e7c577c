#pragma once

// Training/eval loops, checkpointing, PE-similarity emission, and the
// ablation grids. Everything is deterministic for a fixed (config, seed).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "petr/checkpoint.hpp"
#include "petr/config.hpp"
#include "petr/loss.hpp"
#include "petr/metrics.hpp"
#include "petr/model.hpp"
#include "petr/scenegen.hpp"

namespace petr {

// cosine annealing from lr0 at step 0 to exactly 0 at the final step
inline double lr_at_step(double lr0, std::size_t step, std::size_t total_steps) {
    if (total_steps <= 1) return lr0;
    const double x = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    return lr0 * 0.5 * (1.0 + std::cos(M_PI * x));
}

inline std::uint64_t train_scene_seed(std::uint64_t seed, std::size_t step, std::size_t batch_index) {
    return mix_seed(seed, 0x747261696eULL, step * 1000003ULL + batch_index);
}

inline std::uint64_t eval_scene_seed(std::uint64_t seed, std::size_t index) {
    return mix_seed(seed, 0x6576616cULL, index);
}

inline Scene make_train_scene(const RunConfig& cfg, const CameraRig& rig, std::size_t step,
                              std::size_t batch_index) {
    return sample_scene(train_scene_seed(cfg.seed, step, batch_index), rig, cfg.make_roi(),
                        {cfg.min_objects, cfg.max_objects}, static_cast<int>(cfg.n_classes),
                        cfg.min_center_dist);
}

inline Scene make_eval_scene(const RunConfig& cfg, const CameraRig& rig, std::size_t index) {
    return sample_scene(eval_scene_seed(cfg.seed, index), rig, cfg.make_roi(),
                        {cfg.min_objects, cfg.max_objects}, static_cast<int>(cfg.n_classes),
                        cfg.min_center_dist);
}

// ----------------------------- evaluation -----------------------------

inline MetricsReport evaluate(PetrModel& model, const RunConfig& cfg, std::size_t n_scenes,
                              double score_threshold) {
    const RoI roi = cfg.make_roi();
    std::vector<Detection> dets;
    std::vector<GtRecord> gts;
    for (std::size_t s = 0; s < n_scenes; ++s) {
        const Scene scene = make_eval_scene(cfg, model.rig(), s);
        const Images imgs = render(scene);
        Tape tape;
        const auto heads = model.forward(tape, imgs);
        const auto scene_dets =
            extract_detections(heads.back(), model.anchors(), roi, score_threshold, s);
        dets.insert(dets.end(), scene_dets.begin(), scene_dets.end());
        for (const auto& b : scene.boxes) gts.push_back(GtRecord{s, b.class_id, b.center});
    }
    return compute_metrics(std::move(dets), gts, static_cast<int>(cfg.n_classes));
}

// ----------------------------- training -----------------------------

struct TrainResult {
    std::vector<double> losses;           // per step
    MetricsReport final_metrics{};
    std::string checkpoint_path;
    std::string metrics_path;
};

namespace detail {

inline void write_metrics_row(std::FILE* f, std::size_t step, double loss, double lr,
                              const MetricsReport* rep) {
    if (rep) {
        std::fprintf(f, "%zu,%.10g,%.10g,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", step, loss, lr,
                     rep->ap[0], rep->ap[1], rep->ap[2], rep->ap[3], rep->mean_ap, rep->mate);
    } else {
        std::fprintf(f, "%zu,%.10g,%.10g,,,,,,\n", step, loss, lr);
    }
}

}  // namespace detail

// Fresh synthetic batch per step; forward, total loss over all decoder
// layers, backward, AdamW with cosine-annealed lr. Deterministic given
// (config, seed). Throws ContractError on a non-finite loss, naming the
// offending batch seed.
inline TrainResult train_loop(const RunConfig& cfg, const std::string& out_dir, bool verbose = false) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const CameraRig rig = cfg.make_rig();
    PetrModel model(cfg.to_petr_config(), rig, cfg.seed);
    AdamWState opt;

    {
        std::ofstream os(out_dir + "/config.json");
        os << cfg.to_json().dump(2) << "\n";
    }

    TrainResult result;
    result.metrics_path = out_dir + "/metrics.csv";
    std::FILE* mf = std::fopen(result.metrics_path.c_str(), "w");
    if (!mf) throw ContractError("train_loop: cannot open " + result.metrics_path);
    std::fprintf(mf, "step,loss,lr,ap_0.5,ap_1.0,ap_2.0,ap_4.0,mean_ap,mate\n");

    const RoI roi = cfg.make_roi();
    double last_loss = 0.0, last_lr = cfg.steps > 0 ? lr_at_step(cfg.lr, 0, cfg.steps) : cfg.lr;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const double lr = lr_at_step(cfg.lr, step, cfg.steps);
        Tape tape;
        Array loss;
        std::uint64_t first_batch_seed = 0;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const Scene scene = make_train_scene(cfg, rig, step, b);
            if (b == 0) first_batch_seed = scene.seed;
            const Images imgs = render(scene);
            const auto heads = model.forward(tape, imgs);
            Array scene_loss = total_loss(tape, heads, model.anchors(), scene.boxes, roi, cfg.lambda_cls);
            loss = loss.defined() ? tape.add(loss, scene_loss) : scene_loss;
        }
        if (cfg.batch_size > 1) loss = tape.mul_scalar(loss, 1.0 / static_cast<double>(cfg.batch_size));
        const double loss_v = loss.at(0);
        if (!std::isfinite(loss_v)) {
            std::fclose(mf);
            throw ContractError("train_loop: non-finite loss at step " + std::to_string(step) +
                                " (batch seed " + std::to_string(first_batch_seed) + ")");
        }
        model.params().zero_grads();
        tape.backward(loss);
        adamw_step(model.params().arrays, opt, lr, cfg.weight_decay);

        result.losses.push_back(loss_v);
        last_loss = loss_v;
        last_lr = lr;
        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps) {
            const MetricsReport rep = evaluate(model, cfg, cfg.eval_scenes, cfg.score_threshold);
            detail::write_metrics_row(mf, step, loss_v, lr, &rep);
        } else {
            detail::write_metrics_row(mf, step, loss_v, lr, nullptr);
        }
        if (verbose && (step % 100 == 0 || step + 1 == cfg.steps)) {
            std::fprintf(stderr, "step %zu/%zu loss %.4f lr %.2e\n", step, cfg.steps, loss_v, lr);
        }
    }

    result.checkpoint_path = out_dir + "/checkpoint_final.ckpt";
    save_params(result.checkpoint_path, model.params());
    result.final_metrics = evaluate(model, cfg, cfg.eval_scenes, cfg.score_threshold);
    detail::write_metrics_row(mf, cfg.steps, last_loss, last_lr, &result.final_metrics);
    std::fclose(mf);
    return result;
}

// ----------------------------- PE similarity emission -----------------------------

// P5 PGM, maxval 255, gray = round(255 * (sim + 1) / 2)
inline void save_similarity_pgm(const std::string& path, const std::vector<double>& sim,
                                std::size_t h, std::size_t w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("save_similarity_pgm: cannot open " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    for (double v : sim) {
        const double clamped = std::min(1.0, std::max(-1.0, v));
        const int gray = static_cast<int>(std::lround(255.0 * (clamped + 1.0) / 2.0));
        os.put(static_cast<char>(gray));
    }
}

struct PeSimResult {
    std::vector<std::vector<double>> maps;  // per view, h*w
    std::size_t h = 0, w = 0;
};

inline PeSimResult pe_similarity_run(PetrModel& model, std::size_t anchor_view,
                                     std::size_t anchor_h, std::size_t anchor_w,
                                     const std::string& out_dir) {
    Tape tape;
    const auto pe = model.pe_maps(tape);
    PeSimResult res;
    res.h = model.rig().feat_h();
    res.w = model.rig().feat_w();
    res.maps = pe_similarity_map(pe, res.h, res.w, anchor_view, anchor_h, anchor_w);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream csv(out_dir + "/pe_sim.csv");
        csv << "view,row,col,similarity\n";
        for (std::size_t v = 0; v < res.maps.size(); ++v) {
            save_similarity_pgm(out_dir + "/pe_sim_view" + std::to_string(v) + ".pgm", res.maps[v],
                                res.h, res.w);
            char buf[64];
            for (std::size_t r = 0; r < res.h; ++r)
                for (std::size_t c = 0; c < res.w; ++c) {
                    std::snprintf(buf, sizeof(buf), "%.9f", res.maps[v][r * res.w + c]);
                    csv << v << "," << r << "," << c << "," << buf << "\n";
                }
        }
    }
    return res;
}

// ----------------------------- ablation grids -----------------------------

struct AblationRow {
    std::string label;
    RunConfig cfg;
};

inline std::vector<AblationRow> ablation_grid(const std::string& name, const RunConfig& base) {
    auto with_pe = [&](const char* label, bool p2d, bool mv, bool p3d) {
        AblationRow row{label, base};
        row.cfg.use_2d_pe = p2d;
        row.cfg.use_mv_prior = mv;
        row.cfg.use_3d_pe = p3d;
        row.cfg.pe_none = false;
        return row;
    };
    if (name == "pe-table3") {
        return {with_pe("2d", true, false, false), with_pe("2d_mv", true, true, false),
                with_pe("3d", false, false, true), with_pe("2d_3d", true, false, true),
                with_pe("2d_mv_3d", true, true, true)};
    }
    if (name == "fusion-table4b") {
        std::vector<AblationRow> rows;
        for (const char* f : {"add", "concat", "multiply"}) {
            AblationRow row{f, base};
            row.cfg.fusion = f;
            rows.push_back(row);
        }
        return rows;
    }
    if (name == "anchor-table4c") {
        std::vector<AblationRow> rows;
        for (const char* m : {"none", "fix_bev", "fix_3d", "learned_3d"}) {
            AblationRow row{m, base};
            row.cfg.anchor_mode = m;
            rows.push_back(row);
        }
        return rows;
    }
    throw ConfigError("unknown ablation grid '" + name +
                      "' (expected pe-table3|fusion-table4b|anchor-table4c)");
}

struct AblationResult {
    std::string label;
    MetricsReport metrics;
    double final_loss = 0.0;
};

// Runs every row with the base config's seed so differences are attributable
// to the configuration alone; writes a comparison CSV.
inline std::vector<AblationResult> run_ablation(const std::string& name, const RunConfig& base,
                                                const std::string& out_dir, bool verbose = false) {
    const auto rows = ablation_grid(name, base);
    std::filesystem::create_directories(out_dir);
    std::vector<AblationResult> results;
    for (const auto& row : rows) {
        if (verbose) std::fprintf(stderr, "[ablate %s] running %s\n", name.c_str(), row.label.c_str());
        const TrainResult tr = train_loop(row.cfg, out_dir + "/" + row.label, verbose);
        AblationResult res;
        res.label = row.label;
        res.metrics = tr.final_metrics;
        res.final_loss = tr.losses.empty() ? 0.0 : tr.losses.back();
        results.push_back(res);
    }
    std::FILE* f = std::fopen((out_dir + "/ablate_" + name + ".csv").c_str(), "w");
    if (!f) throw ContractError("run_ablation: cannot open comparison csv");
    std::fprintf(f, "config,mean_ap,ap_0.5,ap_1.0,ap_2.0,ap_4.0,mate,final_loss\n");
    for (const auto& r : results) {
        std::fprintf(f, "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.10g\n", r.label.c_str(), r.metrics.mean_ap,
                     r.metrics.ap[0], r.metrics.ap[1], r.metrics.ap[2], r.metrics.ap[3],
                     r.metrics.mate, r.final_loss);
    }
    std::fclose(f);
    return results;
}

// ----------------------------- scene dataset emission -----------------------------

inline void write_scene_files(const RunConfig& cfg, const CameraRig& rig, std::size_t count,
                              const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    for (std::size_t i = 0; i < count; ++i) {
        const Scene scene = make_eval_scene(cfg, rig, i);
        char name[64];
        std::snprintf(name, sizeof(name), "scene_%05zu", i);
        {
            std::ofstream os(out_dir + "/" + name + ".json");
            os << scene_to_json(scene).dump(2) << "\n";
        }
        const Images imgs = render(scene);
        save_records(out_dir + "/" + name + ".images",
                     {CkptRecord{"images", {imgs.n_views, 3, imgs.h, imgs.w}, imgs.data}});
    }
}

}  // namespace petr
