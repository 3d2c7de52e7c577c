// petr: multi-camera 3D detection on synthetic scenes.
//
// Subcommands:
//   gen-scenes  write scene JSON files plus rendered image tensors
//   train       run the training loop, write metrics.csv and a checkpoint
//   eval        compute detection metrics from a checkpoint
//   pe-sim      emit position-embedding similarity heatmaps (PGM + CSV)
//   ablate      run a named config grid and write a comparison CSV

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "petr/checkpoint.hpp"
#include "petr/config.hpp"
#include "petr/harness.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    long long steps = -1;
    long long seed = -1;
    double score_threshold = -1.0;
};

petr::RunConfig load_config(const CommonOpts& o) {
    petr::RunConfig cfg =
        o.config_path.empty() ? petr::RunConfig{} : petr::RunConfig::from_file(o.config_path);
    if (o.steps >= 0) cfg.steps = static_cast<std::size_t>(o.steps);
    if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
    if (o.score_threshold >= 0.0) cfg.score_threshold = o.score_threshold;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& o, bool with_steps = true) {
    cmd->add_option("--config", o.config_path, "JSON config file (defaults apply when omitted)");
    cmd->add_option("--out", o.out_dir, "output directory");
    cmd->add_option("--seed", o.seed, "override config seed");
    if (with_steps) cmd->add_option("--steps", o.steps, "override config step count");
    cmd->add_option("--score-threshold", o.score_threshold, "override detection score threshold");
}

bool parse_anchor(const std::string& s, std::size_t out[3]) {
    unsigned long long v = 0, h = 0, w = 0;
    if (std::sscanf(s.c_str(), "%llu,%llu,%llu", &v, &h, &w) != 3) return false;
    out[0] = v;
    out[1] = h;
    out[2] = w;
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PETR-style multi-view 3D detector on synthetic scenes"};
    app.require_subcommand(1);

    CommonOpts gen_o, train_o, eval_o, sim_o, abl_o;
    std::size_t gen_count = 8;
    std::string eval_ckpt, sim_ckpt, sim_anchor = "0,0,0", ablate_grid;
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "progress output on stderr");

    auto* gen = app.add_subcommand("gen-scenes", "write scene JSON + image tensors");
    add_common(gen, gen_o, false);
    gen->add_option("--count", gen_count, "number of scenes");

    auto* train = app.add_subcommand("train", "train and write checkpoint + metrics.csv");
    add_common(train, train_o);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval, eval_o, false);
    eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();

    auto* sim = app.add_subcommand("pe-sim", "position-embedding similarity heatmaps");
    add_common(sim, sim_o, false);
    sim->add_option("--ckpt", sim_ckpt, "checkpoint file (optional; fresh init otherwise)");
    sim->add_option("--anchor", sim_anchor, "anchor cell as view,row,col");

    auto* abl = app.add_subcommand("ablate", "run a named config grid");
    add_common(abl, abl_o);
    abl->add_option("grid", ablate_grid, "pe-table3 | fusion-table4b | anchor-table4c")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const auto cfg = load_config(gen_o);
            petr::write_scene_files(cfg, cfg.make_rig(), gen_count, gen_o.out_dir);
            std::printf("wrote %zu scenes to %s\n", gen_count, gen_o.out_dir.c_str());
        } else if (*train) {
            const auto cfg = load_config(train_o);
            const auto result = petr::train_loop(cfg, train_o.out_dir, verbose);
            std::printf("checkpoint: %s\n", result.checkpoint_path.c_str());
            std::printf("metrics: %s\n", result.metrics_path.c_str());
            std::printf("mean_ap %.6f mate %.6f\n", result.final_metrics.mean_ap,
                        result.final_metrics.mate);
        } else if (*eval) {
            const auto cfg = load_config(eval_o);
            petr::PetrModel model(cfg.to_petr_config(), cfg.make_rig(), cfg.seed);
            petr::load_params(eval_ckpt, model.params());
            const auto rep = petr::evaluate(model, cfg, cfg.eval_scenes, cfg.score_threshold);
            std::printf("ap@0.5 %.6f ap@1 %.6f ap@2 %.6f ap@4 %.6f\n", rep.ap[0], rep.ap[1],
                        rep.ap[2], rep.ap[3]);
            std::printf("mean_ap %.6f mate %.6f\n", rep.mean_ap, rep.mate);
        } else if (*sim) {
            const auto cfg = load_config(sim_o);
            std::size_t anchor[3];
            if (!parse_anchor(sim_anchor, anchor)) {
                throw petr::ConfigError("--anchor must be view,row,col");
            }
            petr::PetrModel model(cfg.to_petr_config(), cfg.make_rig(), cfg.seed);
            if (!sim_ckpt.empty()) petr::load_params(sim_ckpt, model.params());
            petr::pe_similarity_run(model, anchor[0], anchor[1], anchor[2], sim_o.out_dir);
            std::printf("wrote %zu heatmaps to %s\n", cfg.n_views, sim_o.out_dir.c_str());
        } else if (*abl) {
            const auto cfg = load_config(abl_o);
            const auto results = petr::run_ablation(ablate_grid, cfg, abl_o.out_dir, verbose);
            for (const auto& r : results) {
                std::printf("%-10s mean_ap %.6f mate %.6f\n", r.label.c_str(), r.metrics.mean_ap,
                            r.metrics.mate);
            }
        }
    } catch (const petr::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
