#pragma once

// Run configuration: one flat JSON object holding every knob. Unknown keys
// are rejected; load errors carry a best-effort line number.

#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "petr/model.hpp"

namespace petr {

struct RunConfig {
    // experiment
    std::uint64_t seed = 0;
    std::size_t steps = 2000;
    std::size_t batch_size = 1;
    double lr = 2.0e-4;
    double weight_decay = 0.01;
    double lambda_cls = 2.0;

    // cameras / scenes
    std::size_t n_views = 6;
    std::size_t image_w = 96, image_h = 96;
    std::size_t stride = 16;
    double fov_deg = 90.0;
    double ring_radius = 1.0;
    int min_objects = 1, max_objects = 3;
    double min_center_dist = 3.0;

    // model
    std::size_t channels = 64;
    std::size_t feat_channels = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 3;
    std::size_t n_classes = 4;
    std::size_t n_queries = 100;
    std::string anchor_mode = "learned_3d";
    std::size_t fix_bev_side = 39;
    std::array<std::size_t, 3> fix_3d_dims{16, 16, 6};

    // position embedding
    bool use_2d_pe = false;
    bool use_mv_prior = false;
    bool use_3d_pe = true;
    bool pe_none = false;
    std::string fusion = "add";

    // geometry
    std::string depth_mode = "LID";
    double d_min = 1.0, d_max = 30.0;
    std::size_t depth_bins = 16;
    std::array<double, 6> roi{-20.0, -20.0, -3.0, 20.0, 20.0, 3.0};

    // evaluation
    std::size_t eval_scenes = 50;
    double score_threshold = 0.25;
    std::size_t eval_every = 0;  // 0 = final evaluation only

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (lr <= 0.0) throw ConfigError("lr must be positive");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        if (lambda_cls <= 0.0) throw ConfigError("lambda_cls must be positive");
        if (min_objects < 0 || max_objects < min_objects) throw ConfigError("bad object count range");
        if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
        if (score_threshold < 0.0 || score_threshold > 1.0) throw ConfigError("score_threshold in [0,1]");
        anchor_mode_from_string(anchor_mode);
        fusion_from_string(fusion);
        if (depth_mode != "UD" && depth_mode != "LID") throw ConfigError("depth_mode must be UD or LID");
        to_petr_config().validate();  // model-level checks
    }

    PetrConfig to_petr_config() const {
        PetrConfig c;
        c.n_views = n_views;
        c.image_w = image_w;
        c.image_h = image_h;
        c.stride = stride;
        c.feat_channels = feat_channels;
        c.channels = channels;
        c.n_heads = n_heads;
        c.n_layers = n_layers;
        c.n_classes = n_classes;
        c.n_queries = n_queries;
        c.anchor_mode = anchor_mode_from_string(anchor_mode);
        c.fix_bev_side = fix_bev_side;
        c.fix_3d_dims = fix_3d_dims;
        c.pe.use_2d = use_2d_pe;
        c.pe.use_mv = use_mv_prior;
        c.pe.use_3d = use_3d_pe;
        c.pe.none = pe_none;
        c.pe.fusion = fusion_from_string(fusion);
        c.pe.channels = channels;
        c.pe.pe_hidden = 4 * channels;
        c.depth_mode = depth_mode == "UD" ? DepthMode::UD : DepthMode::LID;
        c.d_min = d_min;
        c.d_max = d_max;
        c.depth_bins = depth_bins;
        c.roi = RoI(roi[0], roi[1], roi[2], roi[3], roi[4], roi[5]);
        return c;
    }

    RoI make_roi() const { return RoI(roi[0], roi[1], roi[2], roi[3], roi[4], roi[5]); }

    CameraRig make_rig() const {
        return make_ring_rig(n_views, ring_radius, image_w, image_h, stride, fov_deg);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["steps"] = steps;
        j["batch_size"] = batch_size;
        j["lr"] = lr;
        j["weight_decay"] = weight_decay;
        j["lambda_cls"] = lambda_cls;
        j["n_views"] = n_views;
        j["image_size"] = {image_w, image_h};
        j["stride"] = stride;
        j["fov_deg"] = fov_deg;
        j["ring_radius"] = ring_radius;
        j["min_objects"] = min_objects;
        j["max_objects"] = max_objects;
        j["min_center_dist"] = min_center_dist;
        j["channels"] = channels;
        j["feat_channels"] = feat_channels;
        j["n_heads"] = n_heads;
        j["n_layers"] = n_layers;
        j["n_classes"] = n_classes;
        j["n_queries"] = n_queries;
        j["anchor_mode"] = anchor_mode;
        j["fix_bev_side"] = fix_bev_side;
        j["fix_3d_dims"] = fix_3d_dims;
        j["use_2d_pe"] = use_2d_pe;
        j["use_mv_prior"] = use_mv_prior;
        j["use_3d_pe"] = use_3d_pe;
        j["pe_none"] = pe_none;
        j["fusion"] = fusion;
        j["depth_mode"] = depth_mode;
        j["d_min"] = d_min;
        j["d_max"] = d_max;
        j["depth_bins"] = depth_bins;
        j["roi"] = roi;
        j["eval_scenes"] = eval_scenes;
        j["score_threshold"] = score_threshold;
        j["eval_every"] = eval_every;
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j, const std::string& raw_text = "",
                               const std::string& source = "config");
    static RunConfig from_file(const std::string& path);
};

namespace detail {

inline std::size_t line_of_offset(const std::string& text, std::size_t offset) {
    std::size_t line = 1;
    for (std::size_t i = 0; i < offset && i < text.size(); ++i)
        if (text[i] == '\n') ++line;
    return line;
}

inline std::size_t line_of_key(const std::string& text, const std::string& key) {
    const auto pos = text.find("\"" + key + "\"");
    if (pos == std::string::npos) return 0;
    return line_of_offset(text, pos);
}

inline std::string where(const std::string& source, std::size_t line) {
    return line > 0 ? source + ":" + std::to_string(line) : source;
}

}  // namespace detail

inline RunConfig RunConfig::from_json(const nlohmann::json& j, const std::string& raw_text,
                                      const std::string& source) {
    static const std::set<std::string> kKnown{
        "seed", "steps", "batch_size", "lr", "weight_decay", "lambda_cls",
        "n_views", "image_size", "stride", "fov_deg", "ring_radius",
        "min_objects", "max_objects", "min_center_dist",
        "channels", "feat_channels", "n_heads", "n_layers", "n_classes", "n_queries",
        "anchor_mode", "fix_bev_side", "fix_3d_dims",
        "use_2d_pe", "use_mv_prior", "use_3d_pe", "pe_none", "fusion",
        "depth_mode", "d_min", "d_max", "depth_bins", "roi",
        "eval_scenes", "score_threshold", "eval_every"};
    if (!j.is_object()) throw ConfigError(source + ": top-level value must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!kKnown.count(key)) {
            throw ConfigError(detail::where(source, detail::line_of_key(raw_text, key)) +
                              ": unknown config key '" + key + "'");
        }
    }
    RunConfig c;
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).template get<std::decay_t<decltype(field)>>();
        };
        get("seed", c.seed);
        get("steps", c.steps);
        get("batch_size", c.batch_size);
        get("lr", c.lr);
        get("weight_decay", c.weight_decay);
        get("lambda_cls", c.lambda_cls);
        get("n_views", c.n_views);
        if (j.contains("image_size")) {
            const auto v = j.at("image_size").get<std::vector<std::size_t>>();
            if (v.size() != 2) throw ConfigError("image_size must be [width, height]");
            c.image_w = v[0];
            c.image_h = v[1];
        }
        get("stride", c.stride);
        get("fov_deg", c.fov_deg);
        get("ring_radius", c.ring_radius);
        get("min_objects", c.min_objects);
        get("max_objects", c.max_objects);
        get("min_center_dist", c.min_center_dist);
        get("channels", c.channels);
        get("feat_channels", c.feat_channels);
        get("n_heads", c.n_heads);
        get("n_layers", c.n_layers);
        get("n_classes", c.n_classes);
        get("n_queries", c.n_queries);
        get("anchor_mode", c.anchor_mode);
        get("fix_bev_side", c.fix_bev_side);
        get("fix_3d_dims", c.fix_3d_dims);
        get("use_2d_pe", c.use_2d_pe);
        get("use_mv_prior", c.use_mv_prior);
        get("use_3d_pe", c.use_3d_pe);
        get("pe_none", c.pe_none);
        get("fusion", c.fusion);
        get("depth_mode", c.depth_mode);
        get("d_min", c.d_min);
        get("d_max", c.d_max);
        get("depth_bins", c.depth_bins);
        get("roi", c.roi);
        get("eval_scenes", c.eval_scenes);
        get("score_threshold", c.score_threshold);
        get("eval_every", c.eval_every);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(source + ": " + e.what());
    }
    try {
        c.validate();
    } catch (const std::exception& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return c;
}

inline RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(path + ": cannot open config file");
    std::stringstream ss;
    ss << is.rdbuf();
    const std::string text = ss.str();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ":" + std::to_string(detail::line_of_offset(text, e.byte)) + ": " +
                          e.what());
    }
    return from_json(j, text, path);
}

}  // namespace petr
