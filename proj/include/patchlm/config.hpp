#pragma once

#include "patchlm/bench.hpp"
#include "patchlm/model.hpp"

#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchlm {

// Plain-text key=value configuration with command-line overrides.
struct RunConfig {
    // model
    int d = 64;
    int layers = 4;
    int heads = 4;
    int d_mid = 32;
    int maxgrid = 64;
    bool text_pos = false;

    // run
    uint64_t seed = 42;
    std::string data_dir = "data";
    std::string out_dir = "out";
    int threads = 0; // 0 = hardware concurrency

    // dataset generation
    int train_scenes = 2000;
    int val_scenes = 200;
    int test_scenes = 200;
    int min_objects = 3;
    int max_objects = 6;
    int grid_rows = 4;
    int grid_cols = 4;

    // training
    int batch = 8;
    double stage1_lr = 5e-4;
    double stage2_lr = 5e-5;
    double stage3_lr = 5e-5;
    int stage1_epochs = 1;
    int stage2_epochs = 1;
    int stage3_epochs = 1;
    double warmup_ratio = 0.03;
    double clip_norm = 1.0;
    std::string stages = "I,II,III";

    // evaluation
    std::string eval_split = "test";
    std::string checkpoint; // empty = <out_dir>/stage_III.ckpt
    std::string conditions =
        "none,l1,l2,l3,blind,mislead_none,mislead_repetition,mislead_credibility,mislead_logical";
    int max_new = 12;
    int attn_samples = 200;

    // reporting
    std::string records; // empty = <out_dir>/records.jsonl
    std::string attn;    // empty = <out_dir>/attn.csv

    ModelConfig model_config() const {
        ModelConfig cfg;
        cfg.d = d;
        cfg.layers = layers;
        cfg.heads = heads;
        cfg.d_mid = d_mid;
        cfg.maxgrid = maxgrid;
        cfg.text_pos = text_pos;
        cfg.validate();
        return cfg;
    }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        throw std::invalid_argument("config key '" + key + "': bad integer '" + v + "'");
    }
}

inline uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        throw std::invalid_argument("config key '" + key + "': bad unsigned integer '" + v + "'");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        throw std::invalid_argument("config key '" + key + "': bad number '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw std::invalid_argument("config key '" + key + "': bad boolean '" + v + "'");
}

} // namespace config_detail

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    using namespace config_detail;
    if (key == "d") cfg.d = to_int(key, value);
    else if (key == "layers") cfg.layers = to_int(key, value);
    else if (key == "heads") cfg.heads = to_int(key, value);
    else if (key == "d_mid") cfg.d_mid = to_int(key, value);
    else if (key == "maxgrid") cfg.maxgrid = to_int(key, value);
    else if (key == "text_pos") cfg.text_pos = to_bool(key, value);
    else if (key == "seed") cfg.seed = to_u64(key, value);
    else if (key == "data_dir") cfg.data_dir = value;
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "threads") cfg.threads = to_int(key, value);
    else if (key == "train_scenes") cfg.train_scenes = to_int(key, value);
    else if (key == "val_scenes") cfg.val_scenes = to_int(key, value);
    else if (key == "test_scenes") cfg.test_scenes = to_int(key, value);
    else if (key == "min_objects") cfg.min_objects = to_int(key, value);
    else if (key == "max_objects") cfg.max_objects = to_int(key, value);
    else if (key == "grid_rows") cfg.grid_rows = to_int(key, value);
    else if (key == "grid_cols") cfg.grid_cols = to_int(key, value);
    else if (key == "batch") cfg.batch = to_int(key, value);
    else if (key == "stage1_lr") cfg.stage1_lr = to_double(key, value);
    else if (key == "stage2_lr") cfg.stage2_lr = to_double(key, value);
    else if (key == "stage3_lr") cfg.stage3_lr = to_double(key, value);
    else if (key == "stage1_epochs") cfg.stage1_epochs = to_int(key, value);
    else if (key == "stage2_epochs") cfg.stage2_epochs = to_int(key, value);
    else if (key == "stage3_epochs") cfg.stage3_epochs = to_int(key, value);
    else if (key == "warmup_ratio") cfg.warmup_ratio = to_double(key, value);
    else if (key == "clip_norm") cfg.clip_norm = to_double(key, value);
    else if (key == "stages") cfg.stages = value;
    else if (key == "eval_split") cfg.eval_split = value;
    else if (key == "checkpoint") cfg.checkpoint = value;
    else if (key == "conditions") cfg.conditions = value;
    else if (key == "max_new") cfg.max_new = to_int(key, value);
    else if (key == "attn_samples") cfg.attn_samples = to_int(key, value);
    else if (key == "records") cfg.records = value;
    else if (key == "attn") cfg.attn = value;
    else throw std::invalid_argument("unknown config key '" + key + "'");
}

inline RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    RunConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + " line " + std::to_string(line_no) +
                                     ": expected key=value");
        apply_config_entry(cfg, config_detail::trim(line.substr(0, eq)),
                           config_detail::trim(line.substr(eq + 1)));
    }
    return cfg;
}

} // namespace patchlm
