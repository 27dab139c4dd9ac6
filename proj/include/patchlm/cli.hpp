#pragma once

#include "patchlm/config.hpp"
#include "patchlm/selftest.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#ifdef __unix__
#include <unistd.h>
#endif

namespace patchlm {
namespace cli {

inline bool color_allowed() {
#ifdef __unix__
    if (std::getenv("NO_COLOR") != nullptr) return false;
    return isatty(fileno(stdout)) != 0;
#else
    return false;
#endif
}

inline std::string pass_fail(bool pass) {
    if (!color_allowed()) return pass ? "PASS" : "FAIL";
    return pass ? "\033[32mPASS\033[0m" : "\033[31mFAIL\033[0m";
}

// ---------------------------------------------------------------------------
// gen: write train/val/test splits
// ---------------------------------------------------------------------------
inline int cmd_gen(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    const std::vector<std::pair<std::string, int>> splits = {{"train", cfg.train_scenes},
                                                             {"val", cfg.val_scenes},
                                                             {"test", cfg.test_scenes}};
    for (const auto& [name, scenes] : splits)
        if (scenes < 1) throw std::invalid_argument("empty split '" + name + "'");
    for (size_t i = 0; i < splits.size(); ++i) {
        const auto& [name, scenes] = splits[i];
        auto split = generate_split(derive_seed(cfg.seed, i + 1), scenes, cfg.min_objects,
                                    cfg.max_objects, cfg.grid_rows, cfg.grid_cols);
        write_dataset(split, (fs::path(cfg.data_dir) / name).string());
        std::cout << name << ": " << scenes << " scenes, " << split.samples.size()
                  << " qa samples\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// train: three-stage schedule, checkpoints at stage boundaries, train.csv
// ---------------------------------------------------------------------------
inline std::vector<TrainSample> dataset_to_samples(const DatasetSplit& split) {
    std::vector<TrainSample> out;
    out.reserve(split.samples.size());
    for (const auto& s : split.samples) {
        const auto img = split.images.at(s.image);
        const auto [gh, gw] = patch_grid_dims(img->height, img->width);
        out.push_back({make_stream(s.question, s.answer, gh * gw), img});
    }
    return out;
}

inline int resolved_threads(const RunConfig& cfg) {
    if (cfg.threads > 0) return cfg.threads;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(std::min(hw, 8u));
}

inline std::vector<StageConfig> stage_plan(const RunConfig& cfg) {
    std::vector<StageConfig> plan;
    std::string cur;
    auto flush = [&]() {
        if (cur.empty()) return;
        const Stage st = stage_from_name(cur);
        switch (st) {
            case Stage::I: plan.push_back({st, cfg.stage1_lr, cfg.stage1_epochs, "train"}); break;
            case Stage::II: plan.push_back({st, cfg.stage2_lr, cfg.stage2_epochs, "train"}); break;
            case Stage::III: plan.push_back({st, cfg.stage3_lr, cfg.stage3_epochs, "train"}); break;
        }
        cur.clear();
    };
    for (char ch : cfg.stages) {
        if (ch == ',') flush();
        else if (!std::isspace(static_cast<unsigned char>(ch))) cur.push_back(ch);
    }
    flush();
    if (plan.empty()) throw std::invalid_argument("no training stages selected");
    return plan;
}

inline int cmd_train(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    auto split = load_dataset((fs::path(cfg.data_dir) / "train").string());
    auto samples = dataset_to_samples(split);
    auto params = init_model(cfg.model_config(), cfg.seed);
    fs::create_directories(cfg.out_dir);

    TrainOptions opt;
    opt.batch_size = cfg.batch;
    opt.warmup_ratio = cfg.warmup_ratio;
    opt.clip_norm = cfg.clip_norm;
    opt.threads = resolved_threads(cfg);
    opt.on_stage_end = [&](Stage stage, const ModelParams& p) {
        const std::string path =
            (fs::path(cfg.out_dir) / ("stage_" + std::string(stage_name(stage)) + ".ckpt"))
                .string();
        checkpoint::save(p, path);
        std::cout << "wrote " << path << "\n";
    };

    auto log = train(params, stage_plan(cfg), samples, cfg.seed, opt);
    const std::string csv = (fs::path(cfg.out_dir) / "train.csv").string();
    write_train_log_csv(log, csv);
    std::cout << "wrote " << csv << " (" << log.size() << " steps, final loss "
              << (log.empty() ? 0.0 : log.back().loss) << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval: reliance suite over a trained checkpoint
// ---------------------------------------------------------------------------
inline int cmd_eval(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    const std::string ckpt = cfg.checkpoint.empty()
                                 ? (fs::path(cfg.out_dir) / "stage_III.ckpt").string()
                                 : cfg.checkpoint;
    auto params = checkpoint::load(ckpt);
    auto split = load_dataset((fs::path(cfg.data_dir) / cfg.eval_split).string());

    SuiteOptions opt;
    opt.conditions = parse_conditions(cfg.conditions);
    opt.seed = cfg.seed;
    opt.threads = resolved_threads(cfg);
    opt.max_new = cfg.max_new;
    opt.attn_samples = cfg.attn_samples;
    auto report = run_reliance_suite(params, split, opt);

    fs::create_directories(cfg.out_dir);
    const std::string records_path = (fs::path(cfg.out_dir) / "records.jsonl").string();
    const std::string report_path = (fs::path(cfg.out_dir) / "report.csv").string();
    const std::string attn_path = (fs::path(cfg.out_dir) / "attn.csv").string();
    write_records_jsonl(report.records, records_path);
    write_report_csv(report.rows, report_path);
    write_attn_csv(report.attn_profile, attn_path);
    std::cout << "wrote " << report_path << ", " << records_path << ", " << attn_path << " ("
              << report.records.size() << " records)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// report: human-readable summary re-aggregated from records.jsonl
// ---------------------------------------------------------------------------
inline int cmd_report(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    const std::string records_path =
        cfg.records.empty() ? (fs::path(cfg.out_dir) / "records.jsonl").string() : cfg.records;
    auto records = read_records_jsonl(records_path);
    if (records.empty()) throw std::runtime_error("no records in " + records_path);

    std::vector<std::string> condition_order;
    std::map<std::string, std::vector<EvalRecord>> by_condition;
    for (const auto& r : records) {
        if (!by_condition.count(r.condition)) condition_order.push_back(r.condition);
        by_condition[r.condition].push_back(r);
    }

    std::printf("%-22s %8s %8s %8s %8s\n", "condition", "acc", "mae", "mtem@1", "n");
    for (const auto& c : condition_order) {
        const auto& recs = by_condition[c];
        long long count_n = 0;
        for (const auto& r : recs) count_n += r.task == "count" ? 1 : 0;
        const auto dialogues = group_dialogues(recs);
        char mae_buf[32], mtem_buf[32];
        if (count_n > 0) std::snprintf(mae_buf, sizeof(mae_buf), "%.3f", mae(recs));
        else std::snprintf(mae_buf, sizeof(mae_buf), "-");
        if (!dialogues.empty())
            std::snprintf(mtem_buf, sizeof(mtem_buf), "%.2f", mtem_at_1(dialogues));
        else std::snprintf(mtem_buf, sizeof(mtem_buf), "-");
        std::printf("%-22s %8.4f %8s %8s %8zu\n", c.c_str(), accuracy(recs), mae_buf, mtem_buf,
                    recs.size());
    }

    if (by_condition.count("none")) {
        std::printf("\ncausal decay vs none:\n");
        bool anchor_has_correct = false;
        for (const auto& r : by_condition["none"]) anchor_has_correct |= r.correct;
        for (const auto& c : condition_order) {
            if (c != "l1" && c != "l2" && c != "l3" && c != "blind") continue;
            if (!anchor_has_correct) {
                std::printf("  %-8s undefined (no anchor-correct samples)\n", c.c_str());
                continue;
            }
            const double dc = causal_decay(by_condition["none"], by_condition[c]);
            std::printf("  %-8s %6.2f%%\n", c.c_str(), 100.0 * dc);
        }
    }

    const std::string attn_path =
        cfg.attn.empty() ? (fs::path(cfg.out_dir) / "attn.csv").string() : cfg.attn;
    std::ifstream attn(attn_path);
    if (attn) {
        std::printf("\nattention allocation (visual fraction per layer):\n");
        std::string line;
        std::getline(attn, line); // header
        while (std::getline(attn, line))
            if (!line.empty()) std::printf("  %s\n", line.c_str());
    }
    return 0;
}

inline int cmd_selftest() {
    auto results = selftest::run_all();
    int failed = 0;
    for (const auto& r : results) {
        std::cout << pass_fail(r.pass) << "  " << r.name << ": " << r.detail << "\n";
        failed += r.pass ? 0 : 1;
    }
    std::cout << (failed == 0 ? "all checks passed" : std::to_string(failed) + " check(s) failed")
              << "\n";
    return failed == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// entry point: tool <gen|train|eval|report|selftest> --config PATH [--key value ...]
// ---------------------------------------------------------------------------
inline int run(int argc, char** argv) {
    const std::string usage =
        "usage: patchlm <gen|train|eval|report|selftest> [--config PATH] [--key value ...]";
    try {
        if (argc < 2) throw std::invalid_argument(usage);
        const std::string command = argv[1];
        std::string config_path;
        std::vector<std::pair<std::string, std::string>> overrides;
        for (int i = 2; i < argc; ++i) {
            std::string arg = argv[i];
            if (arg.rfind("--", 0) != 0)
                throw std::invalid_argument("unexpected argument '" + arg + "'; " + usage);
            arg = arg.substr(2);
            if (i + 1 >= argc) throw std::invalid_argument("missing value for --" + arg);
            const std::string value = argv[++i];
            if (arg == "config") config_path = value;
            else overrides.emplace_back(arg, value);
        }
        RunConfig cfg;
        if (!config_path.empty()) cfg = load_config_file(config_path);
        for (const auto& [k, v] : overrides) apply_config_entry(cfg, k, v);

        if (command == "gen") return cmd_gen(cfg);
        if (command == "train") return cmd_train(cfg);
        if (command == "eval") return cmd_eval(cfg);
        if (command == "report") return cmd_report(cfg);
        if (command == "selftest") return cmd_selftest();
        throw std::invalid_argument("unknown command '" + command + "'; " + usage);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace cli
} // namespace patchlm
