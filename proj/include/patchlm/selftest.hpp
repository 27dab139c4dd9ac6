#pragma once

#include "patchlm/bench.hpp"
#include "patchlm/trainer.hpp"

#include <chrono>
#include <cstring>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace patchlm {

// ---------------------------------------------------------------------------
// Finite-difference gradient checking. The reference derivative comes from
// central differences of forward-only evaluations, so it stays independent
// of the backward implementation it validates.
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    int coords_checked = 0;
    std::string worst; // tensor name / flat index of the worst coordinate
};

// loss_fn must rebuild the forward graph from current parameter data.
inline GradCheckResult finite_difference_check(
    const std::function<TensorPtr()>& loss_fn,
    const std::vector<std::pair<std::string, TensorPtr>>& params,
    const std::vector<std::pair<int, size_t>>& coords, double h = 1e-5) {
    // analytic gradients from one backward pass
    for (auto& [name, t] : params) t->zero_grad();
    {
        auto loss = loss_fn();
        ops::backward(loss);
    }
    std::vector<double> analytic(coords.size());
    for (size_t i = 0; i < coords.size(); ++i) {
        const auto& [pi, flat] = coords[i];
        const auto& t = params[pi].second;
        analytic[i] = t->grad.empty() ? 0.0 : t->grad[flat];
    }
    GradCheckResult res;
    res.coords_checked = static_cast<int>(coords.size());
    for (size_t i = 0; i < coords.size(); ++i) {
        const auto& [pi, flat] = coords[i];
        auto& t = params[pi].second;
        const double saved = t->data[flat];
        t->data[flat] = saved + h;
        const double up = loss_fn()->data[0];
        t->data[flat] = saved - h;
        const double down = loss_fn()->data[0];
        t->data[flat] = saved;
        const double fd = (up - down) / (2.0 * h);
        const double rel = std::abs(analytic[i] - fd) / std::max(1e-8, std::abs(fd));
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst = params[pi].first + "[" + std::to_string(flat) + "]";
        }
    }
    return res;
}

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace selftest {

namespace detail {

inline Image random_image(SplitMix64& rng, int h, int w) {
    Image img(h, w);
    for (auto& p : img.pixels) p = static_cast<uint8_t>(rng.next_below(256));
    return img;
}

inline void randomize_tensor(const TensorPtr& t, SplitMix64& rng, double stddev = 0.05) {
    for (auto& v : t->data) v = rng.next_gaussian() * stddev;
}

inline std::string random_text(SplitMix64& rng, int min_len, int max_len) {
    const int len = min_len + static_cast<int>(rng.next_below(max_len - min_len + 1));
    std::string s;
    for (int i = 0; i < len; ++i)
        s.push_back(static_cast<char>('a' + rng.next_below(26)));
    return s;
}

inline ModelConfig small_config(int d = 16, int layers = 2, int heads = 2) {
    ModelConfig cfg;
    cfg.d = d;
    cfg.layers = layers;
    cfg.heads = heads;
    cfg.d_mid = d / 2;
    cfg.maxgrid = 8;
    return cfg;
}

inline bool rows_bit_identical(const Tensor& a, const Tensor& b, int row_begin, int row_end) {
    const int cols = a.cols();
    return std::memcmp(a.data.data() + static_cast<size_t>(row_begin) * cols,
                       b.data.data() + static_cast<size_t>(row_begin) * cols,
                       static_cast<size_t>(row_end - row_begin) * cols * sizeof(double)) == 0;
}

} // namespace detail

// Full-model finite-difference check on a mixed 8-token stream: 2 layers,
// d=16, 2 heads, 50 coordinates spanning every parameter group. Coordinates
// whose true gradient sits below the central-difference noise floor
// (|loss| * eps / 2h ~ 1e-10) carry no information about backward
// correctness, so sampling rejects |grad| < 3e-6 and fails loudly if a
// whole group has nothing informative to offer.
inline CheckResult check_gradient_fidelity() {
    using namespace detail;
    const auto t0 = std::chrono::steady_clock::now();
    auto params = init_model(small_config(), 7);
    SplitMix64 rng(101);
    for (auto& [name, t] : params.named_tensors()) {
        if (name.find("gamma") != std::string::npos)
            for (auto& v : t->data) v = 1.0 + 0.2 * rng.next_gaussian();
        else if (name.find("beta") != std::string::npos || name.find(".b") != std::string::npos)
            for (auto& v : t->data) v = 0.2 * rng.next_gaussian();
        else
            for (auto& v : t->data) v = 0.3 * rng.next_gaussian();
    }
    const Image img = random_image(rng, 16, 16); // one visual token
    const TokenStream stream = make_stream("q", "a", 1);

    auto named = params.named_tensors();
    auto loss_fn = [&]() { return sample_loss(stream, &img, params); };

    // group tensors by role so the 50 coordinates cover every group
    auto group_of = [](const std::string& name) -> std::string {
        if (name.rfind("patch.", 0) == 0) return name == "patch.pos" ? "pos" : "conv";
        if (name == "embed.text") return "e_t";
        if (name.rfind("head.", 0) == 0) return "head";
        if (name.rfind("final_ln.", 0) == 0) return "final_ln";
        const bool visual = name.size() > 2 && name.substr(name.size() - 2) == ".v";
        if (name.find(".attn.wo") != std::string::npos) return "wo";
        if (name.find(".attn.") != std::string::npos) return visual ? "attn_v" : "attn_t";
        if (name.find(".ln") != std::string::npos) return visual ? "ln_v" : "ln_t";
        return visual ? "ffn_v" : "ffn_t";
    };
    std::map<std::string, std::vector<int>> groups;
    for (size_t i = 0; i < named.size(); ++i)
        groups[group_of(named[i].first)].push_back(static_cast<int>(i));

    for (auto& [name, t] : named) t->zero_grad();
    ops::backward(loss_fn());

    std::map<std::string, std::vector<std::pair<int, size_t>>> informative;
    for (auto& [gname, members] : groups) {
        for (int ti : members) {
            const auto& grad = named[ti].second->grad;
            for (size_t flat = 0; flat < grad.size(); ++flat)
                if (std::abs(grad[flat]) >= 3e-6) informative[gname].emplace_back(ti, flat);
        }
        if (informative[gname].empty())
            return {"gradient-fidelity", false,
                    "parameter group '" + gname + "' has no informative coordinates"};
    }
    std::vector<std::pair<int, size_t>> coords;
    SplitMix64 pick(2024);
    while (coords.size() < 50)
        for (auto& [gname, candidates] : informative) {
            if (coords.size() >= 50) break;
            coords.push_back(candidates[pick.next_below(candidates.size())]);
        }
    auto res = finite_difference_check(loss_fn, named, coords);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream os;
    os << "max rel err " << res.max_rel_err << " over " << res.coords_checked << " coords ("
       << groups.size() << " groups, " << secs << "s)";
    if (!res.worst.empty()) os << ", worst at " << res.worst;
    return {"gradient-fidelity", res.max_rel_err < 1e-4 && secs < 60.0, os.str()};
}

// Perturbing any suffix token leaves logits at earlier positions
// bit-identical.
inline CheckResult check_causal_exactness(int num_streams = 100) {
    using namespace detail;
    auto params = init_model(small_config(32, 2, 2), 11);
    SplitMix64 rng(313);
    randomize_tensor(params.patch.pos, rng, 0.02);
    int compared = 0;
    NoGradGuard ng;
    for (int s = 0; s < num_streams; ++s) {
        const Image img = random_image(rng, 32, 32); // 4 visual tokens
        auto stream = make_stream(random_text(rng, 2, 6), random_text(rng, 1, 3), 4);
        auto base = model_forward(stream, &img, params);
        const int n = stream.size();
        for (int j = 1; j < n; ++j) {
            TokenStream mutated = stream;
            auto& e = mutated.entries[j];
            if (e.tag == Modality::Text) {
                e.payload = (e.payload + 1 + static_cast<int>(rng.next_below(260))) % vocab::kSize;
            } else {
                e.payload = (e.payload + 1 + static_cast<int>(rng.next_below(3))) % 4;
            }
            auto perturbed = model_forward(mutated, &img, params);
            if (!rows_bit_identical(*base, *perturbed, 0, j)) {
                return {"causal-exactness", false,
                        "stream " + std::to_string(s) + ", perturbed position " +
                            std::to_string(j) + ": earlier logits changed"};
            }
            ++compared;
        }
    }
    return {"causal-exactness", true,
            std::to_string(num_streams) + " streams, " + std::to_string(compared) +
                " suffix perturbations, all prefixes bit-identical"};
}

// Pure-text outputs are bit-invariant to arbitrary visual-side parameters.
inline CheckResult check_modality_isolation(int num_streams = 100) {
    using namespace detail;
    auto params = init_model(small_config(32, 2, 2), 17);
    SplitMix64 rng(929);
    NoGradGuard ng;
    for (int s = 0; s < num_streams; ++s) {
        auto stream = make_stream(random_text(rng, 3, 10), random_text(rng, 1, 4), 0);
        auto base = model_forward(stream, nullptr, params);
        for (auto& [name, t] : params.patch.named_tensors()) randomize_tensor(t, rng);
        for (auto& b : params.blocks) {
            randomize_tensor(b.visual.wq, rng);
            randomize_tensor(b.visual.wk, rng);
            randomize_tensor(b.visual.wv, rng);
            randomize_tensor(b.visual.ln1.gamma, rng);
            randomize_tensor(b.visual.ln1.beta, rng);
            randomize_tensor(b.visual.ln2.gamma, rng);
            randomize_tensor(b.visual.ln2.beta, rng);
            randomize_tensor(b.visual.ffn.w1, rng);
            randomize_tensor(b.visual.ffn.b1, rng);
            randomize_tensor(b.visual.ffn.w2, rng);
            randomize_tensor(b.visual.ffn.b2, rng);
        }
        auto perturbed = model_forward(stream, nullptr, params);
        if (!rows_bit_identical(*base, *perturbed, 0, stream.size()))
            return {"modality-isolation", false,
                    "stream " + std::to_string(s) + ": text logits moved with visual params"};
    }
    return {"modality-isolation", true,
            std::to_string(num_streams) + " pure-text streams bit-invariant"};
}

// Stage I touches only the patch embedding; Stage II leaves every
// text-tagged tensor, the embedding, the head and the final LN at init.
inline CheckResult check_freeze_schedule() {
    using namespace detail;
    auto cfg = small_config(16, 2, 2);
    auto params = init_model(cfg, 23);
    SplitMix64 rng(515);
    std::vector<TrainSample> data;
    for (int i = 0; i < 4; ++i) {
        auto img = std::make_shared<Image>(random_image(rng, 16, 16));
        data.push_back({make_stream(random_text(rng, 2, 5), random_text(rng, 1, 2), 1), img});
    }
    auto named = params.named_tensors();
    std::map<std::string, std::vector<double>> init;
    for (auto& [name, t] : named) init[name] = t->data;

    TrainOptions opt;
    opt.batch_size = 2;
    // 4 samples, batch 2 -> 2 steps per epoch; 5 epochs = 10 steps
    train(params, {{Stage::I, 1e-3, 5, "freeze-check"}}, data, 99, opt);
    for (auto& [name, t] : named) {
        const bool is_patch = name.rfind("patch.", 0) == 0;
        const bool same = t->data == init[name];
        if (!is_patch && !same)
            return {"freeze-schedule", false, "stage I moved non-patch tensor " + name};
        if (name == "patch.conv1.w" && same)
            return {"freeze-schedule", false, "stage I left patch.conv1.w untouched"};
    }
    train(params, {{Stage::II, 1e-3, 5, "freeze-check"}}, data, 100, opt);
    for (auto& [name, t] : named) {
        const bool text_block = name.rfind("block", 0) == 0 &&
                                name.size() > 2 && name.substr(name.size() - 2) == ".t";
        const bool shared_frozen = name == "embed.text" || name.rfind("head.", 0) == 0 ||
                                   name.rfind("final_ln.", 0) == 0 ||
                                   name.find(".attn.wo") != std::string::npos;
        if ((text_block || shared_frozen) && t->data != init[name])
            return {"freeze-schedule", false, "stage II moved frozen tensor " + name};
    }
    return {"freeze-schedule", true, "10 stage-I and 10 stage-II steps left frozen sets bitwise"};
}

inline CheckResult check_degradation_exactness() {
    using namespace detail;
    SplitMix64 rng(41);
    Image big = random_image(rng, 512, 512);
    const Image l1 = degrade(big, DegradationLevel::L1, 5);
    const Image l2 = degrade(big, DegradationLevel::L2, 5);
    const Image l3 = degrade(big, DegradationLevel::L3, 5);
    if (l1.height != 358 || l1.width != 358)
        return {"degradation-exactness", false, "L1 dims wrong"};
    if (l2.height != 204 || l2.width != 204)
        return {"degradation-exactness", false, "L2 dims wrong"};
    if (l3.height != 76 || l3.width != 76)
        return {"degradation-exactness", false, "L3 dims wrong"};

    // empirical sigma on a mid-gray image
    Image gray(256, 256);
    for (auto& p : gray.pixels) p = 128;
    for (const double sigma : {5.0, 15.0}) {
        const Image noisy = gaussian_noise(gray, sigma, 77);
        double sum = 0.0, sq = 0.0;
        for (size_t i = 0; i < noisy.pixels.size(); ++i) {
            const double dif = static_cast<double>(noisy.pixels[i]) - 128.0;
            sum += dif;
            sq += dif * dif;
        }
        const double n = static_cast<double>(noisy.pixels.size());
        const double stddev = std::sqrt(sq / n - (sum / n) * (sum / n));
        if (std::abs(stddev - sigma) > 0.05 * sigma)
            return {"degradation-exactness", false,
                    "gaussian empirical sigma " + std::to_string(stddev) + " vs " +
                        std::to_string(sigma)};
    }

    const Image sp = salt_pepper(big, 0.05, 123);
    size_t corrupted = 0;
    for (int y = 0; y < sp.height; ++y)
        for (int x = 0; x < sp.width; ++x) {
            bool differs = false;
            for (int c = 0; c < 3; ++c) differs = differs || sp.at(y, x, c) != big.at(y, x, c);
            corrupted += differs ? 1 : 0;
        }
    const double frac = static_cast<double>(corrupted) / (512.0 * 512.0);
    if (std::abs(frac - 0.05) > 0.01)
        return {"degradation-exactness", false, "salt-pepper fraction " + std::to_string(frac)};

    const Image dark = blind(big);
    for (uint8_t p : dark.pixels)
        if (p != 0) return {"degradation-exactness", false, "blind output not all-zero"};
    if (dark.height != big.height || dark.width != big.width)
        return {"degradation-exactness", false, "blind changed dimensions"};

    for (auto level : {DegradationLevel::L1, DegradationLevel::L2, DegradationLevel::L3}) {
        const Image a = degrade(big, level, 99);
        const Image b = degrade(big, level, 99);
        if (a.pixels != b.pixels)
            return {"degradation-exactness", false, "degradation not deterministic per seed"};
    }
    return {"degradation-exactness", true,
            "dims 358/204/76, sigma within 5%, salt-pepper 0.05 +/- 0.01, blind zero, "
            "deterministic"};
}

inline CheckResult check_metric_fixtures() {
    // causal decay: 100 anchor-correct, 25 flips -> exactly 0.25
    std::vector<EvalRecord> anchor, degraded;
    for (int i = 0; i < 130; ++i) {
        const bool anchor_correct = i < 100;
        anchor.push_back(make_record(i, "none", "color", anchor_correct ? "red" : "blue", "red"));
        const bool degraded_correct = anchor_correct ? (i >= 25) : (i % 2 == 0);
        degraded.push_back(
            make_record(i, "blind", "color", degraded_correct ? "red" : "blue", "red"));
    }
    if (causal_decay(anchor, degraded) != 0.25)
        return {"metric-fixtures", false, "causal decay fixture != 0.25"};

    std::vector<DialogueRecord> dialogues = {{0, {true, true}}, {1, {true, false}}};
    if (mtem_at_1(dialogues) != 50.0)
        return {"metric-fixtures", false, "mtem fixture != 50"};

    std::vector<EvalRecord> counts = {make_record(0, "none", "count", "4", "2"),
                                      make_record(1, "none", "count", "5", "5")};
    if (mae(counts) != 1.0) return {"metric-fixtures", false, "mae fixture != 1.0"};

    std::vector<EvalRecord> accs = {make_record(0, "none", "color", "red", "red"),
                                    make_record(1, "none", "color", "red", "red"),
                                    make_record(2, "none", "color", "red", "red"),
                                    make_record(3, "none", "color", "blue", "red")};
    if (accuracy(accs) != 0.75) return {"metric-fixtures", false, "accuracy fixture != 0.75"};
    return {"metric-fixtures", true, "causal decay 0.25, mtem 50, mae 1.0, acc 0.75 exact"};
}

// The harness must detect prompt-following: a responder that always emits
// the prompt's target class scores ~0 under mislead conditions, and a
// gold-agnostic random responder sits at chance on blind color questions.
inline CheckResult check_mislead_harness() {
    auto split = generate_split(2025, 40);
    SuiteOptions opt;
    opt.conditions = parse_conditions("mislead_repetition,mislead_credibility,mislead_logical");
    SycophantResponder sycophant;
    auto report = run_reliance_suite_with(sycophant, split, opt);
    for (const auto& row : report.rows)
        if (row.metric == "acc" && row.value > 0.05)
            return {"mislead-harness", false,
                    "sycophant scored " + std::to_string(row.value) + " under " + row.condition};

    auto big = generate_split(2026, 1200); // 2400 color questions
    SuiteOptions blind_opt;
    blind_opt.conditions = parse_conditions("blind");
    RandomChoiceResponder random_responder(4242);
    auto blind_report = run_reliance_suite_with(random_responder, big, blind_opt);
    std::vector<EvalRecord> color_records;
    for (const auto& r : blind_report.records)
        if (r.task == "color") color_records.push_back(r);
    if (color_records.size() < 2000)
        return {"mislead-harness", false, "too few color records for the chance-rate check"};
    const double acc = accuracy(color_records);
    if (std::abs(acc - 0.25) > 0.03)
        return {"mislead-harness", false,
                "random responder blind color acc " + std::to_string(acc) + " outside 0.25+/-0.03"};

    auto prompt = render_mislead(MisleadKind::Repetition, "red", "blue", color_options(),
                                 "What color is the square at row 1, column 1?");
    size_t hits = 0;
    for (size_t pos = prompt.text.find("blue"); pos != std::string::npos;
         pos = prompt.text.find("blue", pos + 1))
        ++hits;
    if (hits < 3) return {"mislead-harness", false, "repetition template asserts target < 3 times"};
    return {"mislead-harness", true,
            "sycophant acc 0 under mislead, random responder at " + std::to_string(acc) +
                " on blind color"};
}

// Per-layer visual fraction in [0,1], visual+text mass = 1 within 1e-9.
inline CheckResult check_attention_profile(int samples = 100) {
    using namespace detail;
    auto params = init_model(ModelConfig{}, 3);
    auto split = generate_split(909, (samples + 4) / 5 + 1);
    int used = 0;
    std::vector<double> layer_acc(params.blocks.size(), 0.0);
    for (const auto& s : split.samples) {
        if (used >= samples) break;
        const auto& img = *split.images.at(s.image);
        const auto [gh, gw] = patch_grid_dims(img.height, img.width);
        auto stream = make_stream(s.question, s.answer, gh * gw);
        NoGradGuard ng;
        ForwardTrace trace;
        model_forward(stream, &img, params, &trace);
        std::vector<int> query_rows;
        for (int i = 0; i < stream.size(); ++i)
            if (stream.loss_mask[i]) query_rows.push_back(i);
        for (size_t l = 0; l < params.blocks.size(); ++l) {
            double visual = 0.0, text = 0.0;
            for (int hh = 0; hh < trace.heads; ++hh)
                for (int qi : query_rows)
                    for (int j = 0; j <= qi; ++j) {
                        const double p =
                            trace.layer_probs[l][(static_cast<size_t>(hh) * trace.n + qi) *
                                                     trace.n + j];
                        if (stream.entries[j].tag == Modality::Visual) visual += p;
                        else text += p;
                    }
            const double denom = static_cast<double>(trace.heads) * query_rows.size();
            visual /= denom;
            text /= denom;
            if (visual < 0.0 || visual > 1.0)
                return {"attention-profile", false, "visual fraction outside [0,1]"};
            if (std::abs(visual + text - 1.0) > 1e-9)
                return {"attention-profile", false, "visual+text mass deviates from 1"};
            layer_acc[l] += visual;
        }
        ++used;
    }
    if (used < samples)
        return {"attention-profile", false, "not enough samples for the profile check"};
    std::ostringstream os;
    os << used << " samples, per-layer mean visual fraction:";
    for (double v : layer_acc) os << " " << v / used;
    return {"attention-profile", true, os.str()};
}

inline CheckResult check_gen_determinism() {
    auto a = generate_split(777, 20);
    auto b = generate_split(777, 20);
    if (a.samples.size() != b.samples.size())
        return {"gen-determinism", false, "sample counts differ"};
    for (size_t i = 0; i < a.samples.size(); ++i) {
        const auto& x = a.samples[i];
        const auto& y = b.samples[i];
        if (x.image != y.image || x.question != y.question || x.answer != y.answer ||
            x.task != y.task || x.dialogue_id != y.dialogue_id || x.turn != y.turn)
            return {"gen-determinism", false, "sample " + std::to_string(i) + " differs"};
    }
    for (const auto& [name, img] : a.images)
        if (img->pixels != b.images.at(name)->pixels)
            return {"gen-determinism", false, "image " + name + " differs"};
    return {"gen-determinism", true, "two generations from one seed are identical"};
}

inline std::vector<CheckResult> run_all() {
    return {check_gradient_fidelity(), check_causal_exactness(),  check_modality_isolation(),
            check_freeze_schedule(),   check_degradation_exactness(), check_metric_fixtures(),
            check_mislead_harness(),   check_attention_profile(), check_gen_determinism()};
}

} // namespace selftest
} // namespace patchlm
