#include "patchlm/scenes.hpp"
#include "patchlm/trainer.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

using namespace patchlm;

namespace {

ModelConfig tiny_config(int d = 16, int layers = 2, int heads = 2) {
    ModelConfig cfg;
    cfg.d = d;
    cfg.layers = layers;
    cfg.heads = heads;
    cfg.d_mid = d / 2;
    cfg.maxgrid = 8;
    return cfg;
}

std::vector<TrainSample> tiny_dataset(uint64_t seed, int scenes, int grid = 2) {
    std::vector<TrainSample> out;
    for (int i = 0; i < scenes; ++i) {
        Scene scene = generate_scene(derive_seed(seed, i), grid, grid, 2);
        auto qa = make_qa(scene.annotation, derive_seed(seed, i), "x", i);
        auto img = std::make_shared<Image>(std::move(scene.image));
        for (const auto& s : qa) {
            const auto [gh, gw] = patch_grid_dims(img->height, img->width);
            out.push_back({make_stream(s.question, s.answer, gh * gw), img});
        }
    }
    return out;
}

std::map<std::string, std::vector<double>> snapshot(const ModelParams& p) {
    std::map<std::string, std::vector<double>> out;
    for (auto& [name, t] : p.named_tensors()) out[name] = t->data;
    return out;
}

} // namespace

TEST_CASE("lr schedule endpoints and warmup") {
    REQUIRE(lr_schedule(0, 1000, 0.03, 1.0) == 0.0);
    const int warm_end = static_cast<int>(std::ceil(0.03 * 1000));
    const double at_warm = lr_schedule(warm_end, 1000, 0.03, 1.0);
    REQUIRE(at_warm <= 1.0);
    REQUIRE(at_warm >= 1.0 - 1.0 / (0.03 * 1000));
    REQUIRE(std::abs(lr_schedule(1000, 1000, 0.03, 1.0)) < 1e-12);
    REQUIRE_THROWS_AS(lr_schedule(-1, 10, 0.03, 1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(lr_schedule(11, 10, 0.03, 1.0), std::invalid_argument);
}

TEST_CASE("lr schedule is continuous") {
    SplitMix64 rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const int total = 50 + static_cast<int>(rng.next_below(5000));
        const double warmup = 0.01 + rng.next_double() * 0.5;
        const double max_lr = 0.1 + rng.next_double();
        const double bound =
            max_lr * std::max(1.0 / (warmup * total),
                              3.14159265358979323846 / (2.0 * (1.0 - warmup) * total));
        for (int step = 0; step < total; ++step) {
            const double a = lr_schedule(step, total, warmup, max_lr);
            const double b = lr_schedule(step + 1, total, warmup, max_lr);
            REQUIRE(std::abs(a - b) <= bound * (1.0 + 1e-12));
        }
    }
}

TEST_CASE("adamw zero gradient and zero decay leaves parameters untouched") {
    auto p = Tensor::create({4}, true);
    p->data = {1.0, -2.0, 0.5, 3.25};
    p->zero_grad();
    const auto before = p->data;
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW opt({p}, cfg);
    opt.step(0.1);
    REQUIRE(std::memcmp(before.data(), p->data.data(), 4 * sizeof(double)) == 0);
}

TEST_CASE("adamw first step matches the hand-evaluated recurrence") {
    auto p = Tensor::create({1}, true);
    p->data = {2.0};
    p->grad = {1.0};
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW opt({p}, cfg);
    const double lr = 0.01;
    opt.step(lr);
    // m=0.1, v=0.001; bias-corrected to 1 and 1; update = lr * 1/(1+eps)
    const double expected = 2.0 - lr * (1.0 / (1.0 + cfg.eps));
    REQUIRE(p->data[0] == Catch::Approx(expected).epsilon(1e-15));
}

TEST_CASE("adamw decoupled decay without gradient") {
    auto p = Tensor::create({1}, true);
    p->data = {4.0};
    p->grad = {0.0};
    AdamW opt({p}, {});
    const double lr = 0.5;
    opt.step(lr);
    REQUIRE(p->data[0] == Catch::Approx(4.0 * (1.0 - lr * 0.01)).epsilon(1e-15));
}

TEST_CASE("adamw demands gradients on trainable tensors") {
    auto p = Tensor::create({3}, true);
    AdamW opt({p}, {});
    REQUIRE_THROWS_WITH(opt.step(0.1), Catch::Matchers::ContainsSubstring("missing gradient"));
}

TEST_CASE("stage trainable sets match the freeze schedule") {
    auto params = init_model(tiny_config(), 50);
    auto named = params.named_tensors();
    auto names_of = [&](const std::vector<TensorPtr>& set) {
        std::vector<std::string> out;
        for (auto& [name, t] : named)
            for (auto& s : set)
                if (s == t) out.push_back(name);
        return out;
    };
    auto s1 = names_of(stage_trainable(Stage::I, params));
    REQUIRE(s1 == std::vector<std::string>{"patch.conv1.w", "patch.conv1.b", "patch.conv2.w",
                                           "patch.conv2.b", "patch.pos"});
    auto s2 = names_of(stage_trainable(Stage::II, params));
    REQUIRE(s2.size() == 5 + 11 * params.blocks.size());
    for (const auto& n : s2) {
        const bool patch = n.rfind("patch.", 0) == 0;
        const bool visual = n.size() > 2 && n.substr(n.size() - 2) == ".v";
        REQUIRE((patch || visual));
    }
    auto s3 = stage_trainable(Stage::III, params);
    REQUIRE(s3.size() == named.size());
}

TEST_CASE("training loss starts near ln V and has mean semantics") {
    auto params = init_model(tiny_config(), 51);
    auto data = tiny_dataset(52, 2);
    auto batch = std::vector<TrainSample>(data.begin(), data.begin() + 4);
    const double loss = training_loss(batch, params)->data[0];
    REQUIRE(std::abs(loss - std::log(262.0)) < 0.5);

    // duplicating a stream leaves the mean unchanged
    std::vector<TrainSample> twice = {batch[0], batch[0]};
    std::vector<TrainSample> once = {batch[0]};
    REQUIRE(training_loss(twice, params)->data[0] ==
            Catch::Approx(training_loss(once, params)->data[0]).epsilon(1e-15));
}

TEST_CASE("loss is bit-invariant to question-span logit perturbations") {
    // perturbing any non-masked position's inputs does not change the loss:
    // here we check the mask directly through cross_entropy semantics
    auto params = init_model(tiny_config(), 53);
    auto data = tiny_dataset(54, 1);
    const auto& sample = data[0];
    auto logits = model_forward(sample.stream, sample.image.get(), params);
    const int n = sample.stream.size();
    std::vector<int> targets(n, 0);
    std::vector<uint8_t> mask(n, 0);
    for (int i = 0; i + 1 < n; ++i) {
        mask[i] = sample.stream.loss_mask[i + 1];
        if (mask[i]) targets[i] = sample.stream.entries[i + 1].payload;
    }
    const double base = ops::cross_entropy(logits, targets, mask)->data[0];
    auto corrupted = Tensor::from_data(logits->shape, logits->data);
    for (int i = sample.stream.question.begin; i < sample.stream.question.end; ++i)
        for (int j = 0; j < corrupted->cols(); ++j) corrupted->data[i * corrupted->cols() + j] += 7.5;
    const double after = ops::cross_entropy(corrupted, targets, mask)->data[0];
    REQUIRE(std::memcmp(&base, &after, sizeof(double)) == 0);
}

TEST_CASE("freeze exactness across stages") {
    auto params = init_model(tiny_config(), 55);
    auto data = tiny_dataset(56, 4);
    const auto init = snapshot(params);
    TrainOptions opt;
    opt.batch_size = 4;
    train(params, {{Stage::I, 1e-3, 1, "tiny"}}, data, 57, opt);
    for (auto& [name, t] : params.named_tensors()) {
        if (name.rfind("patch.", 0) == 0) continue;
        REQUIRE(t->data == init.at(name));
    }
}

TEST_CASE("training is deterministic and thread-count independent") {
    auto data = tiny_dataset(58, 6);
    TrainOptions opt1;
    opt1.batch_size = 4;
    opt1.threads = 1;
    TrainOptions opt2 = opt1;
    opt2.threads = 2;

    auto run = [&](const TrainOptions& opt) {
        auto params = init_model(tiny_config(), 59);
        auto log = train(params, {{Stage::III, 1e-3, 2, "tiny"}}, data, 60, opt);
        return std::pair{snapshot(params), log};
    };
    auto [p1, log1] = run(opt1);
    auto [p2, log2] = run(opt2);
    REQUIRE(log1.size() == log2.size());
    for (size_t i = 0; i < log1.size(); ++i) {
        REQUIRE(std::memcmp(&log1[i].loss, &log2[i].loss, sizeof(double)) == 0);
        REQUIRE(log1[i].lr == log2[i].lr);
    }
    for (auto& [name, values] : p1) REQUIRE(values == p2.at(name));

    auto [p3, log3] = run(opt1);
    for (auto& [name, values] : p1) REQUIRE(values == p3.at(name));
}

TEST_CASE("overfit sanity: 200 steps on 64 memorizable samples") {
    auto data = tiny_dataset(61, 13); // 13 scenes -> 65 samples
    data.resize(64);
    auto params = init_model(tiny_config(24, 2, 2), 62);
    TrainOptions opt;
    opt.batch_size = 8;
    opt.threads = 2;
    // 64 samples, batch 8 -> 8 steps per epoch; 25 epochs = 200 steps
    auto log = train(params, {{Stage::III, 5e-3, 25, "overfit"}}, data, 63, opt);
    REQUIRE(log.size() == 200);
    const double initial = log.front().loss;
    const double final = log.back().loss;
    INFO("initial " << initial << " final " << final);
    REQUIRE(final < 0.1 * initial);

    // 10-step moving average decreases over the first 50 steps
    auto window = [&](int begin) {
        double s = 0.0;
        for (int i = begin; i < begin + 10; ++i) s += log[i].loss;
        return s / 10.0;
    };
    for (int w = 0; w + 10 <= 50; w += 10) REQUIRE(window(w) > window(w + 10));
}
