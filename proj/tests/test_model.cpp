#include "patchlm/checkpoint.hpp"
#include "patchlm/model.hpp"
#include "patchlm/selftest.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

using namespace patchlm;

namespace {

Image random_image(uint64_t seed, int h, int w) {
    Image img(h, w);
    SplitMix64 rng(seed);
    for (auto& p : img.pixels) p = static_cast<uint8_t>(rng.next_below(256));
    return img;
}

ModelConfig tiny_config(int d = 16, int layers = 2, int heads = 2) {
    ModelConfig cfg;
    cfg.d = d;
    cfg.layers = layers;
    cfg.heads = heads;
    cfg.d_mid = d / 2;
    cfg.maxgrid = 8;
    return cfg;
}

void fill_random(const TensorPtr& t, SplitMix64& rng, double stddev) {
    for (auto& v : t->data) v = rng.next_gaussian() * stddev;
}

TensorPtr random_rows(int n, int d, uint64_t seed) {
    auto t = Tensor::create({n, d});
    SplitMix64 rng(seed);
    for (auto& v : t->data) v = rng.next_gaussian();
    return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(double)) == 0;
}

} // namespace

TEST_CASE("project_qkv degenerates to plain matmul on all-text streams") {
    auto params = init_model(tiny_config(), 1);
    auto& block = params.blocks[0];
    SplitMix64 rng(2);
    fill_random(block.visual.wq, rng, 0.5); // visual side may hold anything
    auto x = random_rows(5, 16, 3);
    std::vector<Modality> tags(5, Modality::Text);
    auto qkv = project_qkv(x, tags, block);
    auto plain = ops::matmul(x, block.text.wq);
    REQUIRE(bit_equal(*qkv.q, *plain));
}

TEST_CASE("project_qkv selects weights row by row") {
    auto params = init_model(tiny_config(), 4);
    auto& block = params.blocks[0];
    for (size_t i = 0; i < block.text.wq->size(); ++i)
        block.visual.wq->data[i] = 2.0 * block.text.wq->data[i];
    auto x = random_rows(4, 16, 5);
    std::vector<Modality> text_tags(4, Modality::Text);
    std::vector<Modality> mixed_tags = {Modality::Text, Modality::Visual, Modality::Text,
                                        Modality::Text};
    auto all_text = project_qkv(x, text_tags, block);
    auto mixed = project_qkv(x, mixed_tags, block);
    for (int j = 0; j < 16; ++j) {
        REQUIRE(mixed.q->data[1 * 16 + j] ==
                Catch::Approx(2.0 * all_text.q->data[1 * 16 + j]).margin(1e-12));
        REQUIRE(mixed.q->data[0 * 16 + j] == all_text.q->data[0 * 16 + j]);
        REQUIRE(mixed.q->data[2 * 16 + j] == all_text.q->data[2 * 16 + j]);
    }
}

TEST_CASE("project_qkv gradient over both modality weights") {
    auto params = init_model(tiny_config(16, 1, 2), 6);
    auto& block = params.blocks[0];
    SplitMix64 rng(7);
    fill_random(block.visual.wq, rng, 0.4);
    fill_random(block.text.wq, rng, 0.4);
    auto x = random_rows(6, 16, 8);
    std::vector<Modality> tags = {Modality::Text, Modality::Visual, Modality::Visual,
                                  Modality::Text, Modality::Visual, Modality::Text};
    auto w = random_rows(6, 16, 9);
    w->requires_grad = false;
    auto loss_fn = [&]() {
        return ops::sum(ops::mul(ops::rowwise_matmul_select(x, tags, block.visual.wq,
                                                            block.text.wq),
                                 w));
    };
    for (auto& t : {block.visual.wq, block.text.wq}) {
        t->zero_grad();
        ops::backward(loss_fn());
        SplitMix64 pick(10);
        for (int c = 0; c < 20; ++c) {
            const size_t i = pick.next_below(t->size());
            const double analytic = t->grad[i];
            const double saved = t->data[i];
            const double h = 1e-5;
            t->data[i] = saved + h;
            const double up = loss_fn()->data[0];
            t->data[i] = saved - h;
            const double down = loss_fn()->data[0];
            t->data[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            REQUIRE(std::abs(analytic - fd) / std::max(1e-8, std::abs(fd)) < 1e-4);
        }
    }
}

TEST_CASE("block with zero output projections is the identity") {
    auto params = init_model(tiny_config(16, 1, 2), 11);
    auto& block = params.blocks[0];
    std::fill(block.wo->data.begin(), block.wo->data.end(), 0.0);
    for (auto m : {&block.visual, &block.text}) {
        std::fill(m->ffn.w2->data.begin(), m->ffn.w2->data.end(), 0.0);
        std::fill(m->ffn.b2->data.begin(), m->ffn.b2->data.end(), 0.0);
    }
    auto x = random_rows(5, 16, 12);
    std::vector<Modality> tags = {Modality::Text, Modality::Visual, Modality::Text,
                                  Modality::Visual, Modality::Text};
    auto y = block_forward(x, tags, block, 2);
    REQUIRE(bit_equal(*x, *y));
}

TEST_CASE("all-text block output is bit-invariant to visual parameters") {
    auto params = init_model(tiny_config(16, 1, 2), 13);
    auto& block = params.blocks[0];
    auto x = random_rows(6, 16, 14);
    std::vector<Modality> tags(6, Modality::Text);
    auto base = block_forward(x, tags, block, 2);
    SplitMix64 rng(15);
    for (auto t : {block.visual.wq, block.visual.wk, block.visual.wv, block.visual.ln1.gamma,
                   block.visual.ln1.beta, block.visual.ln2.gamma, block.visual.ln2.beta,
                   block.visual.ffn.w1, block.visual.ffn.b1, block.visual.ffn.w2,
                   block.visual.ffn.b2})
        fill_random(t, rng, 1.0);
    auto perturbed = block_forward(x, tags, block, 2);
    REQUIRE(bit_equal(*base, *perturbed));
}

TEST_CASE("full block gradient check") {
    auto params = init_model(tiny_config(16, 1, 2), 16);
    auto& block = params.blocks[0];
    SplitMix64 rng(17);
    for (auto& [name, t] : params.named_tensors())
        if (name.rfind("block0", 0) == 0 && name.find("gamma") == std::string::npos)
            fill_random(t, rng, 0.3);
    auto x = random_rows(5, 16, 18);
    x->requires_grad = true;
    std::vector<Modality> tags = {Modality::Text, Modality::Visual, Modality::Visual,
                                  Modality::Text, Modality::Text};
    auto w = random_rows(5, 16, 19);
    w->requires_grad = false;
    auto loss_fn = [&]() { return ops::sum(ops::mul(block_forward(x, tags, block, 2), w)); };
    std::vector<TensorPtr> checked = {x,
                                      block.visual.wv,
                                      block.text.wq,
                                      block.wo,
                                      block.visual.ln1.gamma,
                                      block.text.ln2.beta,
                                      block.visual.ffn.w1,
                                      block.text.ffn.w2,
                                      block.text.ffn.b1};
    for (auto& t : checked) t->zero_grad();
    ops::backward(loss_fn());
    std::vector<double> analytic;
    SplitMix64 pick(20);
    std::vector<std::pair<TensorPtr, size_t>> coords;
    for (auto& t : checked)
        for (int c = 0; c < 6; ++c) {
            const size_t i = pick.next_below(t->size());
            coords.emplace_back(t, i);
            analytic.push_back(t->grad.empty() ? 0.0 : t->grad[i]);
        }
    for (size_t k = 0; k < coords.size(); ++k) {
        auto& [t, i] = coords[k];
        const double saved = t->data[i];
        const double h = 1e-5;
        t->data[i] = saved + h;
        const double up = loss_fn()->data[0];
        t->data[i] = saved - h;
        const double down = loss_fn()->data[0];
        t->data[i] = saved;
        const double fd = (up - down) / (2.0 * h);
        INFO("coordinate " << k);
        REQUIRE(std::abs(analytic[k] - fd) / std::max(1e-8, std::abs(fd)) < 1e-4);
    }
}

TEST_CASE("depth-zero model is an embedding readout") {
    auto cfg = tiny_config(16, 0, 2);
    auto params = init_model(cfg, 21);
    auto stream = make_stream("ab", "c", 0);
    auto logits = model_forward(stream, nullptr, params);

    std::vector<int> ids;
    for (const auto& e : stream.entries) ids.push_back(e.payload);
    auto direct = ops::add_bias_rows(
        ops::matmul(ops::layernorm(embed_text(ids, params.e_t), params.final_ln.gamma,
                                   params.final_ln.beta),
                    params.head_w),
        params.head_b);
    REQUIRE(bit_equal(*logits, *direct));
}

TEST_CASE("model rejects visual count mismatches") {
    auto params = init_model(tiny_config(), 22);
    auto stream = make_stream("q", "a", 4);
    Image img = random_image(23, 64, 64); // embeds to 16 tokens, stream says 4
    REQUIRE_THROWS_WITH(model_forward(stream, &img, params),
                        Catch::Matchers::ContainsSubstring("visual tokens"));
    REQUIRE_THROWS_WITH(model_forward(stream, nullptr, params),
                        Catch::Matchers::ContainsSubstring("no image"));
}

TEST_CASE("later entries never influence earlier logits") {
    auto params = init_model(tiny_config(), 24);
    Image img = random_image(25, 32, 32);
    auto stream = make_stream("what", "yes", 4);
    NoGradGuard ng;
    auto base = model_forward(stream, &img, params);
    TokenStream mutated = stream;
    mutated.entries.back().payload = vocab::EOS; // answer's last byte
    REQUIRE(mutated.entries.size() == stream.entries.size());
    auto changed = model_forward(mutated, &img, params);
    const int last = stream.size() - 1;
    REQUIRE(std::memcmp(base->data.data(), changed->data.data(),
                        static_cast<size_t>(last) * base->cols() * sizeof(double)) == 0);
}

TEST_CASE("symmetric isolation: visual rows ignore the text FFN path") {
    auto params = init_model(tiny_config(16, 1, 2), 26);
    // stream: BOS followed only by visual entries, empty answer
    TokenStream stream;
    stream.entries.push_back({Modality::Text, vocab::BOS});
    stream.loss_mask.push_back(0);
    stream.image.begin = 1;
    for (int i = 0; i < 4; ++i) {
        stream.entries.push_back({Modality::Visual, i});
        stream.loss_mask.push_back(0);
    }
    stream.image.end = 5;
    Image img = random_image(27, 32, 32);
    NoGradGuard ng;
    auto base = model_forward(stream, &img, params);
    SplitMix64 rng(28);
    auto& text = params.blocks[0].text;
    for (auto t : {text.ffn.w1, text.ffn.b1, text.ffn.w2, text.ffn.b2, text.ln2.gamma,
                   text.ln2.beta})
        fill_random(t, rng, 1.0);
    auto perturbed = model_forward(stream, &img, params);
    const int d = base->cols();
    // BOS row moves, visual rows must not
    REQUIRE(std::memcmp(base->data.data(), perturbed->data.data(), d * sizeof(double)) != 0);
    REQUIRE(std::memcmp(base->data.data() + d, perturbed->data.data() + d,
                        4 * static_cast<size_t>(d) * sizeof(double)) == 0);
}

TEST_CASE("swapping two visual entries is not an invariance") {
    auto params = init_model(tiny_config(), 29);
    SplitMix64 rng(30);
    for (auto& v : params.patch.pos->data) v = rng.next_gaussian() * 0.2;
    Image img = random_image(31, 32, 32);
    auto stream = make_stream("q", "a", 4);
    NoGradGuard ng;
    auto base = model_forward(stream, &img, params);
    TokenStream swapped = stream;
    std::swap(swapped.entries[stream.image.begin].payload,
              swapped.entries[stream.image.begin + 1].payload);
    auto perturbed = model_forward(swapped, &img, params);
    REQUIRE_FALSE(bit_equal(*base, *perturbed));
}

TEST_CASE("generate respects max_new and EOS forcing") {
    auto params = init_model(tiny_config(), 32);
    auto prefix = make_prefix_stream("hello", 0);
    REQUIRE(generate(prefix, nullptr, params, 0).empty());

    params.head_b->data[vocab::EOS] = 50.0;
    auto res = generate_ids(prefix, nullptr, params, 8);
    REQUIRE(res.hit_eos);
    REQUIRE(res.ids.empty());
    REQUIRE(generate(prefix, nullptr, params, 8).empty());
}

TEST_CASE("greedy decode is deterministic and self-consistent") {
    auto params = init_model(tiny_config(), 33);
    Image img = random_image(34, 32, 32);
    auto prefix = make_prefix_stream("color?", 4);
    auto a = generate_ids(prefix, &img, params, 6);
    auto b = generate_ids(prefix, &img, params, 6);
    REQUIRE(a.ids == b.ids);
    REQUIRE(a.hit_eos == b.hit_eos);

    // forced re-scoring reproduces the same argmax at every step
    NoGradGuard ng;
    TokenStream s = prefix;
    for (size_t step = 0; step < a.ids.size(); ++step) {
        auto logits = model_forward(s, &img, params);
        REQUIRE(argmax_row(*logits, s.size() - 1) == a.ids[step]);
        s.entries.push_back({Modality::Text, a.ids[step]});
        s.loss_mask.push_back(0);
    }
    if (a.hit_eos) {
        auto logits = model_forward(s, &img, params);
        REQUIRE(argmax_row(*logits, s.size() - 1) == vocab::EOS);
    }
}

TEST_CASE("attention allocation: uniform scores over one visual and one text key") {
    auto cfg = tiny_config(16, 1, 2);
    auto params = init_model(cfg, 35);
    auto& block = params.blocks[0];
    // zero query/key projections -> all scores equal -> uniform attention
    std::fill(block.visual.wq->data.begin(), block.visual.wq->data.end(), 0.0);
    std::fill(block.text.wq->data.begin(), block.text.wq->data.end(), 0.0);
    std::fill(block.visual.wk->data.begin(), block.visual.wk->data.end(), 0.0);
    std::fill(block.text.wk->data.begin(), block.text.wk->data.end(), 0.0);

    TokenStream stream;
    stream.entries.push_back({Modality::Visual, 0});
    stream.loss_mask.push_back(0);
    stream.entries.push_back({Modality::Text, static_cast<int>('x')});
    stream.loss_mask.push_back(1);
    stream.image = {0, 1};
    stream.answer = {1, 2};
    Image img = random_image(36, 16, 16); // one visual token

    auto profile = attention_allocation(stream, &img, params);
    REQUIRE(profile.size() == 1);
    REQUIRE(profile[0] == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("attention allocation stays in bounds on a blind image") {
    auto params = init_model(tiny_config(), 37);
    std::fill(params.patch.pos->data.begin(), params.patch.pos->data.end(), 0.0);
    std::fill(params.patch.conv1_b->data.begin(), params.patch.conv1_b->data.end(), 0.0);
    std::fill(params.patch.conv2_b->data.begin(), params.patch.conv2_b->data.end(), 0.0);
    Image img(32, 32); // zero image
    auto stream = make_stream("q", "a", 4);
    auto profile = attention_allocation(stream, &img, params);
    REQUIRE(profile.size() == 2);
    for (double v : profile) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
}

TEST_CASE("attention allocation requires visual tokens") {
    auto params = init_model(tiny_config(), 38);
    auto stream = make_stream("q", "a", 0);
    REQUIRE_THROWS_WITH(attention_allocation(stream, nullptr, params),
                        Catch::Matchers::ContainsSubstring("no visual tokens"));
}

TEST_CASE("full-model gradient fidelity invariant") {
    auto res = selftest::check_gradient_fidelity();
    INFO(res.detail);
    REQUIRE(res.pass);
}

TEST_CASE("checkpoint round trip is bit exact") {
    namespace fs = std::filesystem;
    auto params = init_model(tiny_config(), 39);
    SplitMix64 rng(40);
    for (auto& [name, t] : params.named_tensors()) fill_random(t, rng, 0.37);
    const auto dir = fs::temp_directory_path() / "patchlm_ckpt_test";
    fs::create_directories(dir);
    const std::string path = (dir / "model.ckpt").string();
    checkpoint::save(params, path);
    auto loaded = checkpoint::load(path);
    REQUIRE(loaded.cfg.d == params.cfg.d);
    REQUIRE(loaded.cfg.layers == params.cfg.layers);
    auto a = params.named_tensors();
    auto b = loaded.named_tensors();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].first == b[i].first);
        REQUIRE(bit_equal(*a[i].second, *b[i].second));
    }
    // saving the loaded params reproduces the file byte for byte
    const std::string path2 = (dir / "model2.ckpt").string();
    checkpoint::save(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(c1 == c2);
    fs::remove_all(dir);
}

TEST_CASE("checkpoint load rejects bad magic") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "patchlm_ckpt_bad";
    fs::create_directories(dir);
    const std::string path = (dir / "bad.ckpt").string();
    std::ofstream(path, std::ios::binary) << "NOTACKPT garbage";
    REQUIRE_THROWS_WITH(checkpoint::load(path), Catch::Matchers::ContainsSubstring("magic"));
    REQUIRE_THROWS_AS(checkpoint::load((dir / "missing.ckpt").string()), std::runtime_error);
    fs::remove_all(dir);
}

TEST_CASE("text positional table toggle changes outputs and persists") {
    namespace fs = std::filesystem;
    auto cfg = tiny_config();
    auto params_off = init_model(cfg, 41);
    cfg.text_pos = true;
    auto params_on = init_model(cfg, 41);
    SplitMix64 rng(42);
    fill_random(params_on.text_pos_table, rng, 0.5);
    auto stream = make_stream("ab", "c", 0);
    NoGradGuard ng;
    auto off = model_forward(stream, nullptr, params_off);
    auto on = model_forward(stream, nullptr, params_on);
    REQUIRE_FALSE(bit_equal(*off, *on));

    const auto dir = fs::temp_directory_path() / "patchlm_ckpt_pos";
    fs::create_directories(dir);
    const std::string path = (dir / "pos.ckpt").string();
    checkpoint::save(params_on, path);
    auto loaded = checkpoint::load(path);
    REQUIRE(loaded.cfg.text_pos);
    REQUIRE(bit_equal(*loaded.text_pos_table, *params_on.text_pos_table));
    fs::remove_all(dir);
}
