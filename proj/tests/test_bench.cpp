#include "patchlm/bench.hpp"
#include "patchlm/selftest.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace patchlm;

namespace {

Image random_image(uint64_t seed, int h, int w) {
    Image img(h, w);
    SplitMix64 rng(seed);
    for (auto& p : img.pixels) p = static_cast<uint8_t>(rng.next_below(256));
    return img;
}

} // namespace

TEST_CASE("degradation level table") {
    auto l1 = DegradationSpec::of(DegradationLevel::L1);
    auto l2 = DegradationSpec::of(DegradationLevel::L2);
    auto l3 = DegradationSpec::of(DegradationLevel::L3);
    REQUIRE(l1.scale == 0.70);
    REQUIRE(l1.noise == NoiseKind::Gaussian);
    REQUIRE(l1.noise_param == 5.0);
    REQUIRE(l2.scale == 0.40);
    REQUIRE(l2.noise_param == 15.0);
    REQUIRE(l3.scale == 0.15);
    REQUIRE(l3.noise == NoiseKind::SaltPepper);
    REQUIRE(l3.noise_param == 0.05);
    REQUIRE(l1.scale > l2.scale);
    REQUIRE(l2.scale > l3.scale);
    REQUIRE(DegradationSpec::of(DegradationLevel::Blind).noise == NoiseKind::Zero);
}

TEST_CASE("downsample identity and target dims") {
    Image img = random_image(1, 64, 64);
    Image same = downsample(img, 1.0);
    REQUIRE(same.pixels == img.pixels);

    Image big = random_image(2, 512, 512);
    Image small = downsample(big, 0.70);
    REQUIRE(small.height == 358);
    REQUIRE(small.width == 358);

    Image tiny = downsample(big, 0.001); // clamps to 1x1
    REQUIRE(tiny.height == 1);
    REQUIRE(tiny.width == 1);
    REQUIRE_THROWS_AS(downsample(big, 0.0), std::invalid_argument);
}

TEST_CASE("downsampling a constant image stays constant") {
    Image gray(100, 80);
    for (auto& p : gray.pixels) p = 142;
    for (double f : {0.7, 0.4, 0.15}) {
        Image out = downsample(gray, f);
        for (uint8_t p : out.pixels) REQUIRE(p == 142);
    }
}

TEST_CASE("gaussian noise statistics and determinism") {
    Image gray(256, 256);
    for (auto& p : gray.pixels) p = 128;
    REQUIRE(gaussian_noise(gray, 0.0, 1).pixels == gray.pixels);
    Image a = gaussian_noise(gray, 15.0, 7);
    Image b = gaussian_noise(gray, 15.0, 7);
    REQUIRE(a.pixels == b.pixels);
    double sum = 0.0, sq = 0.0;
    for (size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - 128.0;
        sum += d;
        sq += d * d;
    }
    const double n = static_cast<double>(a.pixels.size());
    const double stddev = std::sqrt(sq / n - (sum / n) * (sum / n));
    REQUIRE(std::abs(stddev - 15.0) < 0.75); // within 5%
}

TEST_CASE("salt and pepper extremes and corruption rate") {
    Image img = random_image(3, 512, 512);
    REQUIRE(salt_pepper(img, 0.0, 1).pixels == img.pixels);

    Image all = salt_pepper(img, 1.0, 2);
    for (int y = 0; y < all.height; ++y)
        for (int x = 0; x < all.width; ++x) {
            const uint8_t v = all.at(y, x, 0);
            REQUIRE((v == 0 || v == 255));
            REQUIRE(all.at(y, x, 1) == v);
            REQUIRE(all.at(y, x, 2) == v);
        }

    // mid-range image so every corruption is visible as a difference
    Image mid(512, 512);
    SplitMix64 rng(4);
    for (auto& p : mid.pixels) p = static_cast<uint8_t>(60 + rng.next_below(140));
    Image sp = salt_pepper(mid, 0.05, 5);
    size_t corrupted = 0;
    for (int y = 0; y < sp.height; ++y)
        for (int x = 0; x < sp.width; ++x) {
            bool differs = false;
            for (int c = 0; c < 3; ++c) differs = differs || sp.at(y, x, c) != mid.at(y, x, c);
            corrupted += differs ? 1 : 0;
        }
    const double frac = static_cast<double>(corrupted) / (512.0 * 512.0);
    REQUIRE(frac >= 0.04);
    REQUIRE(frac <= 0.06);
}

TEST_CASE("blind zeroes everything and is idempotent") {
    Image img = random_image(6, 40, 30);
    Image dark = blind(img);
    REQUIRE(dark.height == 40);
    REQUIRE(dark.width == 30);
    for (uint8_t p : dark.pixels) REQUIRE(p == 0);
    REQUIRE(blind(dark).pixels == dark.pixels);
}

TEST_CASE("degrade dispatch matches the level table") {
    Image img = random_image(7, 64, 64);
    REQUIRE(degrade(img, DegradationLevel::None, 1).pixels == img.pixels);
    Image l3 = degrade(img, DegradationLevel::L3, 1);
    REQUIRE(l3.height == 9); // floor(64 * 0.15)
    REQUIRE(l3.width == 9);
    REQUIRE(degrade(img, DegradationLevel::L1, 42).pixels ==
            degrade(img, DegradationLevel::L1, 42).pixels);
    Image dark = degrade(img, DegradationLevel::Blind, 1);
    REQUIRE(dark.height == 64);
    for (uint8_t p : dark.pixels) REQUIRE(p == 0);
}

TEST_CASE("mislead templates assert the target, never the gold") {
    for (auto kind : {MisleadKind::Repetition, MisleadKind::Credibility, MisleadKind::Logical}) {
        auto p = render_mislead(kind, "red", "blue", color_options(), "What color is it?");
        REQUIRE(p.text.find("blue") != std::string::npos);
        REQUIRE(p.text.find("red") == std::string::npos);
        REQUIRE(p.text.find("What color is it?") != std::string::npos);
        // deterministic
        auto q = render_mislead(kind, "red", "blue", color_options(), "What color is it?");
        REQUIRE(p.text == q.text);
    }
    auto rep = render_mislead(MisleadKind::Repetition, "red", "blue", color_options(), "Q?");
    size_t hits = 0;
    for (size_t pos = rep.text.find("blue"); pos != std::string::npos;
         pos = rep.text.find("blue", pos + 1))
        ++hits;
    REQUIRE(hits >= 3);
}

TEST_CASE("mislead target must differ from gold and belong to the options") {
    REQUIRE_THROWS_WITH(render_mislead(MisleadKind::Logical, "red", "red", color_options(), "Q"),
                        Catch::Matchers::ContainsSubstring("gold"));
    REQUIRE_THROWS_WITH(render_mislead(MisleadKind::Logical, "red", "purple", color_options(),
                                       "Q"),
                        Catch::Matchers::ContainsSubstring("options"));
    REQUIRE(mislead_target_for("color", "red") == "green");
    REQUIRE(mislead_target_for("color", "yellow") == "red");
    REQUIRE(mislead_target_for("count", "3") == "4");
    REQUIRE(mislead_target_for("relation", "no") == "yes");
}

TEST_CASE("metric basics") {
    std::vector<EvalRecord> recs = {make_record(0, "none", "color", "Red.", "red"),
                                    make_record(1, "none", "color", " RED\nx", "red"),
                                    make_record(2, "none", "color", "blue", "red"),
                                    make_record(3, "none", "color", "red", "red")};
    REQUIRE(accuracy(recs) == 0.75);
    REQUIRE_THROWS_AS(accuracy({}), std::invalid_argument);

    std::vector<EvalRecord> counts = {make_record(0, "none", "count", "4", "2"),
                                      make_record(1, "none", "count", "5", "5")};
    REQUIRE(mae(counts) == 1.0);
    std::vector<EvalRecord> perfect = {make_record(0, "none", "count", "3", "3")};
    REQUIRE(mae(perfect) == 0.0);
    // unparseable predictions are penalized with |gold|
    std::vector<EvalRecord> junk = {make_record(0, "none", "count", "banana", "3")};
    REQUIRE(mae(junk) == 3.0);
}

TEST_CASE("mtem@1 on fixtures and single-turn equivalence") {
    REQUIRE(mtem_at_1({{0, {true, true}}, {1, {true, false}}}) == 50.0);
    REQUIRE(mtem_at_1({{0, {true}}, {1, {true}}}) == 100.0);
    REQUIRE_THROWS_AS(mtem_at_1({}), std::invalid_argument);

    // with single-turn dialogues, mtem equals 100 * accuracy
    SplitMix64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<EvalRecord> recs;
        std::vector<DialogueRecord> dialogues;
        const int n = 5 + static_cast<int>(rng.next_below(20));
        for (int i = 0; i < n; ++i) {
            const bool ok = rng.next_u64() & 1;
            recs.push_back(make_record(i, "none", "color", ok ? "red" : "blue", "red"));
            dialogues.push_back({i, {ok}});
        }
        REQUIRE(mtem_at_1(dialogues) == Catch::Approx(100.0 * accuracy(recs)).epsilon(1e-12));
    }
}

TEST_CASE("mtem@1 is bounded by first-turn accuracy") {
    SplitMix64 rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<DialogueRecord> dialogues;
        const int n = 1 + static_cast<int>(rng.next_below(30));
        int first_correct = 0;
        for (int i = 0; i < n; ++i) {
            DialogueRecord d;
            d.dialogue_id = i;
            const int turns = 1 + static_cast<int>(rng.next_below(4));
            for (int t = 0; t < turns; ++t) d.turns.push_back(rng.next_u64() & 1);
            first_correct += d.turns[0] ? 1 : 0;
            dialogues.push_back(std::move(d));
        }
        REQUIRE(mtem_at_1(dialogues) <= 100.0 * first_correct / n + 1e-12);
    }
}

TEST_CASE("causal decay properties") {
    std::vector<EvalRecord> anchor, same, all_wrong;
    for (int i = 0; i < 40; ++i) {
        const bool ok = i % 3 != 0;
        anchor.push_back(make_record(i, "none", "color", ok ? "red" : "blue", "red"));
        same.push_back(make_record(i, "l1", "color", ok ? "red" : "blue", "red"));
        all_wrong.push_back(make_record(i, "blind", "color", "blue", "red"));
    }
    REQUIRE(causal_decay(anchor, same) == 0.0);
    REQUIRE(causal_decay(anchor, all_wrong) == 1.0);

    // records that were wrong under the anchor never affect the value
    auto anchor_extra = anchor;
    auto degraded_extra = same;
    for (int i = 100; i < 150; ++i) {
        anchor_extra.push_back(make_record(i, "none", "color", "blue", "red")); // wrong
        degraded_extra.push_back(
            make_record(i, "l1", "color", (i % 2) ? "red" : "blue", "red"));
    }
    REQUIRE(causal_decay(anchor_extra, degraded_extra) == causal_decay(anchor, same));

    std::vector<EvalRecord> no_correct = {make_record(0, "none", "color", "blue", "red")};
    std::vector<EvalRecord> degraded_one = {make_record(0, "blind", "color", "blue", "red")};
    REQUIRE_THROWS_WITH(causal_decay(no_correct, degraded_one),
                        Catch::Matchers::ContainsSubstring("undefined"));
}

TEST_CASE("constant responder yields zero causal decay at every level") {
    class ConstantResponder : public Responder {
    public:
        std::string answer(const Query& q) override { return q.task == "count" ? "2" : "red"; }
    };
    auto split = generate_split(404, 30);
    SuiteOptions opt;
    opt.conditions = parse_conditions("none,l1,l2,l3,blind");
    ConstantResponder responder;
    auto report = run_reliance_suite_with(responder, split, opt);
    REQUIRE(report.records.size() == split.samples.size() * 5);
    int decay_rows = 0;
    for (const auto& row : report.rows)
        if (row.metric == "causal_decay") {
            ++decay_rows;
            REQUIRE(row.value == 0.0);
        }
    REQUIRE(decay_rows == 4);
    // accuracy identical across all visual conditions
    double first_acc = -1.0;
    for (const auto& row : report.rows)
        if (row.metric == "acc") {
            if (first_acc < 0) first_acc = row.value;
            REQUIRE(row.value == first_acc);
        }
}

TEST_CASE("suite emits one record per sample and condition") {
    auto split = generate_split(505, 10);
    SuiteOptions opt; // default 9 conditions
    SycophantResponder responder;
    auto report = run_reliance_suite_with(responder, split, opt);
    REQUIRE(opt.conditions.size() == 9);
    REQUIRE(report.records.size() == split.samples.size() * 9);
}

TEST_CASE("suite is deterministic across thread counts") {
    auto split = generate_split(606, 12);
    SuiteOptions opt1;
    opt1.conditions = parse_conditions("none,l2,blind,mislead_logical");
    opt1.seed = 3;
    opt1.threads = 1;
    auto opt2 = opt1;
    opt2.threads = 2;
    RandomChoiceResponder r1(88), r2(88);
    auto a = run_reliance_suite_with(r1, split, opt1);
    auto b = run_reliance_suite_with(r2, split, opt2);
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
        REQUIRE(a.records[i].prediction == b.records[i].prediction);
        REQUIRE(a.records[i].condition == b.records[i].condition);
    }
}

TEST_CASE("records round trip through jsonl") {
    namespace fs = std::filesystem;
    auto split = generate_split(707, 5);
    SuiteOptions opt;
    opt.conditions = parse_conditions("none,blind");
    RandomChoiceResponder responder(5);
    auto report = run_reliance_suite_with(responder, split, opt);
    const auto dir = fs::temp_directory_path() / "patchlm_records_test";
    fs::create_directories(dir);
    const std::string path = (dir / "records.jsonl").string();
    write_records_jsonl(report.records, path);
    auto loaded = read_records_jsonl(path);
    REQUIRE(loaded.size() == report.records.size());
    for (size_t i = 0; i < loaded.size(); ++i) {
        REQUIRE(loaded[i].id == report.records[i].id);
        REQUIRE(loaded[i].condition == report.records[i].condition);
        REQUIRE(loaded[i].prediction == report.records[i].prediction);
        REQUIRE(loaded[i].gold == report.records[i].gold);
        REQUIRE(loaded[i].correct == report.records[i].correct);
        REQUIRE(loaded[i].abs_err.has_value() == report.records[i].abs_err.has_value());
    }
    fs::remove_all(dir);
}

TEST_CASE("unknown conditions are rejected") {
    REQUIRE_THROWS_WITH(parse_conditions("none,l9"), Catch::Matchers::ContainsSubstring("l9"));
    REQUIRE_THROWS_AS(parse_conditions(""), std::invalid_argument);
    REQUIRE(parse_conditions("none, blind").size() == 2);
}
