#include "patchlm/rng.hpp"
#include "patchlm/tensor.hpp"
#include "patchlm/text.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace patchlm;

TEST_CASE("tokenize is byte identity") {
    REQUIRE(tokenize("").empty());
    REQUIRE(tokenize("A") == std::vector<int>{65});
    REQUIRE(tokenize("Hi") == std::vector<int>{72, 105});
}

TEST_CASE("round trip on random byte strings") {
    SplitMix64 rng(555);
    for (int trial = 0; trial < 1000; ++trial) {
        std::string s;
        const int len = static_cast<int>(rng.next_below(32));
        for (int i = 0; i < len; ++i) s.push_back(static_cast<char>(rng.next_below(256)));
        const auto ids = tokenize(s);
        REQUIRE(ids.size() == s.size());
        for (int id : ids) {
            REQUIRE(id >= 0);
            REQUIRE(id < vocab::kBytes);
        }
        REQUIRE(detokenize(ids) == s);
    }
}

TEST_CASE("detokenize rejects special and out-of-range ids") {
    REQUIRE(detokenize({72, 105}) == "Hi");
    REQUIRE_THROWS_AS(detokenize({vocab::BOS}), std::invalid_argument);
    REQUIRE_THROWS_AS(detokenize({262}), std::invalid_argument);
    REQUIRE_THROWS_AS(detokenize({-1}), std::invalid_argument);
}

TEST_CASE("vocabulary constants") {
    REQUIRE(vocab::kSize == 262);
    REQUIRE(vocab::BOS == 256);
    REQUIRE(vocab::PAD == 261);
    REQUIRE(vocab::is_special(vocab::SEP));
    REQUIRE_FALSE(vocab::is_special(255));
}

TEST_CASE("embed_text gathers rows from the table") {
    auto table = Tensor::create({vocab::kSize, 4}, true);
    SplitMix64 rng(77);
    for (auto& v : table->data) v = rng.next_gaussian();

    auto empty = embed_text({}, table);
    REQUIRE(empty->shape == std::vector<int>{0, 4});

    auto bos = embed_text({vocab::BOS}, table);
    for (int j = 0; j < 4; ++j) REQUIRE(bos->data[j] == table->data[vocab::BOS * 4 + j]);
}

TEST_CASE("embed_text gradient reaches only gathered rows") {
    auto table = Tensor::create({vocab::kSize, 4}, true);
    table->zero_grad();
    auto rows = embed_text({5, 9}, table);
    ops::backward(ops::sum(rows));
    for (int v = 0; v < vocab::kSize; ++v)
        for (int j = 0; j < 4; ++j) {
            const double expected = (v == 5 || v == 9) ? 1.0 : 0.0;
            REQUIRE(table->grad[v * 4 + j] == expected);
        }
}
