#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchlm {

// Answer matching rule: first line only, lowercased, whitespace and
// punctuation stripped.
inline std::string normalize_answer(const std::string& s) {
    std::string out;
    for (char ch : s) {
        if (ch == '\n') break;
        const unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

inline std::optional<long long> parse_count(const std::string& normalized) {
    if (normalized.empty() || normalized.size() > 9) return std::nullopt;
    long long v = 0;
    for (char c : normalized) {
        if (c < '0' || c > '9') return std::nullopt;
        v = v * 10 + (c - '0');
    }
    return v;
}

// One prediction vs. gold under a named condition.
struct EvalRecord {
    long long id = 0;
    std::string condition;
    std::string task;
    std::string prediction;
    std::string gold;
    bool correct = false;
    std::optional<double> abs_err; // count tasks where both sides parse
    long long dialogue_id = -1;
    int turn = 0;
};

inline EvalRecord make_record(long long id, const std::string& condition, const std::string& task,
                              const std::string& prediction, const std::string& gold,
                              long long dialogue_id = -1, int turn = 0) {
    EvalRecord r;
    r.id = id;
    r.condition = condition;
    r.task = task;
    r.prediction = prediction;
    r.gold = gold;
    r.correct = normalize_answer(prediction) == normalize_answer(gold);
    r.dialogue_id = dialogue_id;
    r.turn = turn;
    if (task == "count") {
        const auto p = parse_count(normalize_answer(prediction));
        const auto g = parse_count(normalize_answer(gold));
        if (p && g) r.abs_err = std::abs(static_cast<double>(*p - *g));
    }
    return r;
}

inline double accuracy(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw std::invalid_argument("accuracy: empty record set");
    size_t correct = 0;
    for (const auto& r : records) correct += r.correct ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(records.size());
}

// MAE over count records. A prediction that does not parse as an integer is
// penalized with |gold| so the mean stays total.
inline double mae(const std::vector<EvalRecord>& records) {
    size_t n = 0;
    double total = 0.0;
    for (const auto& r : records) {
        if (r.task != "count") continue;
        ++n;
        if (r.abs_err) {
            total += *r.abs_err;
        } else {
            const auto g = parse_count(normalize_answer(r.gold));
            total += g ? std::abs(static_cast<double>(*g)) : 0.0;
        }
    }
    if (n == 0) throw std::invalid_argument("mae: no count records");
    return total / static_cast<double>(n);
}

// Per-turn correctness of one dialogue.
struct DialogueRecord {
    long long dialogue_id = -1;
    std::vector<bool> turns;
};

inline std::vector<DialogueRecord> group_dialogues(const std::vector<EvalRecord>& records) {
    std::map<long long, std::map<int, bool>> by_id;
    for (const auto& r : records)
        if (r.dialogue_id >= 0) by_id[r.dialogue_id][r.turn] = r.correct;
    std::vector<DialogueRecord> out;
    for (const auto& [id, turns] : by_id) {
        DialogueRecord d;
        d.dialogue_id = id;
        for (const auto& [turn, correct] : turns) d.turns.push_back(correct);
        out.push_back(std::move(d));
    }
    return out;
}

// Percentage of dialogues in which every turn is exactly correct.
inline double mtem_at_1(const std::vector<DialogueRecord>& dialogues) {
    if (dialogues.empty()) throw std::invalid_argument("mtem_at_1: empty dialogue set");
    size_t all_correct = 0;
    for (const auto& d : dialogues) {
        if (d.turns.empty()) throw std::invalid_argument("mtem_at_1: dialogue without turns");
        bool ok = true;
        for (bool t : d.turns) ok = ok && t;
        all_correct += ok ? 1 : 0;
    }
    return 100.0 * static_cast<double>(all_correct) / static_cast<double>(dialogues.size());
}

// Causal performance decay: among samples correct under the anchor
// condition, the fraction that flip to incorrect under the degraded one.
inline double causal_decay(const std::vector<EvalRecord>& anchor,
                           const std::vector<EvalRecord>& degraded) {
    std::map<long long, bool> degraded_by_id;
    for (const auto& r : degraded) degraded_by_id[r.id] = r.correct;
    size_t anchor_correct = 0, decayed = 0;
    for (const auto& r : anchor) {
        if (!r.correct) continue;
        const auto it = degraded_by_id.find(r.id);
        if (it == degraded_by_id.end())
            throw std::invalid_argument("causal_decay: id " + std::to_string(r.id) +
                                        " missing from degraded records");
        ++anchor_correct;
        decayed += it->second ? 0 : 1;
    }
    if (anchor_correct == 0)
        throw std::invalid_argument("causal_decay: no anchor-correct samples, metric undefined");
    return static_cast<double>(decayed) / static_cast<double>(anchor_correct);
}

} // namespace patchlm
