#pragma once

#include "patchlm/text.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace patchlm {

enum class Modality : uint8_t { Visual, Text };

struct StreamEntry {
    Modality tag;
    int payload; // Visual: patch-token row index; Text: token id
};

struct Span {
    int begin = 0;
    int end = 0; // half-open
    int length() const { return end - begin; }
    bool contains(int i) const { return i >= begin && i < end; }
};

// Ordered multimodal sequence. The loss mask is true exactly on the answer
// span (answer bytes plus the trailing EOS).
struct TokenStream {
    std::vector<StreamEntry> entries;
    std::vector<uint8_t> loss_mask;
    Span image;    // visual payload rows (excludes IMG_START/IMG_END)
    Span question; // question byte tokens
    Span answer;   // answer byte tokens + EOS; empty for decode prefixes

    int size() const { return static_cast<int>(entries.size()); }

    int visual_count() const {
        int n = 0;
        for (const auto& e : entries) n += (e.tag == Modality::Visual) ? 1 : 0;
        return n;
    }

    std::vector<Modality> tags() const {
        std::vector<Modality> t(entries.size());
        for (size_t i = 0; i < entries.size(); ++i) t[i] = entries[i].tag;
        return t;
    }

    void validate() const {
        if (entries.size() != loss_mask.size())
            throw std::logic_error("token stream: mask length mismatch");
        for (int i = 0; i < size(); ++i) {
            const auto& e = entries[i];
            if (e.tag == Modality::Visual && !image.contains(i))
                throw std::logic_error("token stream: visual entry outside image span");
            if (loss_mask[i] && e.tag != Modality::Text)
                throw std::logic_error("token stream: loss mask on a non-text entry");
            if (loss_mask[i] && !answer.contains(i))
                throw std::logic_error("token stream: loss mask outside answer span");
        }
    }
};

// [BOS][IMG_START][v_0..v_{n-1}][IMG_END][question][SEP][answer][EOS]
// With n_visual == 0 the image delimiters are omitted entirely.
// With answer empty and include_answer false, the stream ends right after
// SEP and is a decode prefix.
inline TokenStream make_stream(std::string_view question, std::string_view answer, int n_visual,
                               bool include_answer = true) {
    TokenStream s;
    auto push_text = [&](int id, bool masked) {
        s.entries.push_back({Modality::Text, id});
        s.loss_mask.push_back(masked ? 1 : 0);
    };
    push_text(vocab::BOS, false);
    if (n_visual > 0) {
        push_text(vocab::IMG_START, false);
        s.image.begin = s.size();
        for (int i = 0; i < n_visual; ++i) {
            s.entries.push_back({Modality::Visual, i});
            s.loss_mask.push_back(0);
        }
        s.image.end = s.size();
        push_text(vocab::IMG_END, false);
    }
    s.question.begin = s.size();
    for (int id : tokenize(question)) push_text(id, false);
    s.question.end = s.size();
    push_text(vocab::SEP, false);
    s.answer.begin = s.size();
    if (include_answer) {
        for (int id : tokenize(answer)) push_text(id, true);
        push_text(vocab::EOS, true);
    }
    s.answer.end = s.size();
    return s;
}

inline TokenStream make_prefix_stream(std::string_view question, int n_visual) {
    return make_stream(question, "", n_visual, false);
}

} // namespace patchlm
