#pragma once

#include "patchlm/tensor.hpp"

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace patchlm {

// Byte-level vocabulary: 256 byte tokens plus six specials. The fixed id
// assignment makes encode/decode a bijection on byte strings.
namespace vocab {
constexpr int kBytes = 256;
constexpr int BOS = 256;
constexpr int EOS = 257;
constexpr int IMG_START = 258;
constexpr int IMG_END = 259;
constexpr int SEP = 260;
constexpr int PAD = 261;
constexpr int kSize = 262;

inline bool is_special(int id) { return id >= kBytes && id < kSize; }
} // namespace vocab

inline std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= vocab::kBytes)
            throw std::invalid_argument("detokenize: id " + std::to_string(id) +
                                        " is not a byte token");
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

// Row gather from the text embedding matrix.
inline TensorPtr embed_text(const std::vector<int>& ids, const TensorPtr& table) {
    return ops::embedding_lookup(table, ids);
}

} // namespace patchlm
