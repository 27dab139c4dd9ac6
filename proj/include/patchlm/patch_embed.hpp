#pragma once

#include "patchlm/image.hpp"
#include "patchlm/tensor.hpp"

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace patchlm {

constexpr int kPatchSize = 16;

// Two-convolution patch embedding with a composed 16x16 receptive field at
// stride 16: conv1 is 8x8/8 (3 -> d_mid), conv2 is 2x2/2 (d_mid -> d).
// Positional rows are a learned table over flattened grid indices.
struct PatchEmbedParams {
    TensorPtr conv1_w; // [d_mid x 3 x 8 x 8]
    TensorPtr conv1_b; // [d_mid]
    TensorPtr conv2_w; // [d x d_mid x 2 x 2]
    TensorPtr conv2_b; // [d]
    TensorPtr pos;     // [maxgrid*maxgrid x d]
    int d_mid = 0;
    int d = 0;
    int maxgrid = 0;

    std::vector<std::pair<std::string, TensorPtr>> named_tensors() const {
        return {{"patch.conv1.w", conv1_w},
                {"patch.conv1.b", conv1_b},
                {"patch.conv2.w", conv2_w},
                {"patch.conv2.b", conv2_b},
                {"patch.pos", pos}};
    }
};

inline std::pair<int, int> patch_grid_dims(int h, int w) {
    if (h < 1 || w < 1) throw std::invalid_argument("patch_grid_dims: dimensions must be >= 1");
    return {(h + kPatchSize - 1) / kPatchSize, (w + kPatchSize - 1) / kPatchSize};
}

struct PaddedImage {
    TensorPtr x; // [3 x H_p x W_p], intensities scaled to [0,1]
    int orig_h = 0;
    int orig_w = 0;
};

// Scale intensities by 1/255 and zero-pad right/bottom to multiples of 16.
inline PaddedImage normalize_and_pad(const Image& img) {
    const auto [gh, gw] = patch_grid_dims(img.height, img.width);
    const int hp = gh * kPatchSize, wp = gw * kPatchSize;
    auto x = Tensor::create({3, hp, wp});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int xx = 0; xx < img.width; ++xx)
                x->data[(static_cast<size_t>(c) * hp + y) * wp + xx] =
                    static_cast<double>(img.at(y, xx, c)) / 255.0;
    return {x, img.height, img.width};
}

struct EmbeddedImage {
    TensorPtr tokens; // [n_v x d]
    int grid_h = 0;
    int grid_w = 0;
};

inline EmbeddedImage embed_image(const Image& img, const PatchEmbedParams& p) {
    PaddedImage padded = normalize_and_pad(img);
    const auto [gh, gw] = patch_grid_dims(img.height, img.width);
    if (gh > p.maxgrid || gw > p.maxgrid)
        throw std::invalid_argument("embed_image: grid " + std::to_string(gh) + "x" +
                                    std::to_string(gw) + " exceeds positional table capacity " +
                                    std::to_string(p.maxgrid) + "x" + std::to_string(p.maxgrid));
    auto z1 = ops::conv2d(padded.x, p.conv1_w, p.conv1_b, 8);
    auto z2 = ops::conv2d(ops::gelu(z1), p.conv2_w, p.conv2_b, 2);
    auto tokens = ops::grid_to_rows(z2); // [gh*gw x d], row r*gw + c
    std::vector<int> pos_ids(static_cast<size_t>(gh) * gw);
    for (size_t i = 0; i < pos_ids.size(); ++i) pos_ids[i] = static_cast<int>(i);
    tokens = ops::add(tokens, ops::embedding_lookup(p.pos, pos_ids));
    return {tokens, gh, gw};
}

} // namespace patchlm
