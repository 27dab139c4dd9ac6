#pragma once

#include "patchlm/image.hpp"
#include "patchlm/rng.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace patchlm {

// Degradation levels. The level fully determines scale and noise:
//   L1 = 0.70 scale + gaussian sigma 5     L2 = 0.40 scale + gaussian sigma 15
//   L3 = 0.15 scale + salt-and-pepper 0.05 Blind = zero matrix
enum class DegradationLevel : uint8_t { None, L1, L2, L3, Blind };

inline const char* degradation_name(DegradationLevel l) {
    switch (l) {
        case DegradationLevel::None: return "none";
        case DegradationLevel::L1: return "l1";
        case DegradationLevel::L2: return "l2";
        case DegradationLevel::L3: return "l3";
        case DegradationLevel::Blind: return "blind";
    }
    return "?";
}

enum class NoiseKind : uint8_t { NoNoise, Gaussian, SaltPepper, Zero };

struct DegradationSpec {
    DegradationLevel level = DegradationLevel::None;
    double scale = 1.0;
    NoiseKind noise = NoiseKind::NoNoise;
    double noise_param = 0.0; // gaussian sigma in 8-bit intensity units, or flip probability

    static DegradationSpec of(DegradationLevel level) {
        switch (level) {
            case DegradationLevel::None: return {level, 1.0, NoiseKind::NoNoise, 0.0};
            case DegradationLevel::L1: return {level, 0.70, NoiseKind::Gaussian, 5.0};
            case DegradationLevel::L2: return {level, 0.40, NoiseKind::Gaussian, 15.0};
            case DegradationLevel::L3: return {level, 0.15, NoiseKind::SaltPepper, 0.05};
            case DegradationLevel::Blind: return {level, 1.0, NoiseKind::Zero, 0.0};
        }
        throw std::invalid_argument("unknown degradation level");
    }
};

inline uint8_t round_half_up_u8(double v) {
    double r = std::floor(v + 0.5);
    if (r < 0.0) r = 0.0;
    if (r > 255.0) r = 255.0;
    return static_cast<uint8_t>(r);
}

// Bilinear downsampling in intensity space with half-pixel-center sampling.
// The output keeps the reduced resolution; there is no upscaling back.
inline Image downsample(const Image& img, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw std::invalid_argument("downsample: fraction must be in (0, 1]");
    const int oh = std::max(1, static_cast<int>(std::floor(img.height * fraction)));
    const int ow = std::max(1, static_cast<int>(std::floor(img.width * fraction)));
    if (oh == img.height && ow == img.width) return img;
    Image out(oh, ow);
    const double sy = static_cast<double>(img.height) / oh;
    const double sx = static_cast<double>(img.width) / ow;
    for (int y = 0; y < oh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(img.height - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < ow; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(img.width - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v = (1.0 - wy) * ((1.0 - wx) * img.at(y0, x0, c) +
                                               wx * img.at(y0, x1, c)) +
                                 wy * ((1.0 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c));
                out.at(y, x, c) = round_half_up_u8(v);
            }
        }
    }
    return out;
}

// Additive per-channel Gaussian noise in 8-bit intensity units.
inline Image gaussian_noise(const Image& img, double sigma, uint64_t seed) {
    if (sigma < 0.0) throw std::invalid_argument("gaussian_noise: sigma must be >= 0");
    if (sigma == 0.0) return img;
    Image out = img;
    SplitMix64 rng(derive_seed(seed, 0x6761757373ULL));
    for (size_t i = 0; i < out.pixels.size(); ++i)
        out.pixels[i] = round_half_up_u8(img.pixels[i] + sigma * rng.next_gaussian());
    return out;
}

// Each pixel is corrupted independently with probability p; corrupted pixels
// are set to 0 or 255 on all three channels with equal probability.
inline Image salt_pepper(const Image& img, double p, uint64_t seed) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("salt_pepper: p must be in [0, 1]");
    Image out = img;
    if (p == 0.0) return out;
    SplitMix64 rng(derive_seed(seed, 0x73616c74ULL));
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            if (rng.next_double() >= p) continue;
            const uint8_t v = (rng.next_u64() & 1) ? 255 : 0;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = v;
        }
    return out;
}

inline Image blind(const Image& img) {
    Image out(img.height, img.width);
    return out; // all intensities zero, dimensions preserved
}

inline Image degrade(const Image& img, const DegradationSpec& spec, uint64_t seed) {
    switch (spec.level) {
        case DegradationLevel::None:
            return img;
        case DegradationLevel::L1:
        case DegradationLevel::L2:
            return gaussian_noise(downsample(img, spec.scale), spec.noise_param, seed);
        case DegradationLevel::L3:
            return salt_pepper(downsample(img, spec.scale), spec.noise_param, seed);
        case DegradationLevel::Blind:
            return blind(img);
    }
    throw std::invalid_argument("unknown degradation level");
}

inline Image degrade(const Image& img, DegradationLevel level, uint64_t seed) {
    return degrade(img, DegradationSpec::of(level), seed);
}

} // namespace patchlm
