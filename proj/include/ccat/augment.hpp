#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ccat/errors.hpp"
#include "ccat/rng.hpp"
#include "ccat/tensor.hpp"

namespace ccat {

// All augmentations are intensity-only: pixel geometry is never touched, so
// pseudo labels computed on the clean image stay aligned with every view.
struct AugmentationSpec {
    // weak view 1: coarse dropout on a square cell grid
    int dropout_cell = 4;
    double dropout_min = 0.02;
    double dropout_max = 0.10;
    // weak view 2: additive Gaussian noise
    double weak_noise_std = 0.05;
    // strong transform parameters
    double blur_sigma = 1.2;
    double sharpen_amount = 0.7;
    double gamma_min = 0.6;
    double gamma_max = 1.6;
    double brightness_max = 0.2;
    double contrast_min = 0.6;
    double contrast_max = 1.5;
    double strong_noise_std = 0.15;
    double salt_pepper_frac = 0.05;
    uint64_t seed = 0;

    void validate() const {
        if (dropout_cell < 1) throw ParameterError("augment spec: dropout_cell must be >= 1");
        if (dropout_min < 0 || dropout_max > 1 || dropout_min > dropout_max)
            throw ParameterError("augment spec: dropout range must satisfy 0 <= min <= max <= 1");
        if (weak_noise_std < 0 || strong_noise_std < 0) throw ParameterError("augment spec: negative noise std");
        if (blur_sigma <= 0) throw ParameterError("augment spec: blur_sigma must be positive");
        if (sharpen_amount < 0) throw ParameterError("augment spec: negative sharpen_amount");
        if (gamma_min <= 0 || gamma_max < gamma_min) throw ParameterError("augment spec: bad gamma range");
        if (brightness_max < 0) throw ParameterError("augment spec: negative brightness_max");
        if (contrast_min <= 0 || contrast_max < contrast_min) throw ParameterError("augment spec: bad contrast range");
        if (salt_pepper_frac < 0 || salt_pepper_frac > 1)
            throw ParameterError("augment spec: salt_pepper_frac must be in [0,1]");
    }
};

namespace detail {

inline void check_image_batch(const TensorF& x, const char* where) {
    if (x.rank() != 4) throw DimensionError(std::string(where) + ": expected (B,C,H,W), got " + x.shape_str());
}

inline float clamp01(double v) { return static_cast<float>(std::min(1.0, std::max(0.0, v))); }

}  // namespace detail

// --- individual transforms (public so each is testable on its own) ---------

inline TensorF aug_blur(const TensorF& x, double sigma) {
    detail::check_image_batch(x, "aug_blur");
    const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int r = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * r + 1));
    double sum = 0;
    for (int i = -r; i <= r; ++i) sum += k[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= sum;
    auto clampi = [](int64_t i, int64_t n) { return std::min(n - 1, std::max<int64_t>(0, i)); };
    TensorF tmp(x.shape), out(x.shape);
    for (int64_t n = 0; n < b; ++n)
        for (int64_t ch = 0; ch < c; ++ch) {
            for (int64_t y = 0; y < h; ++y)  // horizontal pass
                for (int64_t px = 0; px < w; ++px) {
                    double acc = 0;
                    for (int i = -r; i <= r; ++i) acc += k[static_cast<size_t>(i + r)] * x.at4(n, ch, y, clampi(px + i, w));
                    tmp.at4(n, ch, y, px) = static_cast<float>(acc);
                }
            for (int64_t y = 0; y < h; ++y)  // vertical pass
                for (int64_t px = 0; px < w; ++px) {
                    double acc = 0;
                    for (int i = -r; i <= r; ++i) acc += k[static_cast<size_t>(i + r)] * tmp.at4(n, ch, clampi(y + i, h), px);
                    out.at4(n, ch, y, px) = detail::clamp01(acc);
                }
        }
    return out;
}

inline TensorF aug_sharpen(const TensorF& x, double sigma, double amount) {
    const TensorF blurred = aug_blur(x, sigma);
    TensorF out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i)
        out[i] = detail::clamp01(double(x[i]) + amount * (double(x[i]) - double(blurred[i])));
    return out;
}

inline TensorF aug_gamma(const TensorF& x, double gamma) {
    detail::check_image_batch(x, "aug_gamma");
    if (gamma <= 0) throw ParameterError("aug_gamma: gamma must be positive");
    TensorF out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = detail::clamp01(std::pow(std::max(0.0f, x[i]), gamma));
    return out;
}

inline TensorF aug_brightness(const TensorF& x, double delta) {
    detail::check_image_batch(x, "aug_brightness");
    TensorF out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = detail::clamp01(double(x[i]) + delta);
    return out;
}

// Scales deviations from each image's own mean intensity.
inline TensorF aug_contrast(const TensorF& x, double factor) {
    detail::check_image_batch(x, "aug_contrast");
    const int64_t b = x.dim(0), per = x.numel() / std::max<int64_t>(1, x.dim(0));
    TensorF out(x.shape);
    for (int64_t n = 0; n < b; ++n) {
        double mean = 0;
        for (int64_t i = 0; i < per; ++i) mean += x[n * per + i];
        mean /= double(per);
        for (int64_t i = 0; i < per; ++i)
            out[n * per + i] = detail::clamp01(mean + factor * (double(x[n * per + i]) - mean));
    }
    return out;
}

inline TensorF aug_noise(const TensorF& x, double std, Rng& rng) {
    detail::check_image_batch(x, "aug_noise");
    TensorF out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = detail::clamp01(double(x[i]) + rng.normal(0.0, std));
    return out;
}

inline TensorF aug_salt_pepper(const TensorF& x, double frac, Rng& rng) {
    detail::check_image_batch(x, "aug_salt_pepper");
    TensorF out = x;
    for (int64_t i = 0; i < x.numel(); ++i)
        if (rng.bernoulli(frac)) out[i] = rng.bernoulli(0.5) ? 1.0f : 0.0f;
    return out;
}

// Classic 256-bin histogram equalization per image; a single occupied bin
// (constant image) maps to itself.
inline TensorF aug_histeq(const TensorF& x) {
    detail::check_image_batch(x, "aug_histeq");
    const int64_t b = x.dim(0), per = x.numel() / std::max<int64_t>(1, x.dim(0));
    TensorF out(x.shape);
    for (int64_t n = 0; n < b; ++n) {
        int64_t hist[256] = {0};
        for (int64_t i = 0; i < per; ++i) {
            const int bin = std::min(255, std::max(0, static_cast<int>(std::lround(double(x[n * per + i]) * 255.0))));
            ++hist[bin];
        }
        int64_t cdf[256];
        int64_t run = 0, cdf_min = 0;
        for (int v = 0; v < 256; ++v) {
            run += hist[v];
            cdf[v] = run;
            if (cdf_min == 0 && hist[v] > 0) cdf_min = run;
        }
        if (per == cdf_min) {  // constant image: equalization is meaningless
            for (int64_t i = 0; i < per; ++i) out[n * per + i] = x[n * per + i];
            continue;
        }
        for (int64_t i = 0; i < per; ++i) {
            const int bin = std::min(255, std::max(0, static_cast<int>(std::lround(double(x[n * per + i]) * 255.0))));
            out[n * per + i] = detail::clamp01(double(cdf[bin] - cdf_min) / double(per - cdf_min));
        }
    }
    return out;
}

// Coarse dropout: per image, draw a target fraction from [dropout_min,
// dropout_max], then zero whole cell x cell blocks independently with that
// probability, so the expected zeroed-pixel fraction equals the draw.
inline TensorF weak_dropout(const TensorF& x, const AugmentationSpec& spec, Rng& rng) {
    detail::check_image_batch(x, "weak_dropout");
    const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t cell = spec.dropout_cell;
    TensorF out = x;
    for (int64_t n = 0; n < b; ++n) {
        const double f = rng.uniform(spec.dropout_min, spec.dropout_max);
        for (int64_t cy = 0; cy < h; cy += cell)
            for (int64_t cx = 0; cx < w; cx += cell) {
                if (!rng.bernoulli(f)) continue;
                for (int64_t ch = 0; ch < c; ++ch)
                    for (int64_t y = cy; y < std::min(h, cy + cell); ++y)
                        for (int64_t px = cx; px < std::min(w, cx + cell); ++px) out.at4(n, ch, y, px) = 0.0f;
            }
    }
    return out;
}

// The two weak views: view 0 is coarse dropout, view 1 is Gaussian noise.
inline std::vector<TensorF> weak_augment(const TensorF& x, const AugmentationSpec& spec, Rng& rng) {
    spec.validate();
    std::vector<TensorF> views;
    views.push_back(weak_dropout(x, spec, rng));
    views.push_back(aug_noise(x, spec.weak_noise_std, rng));
    return views;
}

constexpr int kNumStrong = 8;

inline const char* strong_name(int id) {
    static const char* names[kNumStrong] = {"blur",     "sharpen",  "gamma",       "brightness",
                                            "contrast", "noise",    "salt_pepper", "histeq"};
    if (id < 0 || id >= kNumStrong) throw ParameterError("strong_name: transform id out of range");
    return names[id];
}

// Applies strong transform `id`; random parameters (gamma, brightness,
// contrast, noise) are drawn from rng in a fixed order.
inline TensorF apply_strong(const TensorF& x, int id, const AugmentationSpec& spec, Rng& rng) {
    switch (id) {
        case 0: return aug_blur(x, spec.blur_sigma);
        case 1: return aug_sharpen(x, spec.blur_sigma, spec.sharpen_amount);
        case 2: return aug_gamma(x, rng.uniform(spec.gamma_min, spec.gamma_max));
        case 3: return aug_brightness(x, rng.uniform(-spec.brightness_max, spec.brightness_max));
        case 4: return aug_contrast(x, rng.uniform(spec.contrast_min, spec.contrast_max));
        case 5: return aug_noise(x, spec.strong_noise_std, rng);
        case 6: return aug_salt_pepper(x, spec.salt_pepper_frac, rng);
        case 7: return aug_histeq(x);
        default: throw ParameterError("apply_strong: transform id out of range");
    }
}

// One of the eight strong transforms, chosen uniformly, applied to the whole
// batch. Returns the transformed batch and the chosen transform id.
inline std::pair<TensorF, int> strong_augment(const TensorF& x, const AugmentationSpec& spec, Rng& rng) {
    spec.validate();
    const int id = static_cast<int>(rng.uniform_int(kNumStrong));
    return {apply_strong(x, id, spec, rng), id};
}

}  // namespace ccat
