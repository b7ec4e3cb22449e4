#pragma once

// Analytic latent codec: every non-overlapping f x f block of every image channel
// is projected onto the orthonormal 2-D DCT-II basis. For f = 2 this is the
// normalized Haar basis. The transform is orthonormal, so decode is both the
// inverse and the adjoint of encode.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "docvce/autodiff.hpp"
#include "docvce/tensor.hpp"

namespace docvce {

struct CodecConfig {
    std::size_t factor = 2;     // spatial downscale f
    std::size_t channels = 1;   // image channels C
    std::size_t height = 32;
    std::size_t width = 32;
    double eta = 1.0;           // latent scale

    std::size_t latent_channels() const { return channels * factor * factor; }
    Shape image_shape() const { return {channels, height, width}; }
    Shape latent_shape() const { return {latent_channels(), height / factor, width / factor}; }
};

class Codec {
public:
    Codec() : Codec(CodecConfig{}) {}

    explicit Codec(CodecConfig config) : config_(config) {
        const std::size_t f = config_.factor;
        if (f == 0) throw std::invalid_argument("codec: factor must be positive");
        if (config_.height % f != 0 || config_.width % f != 0) {
            throw std::invalid_argument("codec: factor " + std::to_string(f) + " does not divide " +
                                        std::to_string(config_.height) + "x" + std::to_string(config_.width));
        }
        if (!(config_.eta > 0.0)) throw std::invalid_argument("codec: eta must be positive");
        basis_.resize(f * f);
        for (std::size_t u = 0; u < f; ++u) {
            const double c = u == 0 ? std::sqrt(1.0 / f) : std::sqrt(2.0 / f);
            for (std::size_t x = 0; x < (f + 1) / 2; ++x) {
                const double v = c * std::cos(std::numbers::pi * (2.0 * x + 1.0) * u / (2.0 * f));
                // mirror so that (anti)symmetric rows cancel exactly
                basis_[u * f + x] = v;
                basis_[u * f + f - 1 - x] = u % 2 == 0 ? v : -v;
            }
            if (f % 2 == 1 && u % 2 == 1) basis_[u * f + f / 2] = 0.0;
        }
    }

    const CodecConfig& config() const { return config_; }
    double eta() const { return config_.eta; }
    void set_eta(double eta) {
        if (!(eta > 0.0)) throw std::invalid_argument("codec: eta must be positive");
        config_.eta = eta;
    }

    Tensor encode(const Tensor& image) const {
        if (image.shape() != config_.image_shape()) {
            throw std::invalid_argument("codec::encode: expected image " + shape_string(config_.image_shape()) +
                                        ", got " + shape_string(image.shape()));
        }
        Tensor latent(config_.latent_shape());
        transform(image, latent, true);
        return latent;
    }

    Tensor decode(const Tensor& latent) const {
        if (latent.shape() != config_.latent_shape()) {
            throw std::invalid_argument("codec::decode: expected latent " + shape_string(config_.latent_shape()) +
                                        ", got " + shape_string(latent.shape()));
        }
        Tensor image(config_.image_shape());
        transform(latent, image, false);
        return image;
    }

    /// Differentiable decode; the adjoint is encode.
    Var decode(Var latent) const {
        return linear_map(
            latent, [codec = *this](const Tensor& z) { return codec.decode(z); },
            [codec = *this](const Tensor& x) { return codec.encode(x); });
    }

    /// Latent the diffusion model runs on: encode(x)/eta, unit variance when eta is fitted.
    Tensor to_diffusion_latent(const Tensor& image) const { return scaled(encode(image), 1.0 / config_.eta); }
    Tensor from_diffusion_latent(const Tensor& z) const { return decode(scaled(z, config_.eta)); }

private:
    // Forward: image -> latent. Backward: latent -> image (transpose).
    void transform(const Tensor& in, Tensor& out, bool forward) const {
        const std::size_t f = config_.factor;
        const std::size_t h = config_.height, w = config_.width;
        const std::size_t lh = h / f, lw = w / f;
        for (std::size_t c = 0; c < config_.channels; ++c) {
            for (std::size_t by = 0; by < lh; ++by) {
                for (std::size_t bx = 0; bx < lw; ++bx) {
                    for (std::size_t u = 0; u < f; ++u) {
                        for (std::size_t v = 0; v < f; ++v) {
                            const std::size_t lidx = ((c * f * f + u * f + v) * lh + by) * lw + bx;
                            for (std::size_t y = 0; y < f; ++y) {
                                for (std::size_t x = 0; x < f; ++x) {
                                    const std::size_t pidx = (c * h + by * f + y) * w + bx * f + x;
                                    const double b = basis_[u * f + y] * basis_[v * f + x];
                                    if (forward) {
                                        out[lidx] += b * in[pidx];
                                    } else {
                                        out[pidx] += b * in[lidx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    CodecConfig config_;
    std::vector<double> basis_;  // basis_[u*f + x]
};

/// Population standard deviation of every encoded latent component over the dataset.
inline double fit_latent_scale(const Codec& codec, std::span<const Tensor> images) {
    if (images.empty()) throw std::invalid_argument("fit_latent_scale: empty dataset");
    double count = 0.0, mean = 0.0, m2 = 0.0;
    for (const Tensor& image : images) {
        const Tensor latent = codec.encode(image);
        for (double v : latent.values()) {
            count += 1.0;
            const double d = v - mean;
            mean += d / count;
            m2 += d * (v - mean);
        }
    }
    const double sd = std::sqrt(m2 / count);
    if (!(sd > 0.0)) throw std::invalid_argument("fit_latent_scale: latent components have zero variance");
    return sd;
}

}  // namespace docvce
