#pragma once

// Seeded synthetic "document" images. Every class draws a fixed combination of
// layout motifs (header band, signature block, ID-digit strip, ruled grid) over
// shared body-text lines, then per-pixel Gaussian jitter is added.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "docvce/random.hpp"
#include "docvce/tensor.hpp"

namespace docvce {

struct Rect {
    std::size_t row = 0, col = 0, height = 0, width = 0;
};

/// Layout cues for one class, in pixel units of the target image side.
struct ClassMotif {
    bool header = false;          // dark band across the top rows
    Rect header_band;
    bool signature = false;       // solid block near the bottom
    Rect signature_block;
    bool digits = false;          // dashed strip imitating a document ID
    Rect digit_strip;
    std::size_t grid_spacing = 0; // ruled lines every n pixels, 0 = none
};

struct SyntheticSpec {
    std::size_t n_classes = 4;
    std::size_t image_side = 32;
    std::size_t samples_per_class = 100;
    double noise_level = 0.05;
    std::uint64_t seed = 0;
    std::vector<ClassMotif> motifs;  // empty: default_motifs(n_classes, image_side)
};

struct LabeledImages {
    std::vector<Tensor> images;
    std::vector<std::size_t> labels;
    std::size_t n_classes = 0;

    std::size_t size() const { return images.size(); }
};

inline constexpr double kBackground = 0.9;
inline constexpr double kInk = 0.1;
inline constexpr double kBodyText = 0.6;

/// Up to eight distinct layouts, scaled from a 32-pixel design grid.
inline std::vector<ClassMotif> default_motifs(std::size_t n_classes, std::size_t side) {
    if (n_classes < 2 || n_classes > 8) {
        throw std::invalid_argument("synthetic data: default motifs cover 2..8 classes, got " +
                                    std::to_string(n_classes));
    }
    if (side < 16) throw std::invalid_argument("synthetic data: image side must be at least 16");
    auto px = [side](std::size_t v) { return v * side / 32; };
    const Rect header{px(2), px(2), std::max<std::size_t>(1, px(4)), side - 2 * px(2)};
    const Rect sig_right{px(24), px(18), std::max<std::size_t>(1, px(5)), px(10)};
    const Rect sig_left{px(24), px(4), std::max<std::size_t>(1, px(5)), px(10)};
    const Rect id_top{px(7), px(18), std::max<std::size_t>(1, px(2)), px(12)};
    const Rect id_bottom{px(29), px(4), std::max<std::size_t>(1, px(2)), px(12)};

    std::vector<ClassMotif> all(8);
    all[0].header = true, all[0].header_band = header, all[0].signature = true, all[0].signature_block = sig_right;
    all[1].grid_spacing = std::max<std::size_t>(2, px(8));
    all[2].header = true, all[2].header_band = header, all[2].digits = true, all[2].digit_strip = id_top;
    all[3].signature = true, all[3].signature_block = sig_left, all[3].digits = true, all[3].digit_strip = id_bottom;
    all[4].grid_spacing = std::max<std::size_t>(2, px(4));
    all[5].header = true, all[5].header_band = header, all[5].grid_spacing = std::max<std::size_t>(2, px(8));
    all[6].digits = true, all[6].digit_strip = id_top, all[6].signature = true, all[6].signature_block = sig_right;
    all[7].header = true, all[7].header_band = header, all[7].signature = true, all[7].signature_block = sig_left;
    all.resize(n_classes);
    return all;
}

namespace detail {

inline void check_rect(const Rect& r, std::size_t side, const char* what) {
    if (r.height == 0 || r.width == 0 || r.row + r.height > side || r.col + r.width > side) {
        throw std::invalid_argument(std::string("synthetic data: ") + what + " does not fit the image");
    }
}

inline void fill_rect(Tensor& img, std::size_t side, const Rect& r, double value, bool dashed = false) {
    for (std::size_t y = r.row; y < r.row + r.height; ++y)
        for (std::size_t x = r.col; x < r.col + r.width; ++x)
            if (!dashed || ((x - r.col) % 3) != 2) img[y * side + x] = value;
}

}  // namespace detail

/// Noise-free image of one class.
inline Tensor render_template(const ClassMotif& m, std::size_t side) {
    Tensor img(Shape{1, side, side}, kBackground);
    for (std::size_t y = side / 3; y + 2 < side * 5 / 6; y += 3) {
        detail::fill_rect(img, side, Rect{y, side / 8, 1, side * 3 / 4}, kBodyText);
    }
    if (m.grid_spacing > 0) {
        for (std::size_t k = m.grid_spacing; k < side; k += m.grid_spacing) {
            detail::fill_rect(img, side, Rect{k, 0, 1, side}, kInk);
            detail::fill_rect(img, side, Rect{0, k, side, 1}, kInk);
        }
    }
    if (m.header) detail::fill_rect(img, side, m.header_band, kInk);
    if (m.signature) detail::fill_rect(img, side, m.signature_block, kInk);
    if (m.digits) detail::fill_rect(img, side, m.digit_strip, kInk, true);
    return img;
}

inline std::vector<Tensor> class_templates(const SyntheticSpec& spec) {
    const auto motifs = spec.motifs.empty() ? default_motifs(spec.n_classes, spec.image_side) : spec.motifs;
    if (motifs.size() != spec.n_classes) throw std::invalid_argument("synthetic data: one motif per class required");
    std::vector<Tensor> out;
    for (const auto& m : motifs) {
        if (m.header) detail::check_rect(m.header_band, spec.image_side, "header band");
        if (m.signature) detail::check_rect(m.signature_block, spec.image_side, "signature block");
        if (m.digits) detail::check_rect(m.digit_strip, spec.image_side, "digit strip");
        if (m.grid_spacing >= spec.image_side) throw std::invalid_argument("synthetic data: grid spacing too large");
        out.push_back(render_template(m, spec.image_side));
    }
    for (std::size_t a = 0; a < out.size(); ++a)
        for (std::size_t b = a + 1; b < out.size(); ++b)
            if (out[a] == out[b]) throw std::invalid_argument("synthetic data: classes " + std::to_string(a) + " and " +
                                                              std::to_string(b) + " are indistinguishable");
    return out;
}

/// Classes interleaved (label = index mod n_classes); pixels clamped to [0,1].
inline LabeledImages generate_dataset(const SyntheticSpec& spec) {
    if (spec.noise_level < 0.0) throw std::invalid_argument("synthetic data: noise_level must be non-negative");
    const auto templates = class_templates(spec);
    Rng rng(spec.seed);
    LabeledImages data;
    data.n_classes = spec.n_classes;
    for (std::size_t i = 0; i < spec.samples_per_class * spec.n_classes; ++i) {
        const std::size_t y = i % spec.n_classes;
        Tensor img = templates[y];
        for (double& v : img.values()) v = std::clamp(v + spec.noise_level * rng.normal(), 0.0, 1.0);
        data.images.push_back(std::move(img));
        data.labels.push_back(y);
    }
    return data;
}

}  // namespace docvce
