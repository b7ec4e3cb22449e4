#pragma once

// Hierarchical patch-wise refinement of a counterfactual.
//
// Starting from a 2x2 grid over the whole image, each patch of the
// counterfactual is tentatively replaced by the factual pixels. The replacement
// is kept when the classifier still predicts the counterfactual class and its
// confidence stays within delta of the confidence of the unrefined
// counterfactual; otherwise the patch is split into a 2x2 grid and its
// children are queued (FIFO), down to the minimum patch side.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "docvce/models.hpp"
#include "docvce/tensor.hpp"

namespace docvce {

struct Patch {
    std::size_t row = 0;
    std::size_t col = 0;
    std::size_t height = 0;
    std::size_t width = 0;

    friend bool operator==(const Patch&, const Patch&) = default;
};

struct HPRConfig {
    double delta = 0.1;
    std::size_t min_patch = 2;

    void validate(std::size_t height, std::size_t width) const {
        if (!(delta > 0.0 && delta <= 1.0)) throw std::invalid_argument("hpr: delta must lie in (0,1]");
        if (min_patch < 1 || 2 * min_patch > std::min(height, width)) {
            throw std::invalid_argument("hpr: min_patch must lie in [1, side/2]");
        }
    }
};

/// Splits `region` into a 2x2 grid, ceil-first for odd sides, in row-major order.
inline std::vector<Patch> create_patch_grid(const Patch& region) {
    if (region.height < 2 || region.width < 2) {
        throw std::invalid_argument("create_patch_grid: region " + std::to_string(region.height) + "x" +
                                    std::to_string(region.width) + " is too small to split");
    }
    const std::size_t h1 = (region.height + 1) / 2, h2 = region.height - h1;
    const std::size_t w1 = (region.width + 1) / 2, w2 = region.width - w1;
    return {
        {region.row, region.col, h1, w1},
        {region.row, region.col + w1, h1, w2},
        {region.row + h1, region.col, h2, w1},
        {region.row + h1, region.col + w1, h2, w2},
    };
}

/// Copies `patch` (all channels) from `source` into `target`; images are [C,H,W].
inline void copy_patch(const Tensor& source, Tensor& target, const Patch& patch) {
    require_same_shape(source, target, "copy_patch");
    const std::size_t c = source.dim(0), h = source.dim(1), w = source.dim(2);
    if (patch.row + patch.height > h || patch.col + patch.width > w) {
        throw std::out_of_range("copy_patch: patch outside the image");
    }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = patch.row; y < patch.row + patch.height; ++y)
            for (std::size_t x = patch.col; x < patch.col + patch.width; ++x) {
                const std::size_t i = (ch * h + y) * w + x;
                target[i] = source[i];
            }
}

struct RefineDecision {
    Patch patch;
    bool accepted = false;
};

struct RefineResult {
    Tensor image;
    std::vector<RefineDecision> trace;
    std::size_t evaluations = 0;  // classifier calls, including the initial one
    double initial_confidence = 0.0;
    double final_confidence = 0.0;
};

/// Anything mapping an image to a class-probability vector.
template <class F>
concept ProbabilityModel = requires(const F& f, const Tensor& x) {
    { f(x) } -> std::convertible_to<std::vector<double>>;
};

/// Raised when the base counterfactual is not classified as the target class.
class PreconditionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

template <ProbabilityModel Model>
RefineResult refine(const Tensor& counterfactual, const Tensor& factual, const Model& classify, std::size_t target,
                    const HPRConfig& cfg) {
    require_same_shape(counterfactual, factual, "refine");
    if (counterfactual.rank() != 3) throw std::invalid_argument("refine: images must be [C,H,W]");
    const std::size_t h = counterfactual.dim(1), w = counterfactual.dim(2);
    cfg.validate(h, w);

    RefineResult result;
    const std::vector<double> initial = classify(counterfactual);
    result.evaluations = 1;
    if (target >= initial.size() || argmax(initial) != target) {
        throw PreconditionError("refine: base counterfactual is not classified as the target class " +
                                std::to_string(target));
    }
    const double reference = initial[target];
    result.initial_confidence = reference;
    result.final_confidence = reference;
    result.image = counterfactual;

    std::deque<Patch> queue;
    for (const Patch& p : create_patch_grid(Patch{0, 0, h, w})) queue.push_back(p);
    Tensor scratch = counterfactual;
    while (!queue.empty()) {
        const Patch p = queue.front();
        queue.pop_front();
        scratch = result.image;
        copy_patch(factual, scratch, p);
        const std::vector<double> probs = classify(scratch);
        ++result.evaluations;
        const bool keep = argmax(probs) == target && std::abs(reference - probs[target]) < cfg.delta;
        result.trace.push_back({p, keep});
        if (keep) {
            std::swap(result.image, scratch);
            result.final_confidence = probs[target];
        } else if (p.height > cfg.min_patch && p.width > cfg.min_patch) {
            for (const Patch& child : create_patch_grid(p)) queue.push_back(child);
        }
    }
    return result;
}

inline RefineResult refine(const Tensor& counterfactual, const Tensor& factual, const Classifier& classifier,
                           std::size_t target, const HPRConfig& cfg) {
    return refine(counterfactual, factual, [&classifier](const Tensor& x) { return classifier.classify(x); }, target,
                  cfg);
}

/// Upper bound on classifier calls made by refine().
inline std::size_t refine_evaluation_bound(std::size_t height, std::size_t width, std::size_t min_patch) {
    return 4 * height * width / (min_patch * min_patch);
}

/// Re-applies the accepted patches of a recorded trace.
inline Tensor replay_refinement(const Tensor& counterfactual, const Tensor& factual,
                                const std::vector<RefineDecision>& trace) {
    Tensor image = counterfactual;
    for (const auto& d : trace) {
        if (d.accepted) copy_patch(factual, image, d.patch);
    }
    return image;
}

/// |x_F - x| normalized by its maximum; all zeros when the images are identical.
inline Tensor difference_map(const Tensor& factual, const Tensor& refined) {
    require_same_shape(factual, refined, "difference_map");
    Tensor out(factual.shape());
    double peak = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::abs(factual[i] - refined[i]);
        peak = std::max(peak, out[i]);
    }
    if (peak > 0.0) {
        for (double& v : out.values()) v /= peak;
    }
    return out;
}

}  // namespace docvce
