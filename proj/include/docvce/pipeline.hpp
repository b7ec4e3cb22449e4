#pragma once

// End-to-end counterfactual generation: target selection, guided sampling,
// patch-wise refinement, difference map and per-sample metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "docvce/codec.hpp"
#include "docvce/guidance.hpp"
#include "docvce/hpr.hpp"
#include "docvce/metrics.hpp"
#include "docvce/models.hpp"
#include "docvce/random.hpp"
#include "docvce/schedule.hpp"
#include "docvce/tensor.hpp"

namespace docvce {

/// One explained sample plus everything needed to replay it.
struct CFRecord {
    std::size_t sample_index = 0;
    Tensor factual;
    std::size_t factual_class = 0;
    std::size_t target_class = 0;
    Tensor base_cf;
    Tensor refined_cf;
    Tensor difference;

    bool flipped = false;
    double confidence = 0.0;       // p(target | refined)
    double base_confidence = 0.0;  // p(target | base)
    double l1 = 0.0;               // refined vs factual
    double l2 = 0.0;
    double base_l1 = 0.0;
    double base_l2 = 0.0;
    std::size_t hpr_evaluations = 0;

    // replay snapshot
    std::uint64_t seed = 0;
    std::size_t top_k = 3;
    GuidanceConfig guidance;
    HPRConfig hpr;
};

struct MetricsReport {
    std::size_t n_samples = 0;
    std::size_t n_flipped = 0;
    double flip_ratio = 0.0;
    // Averages over flipped records; empty when nothing flipped.
    std::optional<double> mean_confidence;
    std::optional<double> mean_l1;
    std::optional<double> mean_l2;
    std::optional<double> mean_base_l1;
    std::optional<double> mean_base_l2;
    // Factual vs refined penultimate features; needs a classifier and two flipped records.
    std::optional<double> feature_frechet;
};

/// Uniform draw among the k most probable classes other than the predicted one.
inline std::size_t select_target_class(const Tensor& factual, const Classifier& classifier, std::size_t k, Rng& rng) {
    const std::size_t n = classifier.n_classes();
    if (k == 0 || k >= n) {
        throw std::invalid_argument("select_target_class: k must lie in [1, n_classes-1]");
    }
    const auto probs = classifier.classify(factual);
    const std::size_t predicted = argmax(probs);
    std::vector<std::size_t> order;
    for (std::size_t c = 0; c < n; ++c) {
        if (c != predicted) order.push_back(c);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    return order[rng.index(k)];
}

struct RunOptions {
    std::size_t top_k = 3;
    std::size_t sample_index = 0;
    std::optional<std::size_t> target;  // skip selection when set
};

/// `gcfg.rng_seed` seeds the whole run (target draw, projection noise, sampling noise).
inline CFRecord run_docvce(const Tensor& factual, const GuidanceModels& models, const Codec& codec,
                           const NoiseSchedule& schedule, const GuidanceConfig& gcfg, const HPRConfig& hcfg,
                           const RunOptions& options = {}) {
    gcfg.validate();
    hcfg.validate(factual.dim(1), factual.dim(2));
    const Classifier& classifier = models.classifier;
    Rng rng(gcfg.rng_seed);

    CFRecord r;
    r.sample_index = options.sample_index;
    r.factual = factual;
    r.factual_class = classifier.predict(factual);
    r.target_class = options.target ? *options.target : select_target_class(factual, classifier, options.top_k, rng);
    r.seed = gcfg.rng_seed;
    r.top_k = options.top_k;
    r.guidance = gcfg;
    r.hpr = hcfg;

    r.base_cf = generate_base_counterfactual(factual, r.target_class, models, codec, schedule, gcfg, rng);
    const auto base_probs = classifier.classify(r.base_cf);
    r.flipped = argmax(base_probs) == r.target_class;
    r.base_confidence = base_probs[r.target_class];
    if (r.flipped) {
        RefineResult refined = refine(r.base_cf, factual, classifier, r.target_class, hcfg);
        r.refined_cf = std::move(refined.image);
        r.hpr_evaluations = refined.evaluations;
    } else {
        r.refined_cf = r.base_cf;
    }
    r.difference = difference_map(factual, r.refined_cf);
    r.confidence = classifier.classify(r.refined_cf)[r.target_class];
    r.l1 = l1_distance(r.refined_cf, factual);
    r.l2 = l2_distance(r.refined_cf, factual);
    r.base_l1 = l1_distance(r.base_cf, factual);
    r.base_l2 = l2_distance(r.base_cf, factual);
    return r;
}

/// Re-runs a record from its stored seed and configuration.
inline CFRecord replay(const CFRecord& record, const GuidanceModels& models, const Codec& codec,
                       const NoiseSchedule& schedule) {
    RunOptions options;
    options.top_k = record.top_k;
    options.sample_index = record.sample_index;
    GuidanceConfig g = record.guidance;
    g.rng_seed = record.seed;
    return run_docvce(record.factual, models, codec, schedule, g, record.hpr, options);
}

inline MetricsReport evaluate(std::span<const CFRecord> records, const Classifier* classifier = nullptr) {
    if (records.empty()) throw std::invalid_argument("evaluate: no records");
    MetricsReport m;
    m.n_samples = records.size();
    double conf = 0.0, l1 = 0.0, l2 = 0.0, bl1 = 0.0, bl2 = 0.0;
    std::vector<Tensor> factual_features, refined_features;
    for (const CFRecord& r : records) {
        if (!r.flipped) continue;
        ++m.n_flipped;
        conf += r.confidence;
        l1 += r.l1;
        l2 += r.l2;
        bl1 += r.base_l1;
        bl2 += r.base_l2;
        if (classifier) {
            factual_features.push_back(classifier->penultimate_features(r.factual));
            refined_features.push_back(classifier->penultimate_features(r.refined_cf));
        }
    }
    m.flip_ratio = static_cast<double>(m.n_flipped) / static_cast<double>(m.n_samples);
    if (m.n_flipped > 0) {
        const double n = static_cast<double>(m.n_flipped);
        m.mean_confidence = conf / n;
        m.mean_l1 = l1 / n;
        m.mean_l2 = l2 / n;
        m.mean_base_l1 = bl1 / n;
        m.mean_base_l2 = bl2 / n;
    }
    if (classifier && m.n_flipped >= 2) m.feature_frechet = frechet_feature_distance(factual_features, refined_features);
    return m;
}

}  // namespace docvce
