#pragma once

// Small trained classifier + denoiser on the synthetic set, shared by tests.

#include <chrono>
#include <cstddef>
#include <vector>

#include "docvce/docvce.hpp"

namespace docvce::testing {

struct ToyStackOptions {
    std::size_t samples_per_class = 100;
    std::size_t test_per_class = 50;
    std::size_t classifier_epochs = 30;
    double classifier_lr = 0.05;
    std::size_t denoiser_hidden = 256;
    std::size_t denoiser_epochs = 60;
    double denoiser_lr = 3e-5;
};

struct ToyStack {
    LabeledImages train;
    LabeledImages test;
    Classifier classifier;
    Codec codec;
    NoiseSchedule schedule;
    Denoiser denoiser;
    double classifier_seconds = 0.0;
    double denoiser_seconds = 0.0;

    GuidanceModels models() const { return {denoiser, classifier}; }
};

inline double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline ToyStack build_toy_stack(const ToyStackOptions& o = {}) {
    ToyStack s;
    SyntheticSpec spec;
    spec.samples_per_class = o.samples_per_class;
    spec.seed = 1;
    s.train = generate_dataset(spec);
    spec.samples_per_class = o.test_per_class;
    spec.seed = 2;
    s.test = generate_dataset(spec);

    auto start = std::chrono::steady_clock::now();
    s.classifier = Classifier(ClassifierConfig{}, 7);
    TrainConfig cc;
    cc.epochs = o.classifier_epochs;
    cc.learning_rate = o.classifier_lr;
    cc.rng_seed = 3;
    train_classifier(s.classifier, s.train.images, s.train.labels, cc);
    s.classifier_seconds = seconds_since(start);

    s.codec.set_eta(fit_latent_scale(s.codec, s.train.images));
    s.schedule = build_linear_schedule(1000, 1e-4, 0.02);
    std::vector<Tensor> latents;
    for (const Tensor& x : s.train.images) latents.push_back(s.codec.to_diffusion_latent(x));

    start = std::chrono::steady_clock::now();
    DenoiserConfig dc;
    dc.hidden = o.denoiser_hidden;
    s.denoiser = Denoiser(dc, 11);
    TrainConfig dt;
    dt.epochs = o.denoiser_epochs;
    dt.learning_rate = o.denoiser_lr;
    dt.rng_seed = 5;
    train_denoiser(s.denoiser, latents, s.train.labels, dt, s.schedule);
    s.denoiser_seconds = seconds_since(start);
    return s;
}

/// Cheaper stack for unit tests that only need "some" trained weights.
inline const ToyStack& small_stack() {
    static const ToyStack stack = [] {
        ToyStackOptions o;
        o.samples_per_class = 60;
        o.test_per_class = 25;
        o.denoiser_hidden = 64;
        o.denoiser_epochs = 15;
        o.denoiser_lr = 3e-5;
        return build_toy_stack(o);
    }();
    return stack;
}

}  // namespace docvce::testing
