#pragma once

// Class-conditional noise predictor and the target classifier.
//
// Both networks keep their weights as an ordered list of named tensors so the
// same code path serves inference (weights bound as graph constants), training
// (weights bound as differentiable inputs) and persistence.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "docvce/autodiff.hpp"
#include "docvce/random.hpp"
#include "docvce/schedule.hpp"
#include "docvce/serialize.hpp"
#include "docvce/tensor.hpp"

namespace docvce {

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double learning_rate = 0.01;
    double null_label_prob = 0.1;
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (epochs == 0) throw std::invalid_argument("train config: epochs must be positive");
        if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning_rate must be positive");
        if (!(null_label_prob >= 0.0 && null_label_prob <= 1.0)) {
            throw std::invalid_argument("train config: null_label_prob must lie in [0,1]");
        }
    }
};

struct TrainHistory {
    std::vector<double> epoch_losses;
};

/// Named weights of one network, in a fixed order.
class ParameterSet {
public:
    void add(std::string name, Tensor value) { params_.push_back({std::move(name), std::move(value)}); }

    std::size_t size() const { return params_.size(); }
    const Tensor& operator[](std::size_t i) const { return params_[i].tensor; }
    Tensor& operator[](std::size_t i) { return params_[i].tensor; }
    const std::string& name(std::size_t i) const { return params_[i].name; }
    const ArrayBundle& arrays() const { return params_; }

    std::vector<Var> bind(Graph& g, bool trainable) const {
        std::vector<Var> vars;
        vars.reserve(params_.size());
        for (const auto& p : params_) vars.push_back(trainable ? g.input(p.tensor) : g.constant(p.tensor));
        return vars;
    }

    void sgd_step(const Gradients& grads, const std::vector<Var>& vars, double lr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const Tensor gi = grads[vars[i]];
            Tensor& p = params_[i].tensor;
            for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * gi[k];
        }
    }

    void load(const ArrayBundle& bundle) {
        for (auto& p : params_) {
            const Tensor& stored = find_array(bundle, p.name);
            if (stored.shape() != p.tensor.shape()) {
                throw ModelFileError("weights: array '" + p.name + "' has shape " + shape_string(stored.shape()) +
                                     ", expected " + shape_string(p.tensor.shape()));
            }
            p.tensor = stored;
        }
    }

private:
    ArrayBundle params_;
};

namespace detail {

inline Tensor random_normal(Rng& rng, Shape shape, double stddev) {
    Tensor t = rng.normal(shape);
    for (double& v : t.values()) v *= stddev;
    return t;
}

inline Tensor stack_rows(std::span<const Tensor> rows) {
    const std::size_t d = rows.front().size();
    Tensor out(Shape{rows.size(), d});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != d) throw std::invalid_argument("stack_rows: ragged batch");
        std::copy(rows[r].values().begin(), rows[r].values().end(), out.data() + r * d);
    }
    return out;
}

inline Tensor config_array(std::initializer_list<std::size_t> values) {
    std::vector<double> v;
    for (auto x : values) v.push_back(static_cast<double>(x));
    const Shape shape{v.size()};
    return Tensor(shape, std::move(v));
}

inline std::size_t config_entry(const Tensor& t, std::size_t i) {
    if (i >= t.size()) throw ModelFileError("weights: config array too short");
    return static_cast<std::size_t>(t[i]);
}

}  // namespace detail

/// Fixed sinusoidal embedding of integer timesteps, [len(t), dim].
inline Tensor timestep_embedding(std::span<const std::size_t> t, std::size_t dim) {
    const std::size_t half = dim / 2;
    Tensor out(Shape{t.size(), dim});
    for (std::size_t r = 0; r < t.size(); ++r) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double arg = static_cast<double>(t[r]) * freq;
            out[r * dim + i] = std::sin(arg);
            out[r * dim + half + i] = std::cos(arg);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Denoiser

struct DenoiserConfig {
    std::size_t latent_dim = 1024;
    std::size_t hidden = 256;
    std::size_t time_dim = 64;
    std::size_t n_classes = 4;
    std::size_t blocks = 2;
    std::size_t total_timesteps = 1000;
};

/// eps_theta(z_t, t, y): residual MLP over the flattened latent with additive
/// time and class embeddings, plus a time-gated skip of the input latent.
/// Class id n_classes is the null label.
class Denoiser {
public:
    Denoiser() = default;

    Denoiser(DenoiserConfig config, std::uint64_t seed) : config_(config) {
        Rng rng(seed);
        const std::size_t d = config_.latent_dim, h = config_.hidden, td = config_.time_dim;
        params_.add("denoiser.in.weight", detail::random_normal(rng, {d, h}, 1.0 / std::sqrt(double(d))));
        params_.add("denoiser.in.bias", Tensor(Shape{h}));
        params_.add("denoiser.time.weight", detail::random_normal(rng, {td, h}, 1.0 / std::sqrt(double(td))));
        params_.add("denoiser.class_embedding", detail::random_normal(rng, {config_.n_classes + 1, h}, 0.5));
        for (std::size_t b = 0; b < config_.blocks; ++b) {
            const std::string p = "denoiser.block" + std::to_string(b);
            params_.add(p + ".weight", detail::random_normal(rng, {h, h}, 1.0 / std::sqrt(double(h))));
            params_.add(p + ".bias", Tensor(Shape{h}));
        }
        params_.add("denoiser.out.weight", Tensor(Shape{h, d}));
        params_.add("denoiser.out.bias", Tensor(Shape{d}));
        params_.add("denoiser.gate.weight", Tensor(Shape{td, 1}));
        params_.add("denoiser.gate.bias", Tensor(Shape{1}));
    }

    const DenoiserConfig& config() const { return config_; }
    std::size_t null_label() const { return config_.n_classes; }
    ParameterSet& parameters() { return params_; }
    const ParameterSet& parameters() const { return params_; }

    /// Batched forward on [B, latent_dim] with explicitly bound weights.
    Var forward(Var z, std::span<const std::size_t> t, std::span<const std::size_t> y,
                const std::vector<Var>& w) const {
        Graph& g = *z.graph;
        const Shape& zs = z.value().shape();
        if (zs.size() != 2 || zs[1] != config_.latent_dim || zs[0] != t.size() || zs[0] != y.size()) {
            throw std::invalid_argument("denoiser: expected [B," + std::to_string(config_.latent_dim) +
                                        "] with one timestep and label per row, got " + shape_string(zs));
        }
        for (std::size_t r = 0; r < t.size(); ++r) check_inputs(t[r], y[r]);
        Var temb = g.constant(timestep_embedding(t, config_.time_dim));
        std::size_t k = 0;
        Var h = affine(z, w[k], w[k + 1]);
        k += 2;
        h = add(h, matmul(temb, w[k++]));
        h = silu(add(h, embedding(w[k++], std::vector<std::size_t>(y.begin(), y.end()))));
        for (std::size_t b = 0; b < config_.blocks; ++b, k += 2) {
            h = add(h, silu(affine(h, w[k], w[k + 1])));
        }
        Var out = affine(h, w[k], w[k + 1]);
        k += 2;
        Var gate = affine(temb, w[k], w[k + 1]);
        return add(out, scale_rows(z, gate));
    }

    /// Single-sample prediction, differentiable wrt z_t; z_t may have any shape of latent_dim elements.
    Var denoise(Var z_t, std::size_t t, std::size_t y) const {
        Graph& g = *z_t.graph;
        const Shape shape = z_t.value().shape();
        if (z_t.value().size() != config_.latent_dim) {
            throw std::invalid_argument("denoiser: latent " + shape_string(shape) + " does not have " +
                                        std::to_string(config_.latent_dim) + " elements");
        }
        const std::size_t ts[1] = {t};
        const std::size_t ys[1] = {y};
        Var out = forward(reshape(z_t, {1, config_.latent_dim}), ts, ys, params_.bind(g, false));
        return reshape(out, shape);
    }

    Tensor denoise(const Tensor& z_t, std::size_t t, std::size_t y) const {
        Graph g;
        return denoise(g.constant(z_t), t, y).value();
    }

    ArrayBundle to_arrays() const {
        ArrayBundle bundle;
        bundle.push_back({"denoiser.config",
                          detail::config_array({config_.latent_dim, config_.hidden, config_.time_dim,
                                                config_.n_classes, config_.blocks, config_.total_timesteps})});
        for (const auto& p : params_.arrays()) bundle.push_back(p);
        return bundle;
    }

    static Denoiser from_arrays(const ArrayBundle& bundle) {
        const Tensor& c = find_array(bundle, "denoiser.config");
        DenoiserConfig cfg{detail::config_entry(c, 0), detail::config_entry(c, 1), detail::config_entry(c, 2),
                           detail::config_entry(c, 3), detail::config_entry(c, 4), detail::config_entry(c, 5)};
        Denoiser d(cfg, 0);
        d.params_.load(bundle);
        return d;
    }

    void save(const std::filesystem::path& path) const { save_container(path, to_arrays()); }
    static Denoiser load(const std::filesystem::path& path) { return from_arrays(load_container(path)); }

private:
    void check_inputs(std::size_t t, std::size_t y) const {
        if (y > config_.n_classes) throw std::invalid_argument("denoiser: unknown class id " + std::to_string(y));
        if (t < 1 || t > config_.total_timesteps) {
            throw std::out_of_range("denoiser: timestep " + std::to_string(t) + " outside [1," +
                                    std::to_string(config_.total_timesteps) + "]");
        }
    }

    DenoiserConfig config_;
    ParameterSet params_;
};

/// Mean over samples of ||eps - eps_hat||^2.
inline double noise_prediction_loss(std::span<const Tensor> eps, std::span<const Tensor> predicted) {
    if (eps.size() != predicted.size() || eps.empty()) {
        throw std::invalid_argument("noise_prediction_loss: need equally many, nonempty samples");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const Tensor d = eps[i] - predicted[i];
        total += dot(d, d);
    }
    return total / static_cast<double>(eps.size());
}

/// Minimizes E||eps - eps_theta(z_t, t, y)||^2 with t ~ U[1,T], eps ~ N(0,I) and the
/// label replaced by the null label with probability cfg.null_label_prob.
/// Trains `model` in place by plain SGD and returns the mean loss per epoch.
inline TrainHistory train_denoiser(Denoiser& model, std::span<const Tensor> latents,
                                   std::span<const std::size_t> labels, const TrainConfig& cfg,
                                   const NoiseSchedule& schedule) {
    cfg.validate();
    if (latents.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
    if (latents.size() != labels.size()) throw std::invalid_argument("train_denoiser: one label per latent required");
    if (schedule.steps() != model.config().total_timesteps) {
        throw std::invalid_argument("train_denoiser: schedule length does not match the model");
    }
    Rng rng(cfg.rng_seed);
    std::vector<std::size_t> order(latents.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    TrainHistory history;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        double epoch_total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<Tensor> noisy, noise;
            std::vector<std::size_t> ts, ys;
            for (std::size_t i = start; i < end; ++i) {
                const Tensor& z0 = latents[order[i]];
                const std::size_t t = 1 + rng.index(schedule.steps());
                Tensor eps = rng.normal(z0.shape());
                noisy.push_back(forward_sample(z0, t, eps, schedule));
                noise.push_back(std::move(eps));
                ts.push_back(t);
                ys.push_back(rng.bernoulli(cfg.null_label_prob) ? model.null_label() : labels[order[i]]);
            }
            const double batch = static_cast<double>(end - start);
            Graph g;
            const auto w = model.parameters().bind(g, true);
            Var pred = model.forward(g.constant(detail::stack_rows(noisy)), ts, ys, w);
            Var loss = scale(squared_l2(pred, g.constant(detail::stack_rows(noise))), 1.0 / batch);
            epoch_total += loss.value()[0] * batch;
            model.parameters().sgd_step(g.backward(loss), w, cfg.learning_rate);
        }
        history.epoch_losses.push_back(epoch_total / static_cast<double>(order.size()));
    }
    return history;
}

// ---------------------------------------------------------------------------
// Classifier

struct ClassifierConfig {
    std::size_t input_dim = 1024;
    std::size_t hidden = 32;
    std::size_t n_classes = 4;
};

/// p_phi(y|x): one tanh feature layer (the penultimate features) and a linear head.
class Classifier {
public:
    Classifier() = default;

    Classifier(ClassifierConfig config, std::uint64_t seed) : config_(config) {
        Rng rng(seed);
        params_.add("classifier.hidden.weight",
                    detail::random_normal(rng, {config_.input_dim, config_.hidden}, 1.0 / std::sqrt(double(config_.input_dim))));
        params_.add("classifier.hidden.bias", Tensor(Shape{config_.hidden}));
        params_.add("classifier.head.weight",
                    detail::random_normal(rng, {config_.hidden, config_.n_classes}, 0.01 / std::sqrt(double(config_.hidden))));
        params_.add("classifier.head.bias", Tensor(Shape{config_.n_classes}));
    }

    const ClassifierConfig& config() const { return config_; }
    std::size_t n_classes() const { return config_.n_classes; }
    std::size_t feature_dim() const { return config_.hidden; }
    ParameterSet& parameters() { return params_; }
    const ParameterSet& parameters() const { return params_; }

    /// Penultimate features for [B, input_dim].
    Var features(Var x, const std::vector<Var>& w) const {
        const Shape& s = x.value().shape();
        if (s.size() != 2 || s[1] != config_.input_dim) {
            throw std::invalid_argument("classifier: expected [B," + std::to_string(config_.input_dim) + "], got " +
                                        shape_string(s));
        }
        return tanh(affine(x, w[0], w[1]));
    }

    Var logits(Var x, const std::vector<Var>& w) const { return affine(features(x, w), w[2], w[3]); }

    /// log p(target | x) as a scalar node; x may have any shape of input_dim elements.
    Var log_prob(Var x, std::size_t target) const {
        check_class(target);
        Var flat = reshape(x, {1, checked_size(x.value())});
        Var lp = log_softmax(logits(flat, params_.bind(*x.graph, false)));
        return reshape(pick(lp, {target}), {1});
    }

    std::vector<double> log_probabilities(const Tensor& x) const {
        Graph g;
        Var lp = log_softmax(logits(g.constant(x.reshaped({1, checked_size(x)})), params_.bind(g, false)));
        return lp.value().storage();
    }

    std::vector<double> classify(const Tensor& x) const {
        auto p = log_probabilities(x);
        for (double& v : p) v = std::exp(v);
        return p;
    }

    std::size_t predict(const Tensor& x) const { return argmax(log_probabilities(x)); }

    /// Gradient of log p(target|x) wrt x, shaped like x.
    Tensor log_prob_grad(const Tensor& x, std::size_t target) const {
        Graph g;
        Var in = g.input(x);
        return grad(g, log_prob(in, target), in);
    }

    Tensor penultimate_features(const Tensor& x) const {
        Graph g;
        Var f = features(g.constant(x.reshaped({1, checked_size(x)})), params_.bind(g, false));
        return f.value().reshaped({config_.hidden});
    }

    ArrayBundle to_arrays() const {
        ArrayBundle bundle;
        bundle.push_back({"classifier.config",
                          detail::config_array({config_.input_dim, config_.hidden, config_.n_classes})});
        for (const auto& p : params_.arrays()) bundle.push_back(p);
        return bundle;
    }

    static Classifier from_arrays(const ArrayBundle& bundle) {
        const Tensor& c = find_array(bundle, "classifier.config");
        Classifier m({detail::config_entry(c, 0), detail::config_entry(c, 1), detail::config_entry(c, 2)}, 0);
        m.params_.load(bundle);
        return m;
    }

    void save(const std::filesystem::path& path) const { save_container(path, to_arrays()); }
    static Classifier load(const std::filesystem::path& path) { return from_arrays(load_container(path)); }

private:
    std::size_t checked_size(const Tensor& x) const {
        if (x.size() != config_.input_dim) {
            throw std::invalid_argument("classifier: input " + shape_string(x.shape()) + " does not have " +
                                        std::to_string(config_.input_dim) + " elements");
        }
        return x.size();
    }

    void check_class(std::size_t y) const {
        if (y >= config_.n_classes) throw std::invalid_argument("classifier: invalid class " + std::to_string(y));
    }

    ClassifierConfig config_;
    ParameterSet params_;
};

/// Mean cross-entropy, minimized by plain SGD. Returns the mean loss per epoch.
inline TrainHistory train_classifier(Classifier& model, std::span<const Tensor> images,
                                     std::span<const std::size_t> labels, const TrainConfig& cfg) {
    cfg.validate();
    if (images.empty()) throw std::invalid_argument("train_classifier: empty dataset");
    if (images.size() != labels.size()) throw std::invalid_argument("train_classifier: one label per image required");
    for (std::size_t y : labels) {
        if (y >= model.n_classes()) throw std::invalid_argument("train_classifier: label out of range");
    }
    Rng rng(cfg.rng_seed);
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    TrainHistory history;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        double epoch_total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<Tensor> rows;
            std::vector<std::size_t> ys;
            for (std::size_t i = start; i < end; ++i) {
                rows.push_back(images[order[i]]);
                ys.push_back(labels[order[i]]);
            }
            const double batch = static_cast<double>(end - start);
            Graph g;
            const auto w = model.parameters().bind(g, true);
            Var lp = log_softmax(model.logits(g.constant(detail::stack_rows(rows)), w));
            Var loss = scale(sum(pick(lp, ys)), -1.0 / batch);
            epoch_total += loss.value()[0] * batch;
            model.parameters().sgd_step(g.backward(loss), w, cfg.learning_rate);
        }
        history.epoch_losses.push_back(epoch_total / static_cast<double>(order.size()));
    }
    return history;
}

inline double accuracy(const Classifier& model, std::span<const Tensor> images, std::span<const std::size_t> labels) {
    if (images.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < images.size(); ++i) hits += model.predict(images[i]) == labels[i];
    return static_cast<double>(hits) / static_cast<double>(images.size());
}

}  // namespace docvce
