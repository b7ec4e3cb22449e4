#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <vector>

#include "docvce/docvce.hpp"
#include "oracles.hpp"
#include "toy_stack.hpp"

using namespace docvce;
using docvce::testing::randomize;
using docvce::testing::small_stack;

namespace {

DenoiserConfig tiny_denoiser_config() {
    DenoiserConfig c;
    c.latent_dim = 12;
    c.hidden = 16;
    c.time_dim = 8;
    c.n_classes = 3;
    c.total_timesteps = 50;
    return c;
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

double cosine(const Tensor& a, const Tensor& b) { return dot(a, b) / (l2_norm(a) * l2_norm(b)); }

}  // namespace

// --- denoiser -----------------------------------------------------------------

TEST(Denoiser, UntrainedOutputIsZero) {
    Rng rng(1);
    const Denoiser d(DenoiserConfig{}, 3);
    const Tensor out = d.denoise(rng.normal({4, 16, 16}), 123, 2);
    EXPECT_EQ(out.shape(), (Shape{4, 16, 16}));
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Denoiser, Deterministic) {
    Rng rng(2);
    Denoiser d(tiny_denoiser_config(), 4);
    randomize(d, 5);
    const Tensor z = rng.normal({12});
    EXPECT_EQ(d.denoise(z, 7, 1), d.denoise(z, 7, 1));
    EXPECT_NE(d.denoise(z, 7, 1), d.denoise(z, 7, d.null_label()));
}

TEST(Denoiser, InputErrors) {
    const Denoiser d(tiny_denoiser_config(), 4);
    EXPECT_THROW(d.denoise(Tensor(Shape{12}), 0, 0), std::out_of_range);
    EXPECT_THROW(d.denoise(Tensor(Shape{12}), 51, 0), std::out_of_range);
    EXPECT_THROW(d.denoise(Tensor(Shape{12}), 3, 4), std::invalid_argument);
    EXPECT_THROW(d.denoise(Tensor(Shape{11}), 3, 0), std::invalid_argument);
}

TEST(Denoiser, GradientsWrtInputAndWeights) {
    Rng rng(6);
    Denoiser d(tiny_denoiser_config(), 7);
    randomize(d, 8);
    const Tensor target = rng.normal({2, 12});
    const std::size_t ts[2] = {3, 41};
    const std::size_t ys[2] = {0, 3};
    for (int trial = 0; trial < 3; ++trial) {
        auto wrt_z = [&](Graph& g, Var z) {
            return squared_l2(d.forward(z, ts, ys, d.parameters().bind(g, false)), g.constant(target));
        };
        EXPECT_LT(finite_diff_check(wrt_z, rng.normal({2, 12}), 1e-5), 1e-4);
        const Tensor z = rng.normal({2, 12});
        for (std::size_t k = 0; k < d.parameters().size(); ++k) {
            auto wrt_w = [&](Graph& g, Var w) {
                auto ws = d.parameters().bind(g, false);
                ws[k] = w;
                return squared_l2(d.forward(g.constant(z), ts, ys, ws), g.constant(target));
            };
            EXPECT_LT(finite_diff_check(wrt_w, d.parameters()[k], 1e-5), 1e-4) << d.parameters().name(k);
        }
    }
}

TEST(Denoiser, TrainingIsReproducible) {
    Rng rng(9);
    std::vector<Tensor> latents;
    std::vector<std::size_t> labels;
    for (int i = 0; i < 20; ++i) {
        latents.push_back(rng.normal({12}));
        labels.push_back(i % 3);
    }
    const auto schedule = build_linear_schedule(50, 1e-3, 0.2);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    cfg.rng_seed = 10;
    Denoiser a(tiny_denoiser_config(), 11), b(tiny_denoiser_config(), 11);
    const auto ha = train_denoiser(a, latents, labels, cfg, schedule);
    const auto hb = train_denoiser(b, latents, labels, cfg, schedule);
    EXPECT_EQ(ha.epoch_losses, hb.epoch_losses);
    EXPECT_EQ(a.to_arrays().back().tensor, b.to_arrays().back().tensor);
}

TEST(Denoiser, OverfitsSingleImage) {
    Rng rng(12);
    const std::vector<Tensor> latents{rng.normal({12})};
    const std::vector<std::size_t> labels{1};
    const auto schedule = build_linear_schedule(50, 1e-3, 0.2);
    // training objective estimated on a fixed set of (t, eps) draws
    auto objective = [&](const Denoiser& d) {
        Rng draw(99);
        std::vector<Tensor> eps, pred;
        for (int i = 0; i < 2000; ++i) {
            const std::size_t t = 1 + draw.index(50);
            eps.push_back(draw.normal({12}));
            pred.push_back(d.denoise(forward_sample(latents[0], t, eps.back(), schedule), t, 1));
        }
        return noise_prediction_loss(eps, pred);
    };
    TrainConfig cfg;
    cfg.epochs = 3000;
    cfg.batch_size = 1;
    cfg.learning_rate = 3e-3;
    cfg.null_label_prob = 0.0;
    cfg.rng_seed = 13;
    Denoiser d(tiny_denoiser_config(), 14);
    const double initial = objective(d);
    train_denoiser(d, latents, labels, cfg, schedule);
    EXPECT_LT(objective(d), 0.1 * initial);
}

TEST(Denoiser, NullLabelOnlyLeavesClassRowsUntouched) {
    Rng rng(15);
    std::vector<Tensor> latents;
    std::vector<std::size_t> labels;
    for (int i = 0; i < 12; ++i) {
        latents.push_back(rng.normal({12}));
        labels.push_back(i % 3);
    }
    Denoiser d(tiny_denoiser_config(), 16);
    randomize(d, 17);
    std::size_t k = 0;
    while (d.parameters().name(k) != "denoiser.class_embedding") ++k;
    const Tensor before = d.parameters()[k];
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    cfg.null_label_prob = 1.0;
    train_denoiser(d, latents, labels, cfg, build_linear_schedule(50, 1e-3, 0.2));
    const Tensor& after = d.parameters()[k];
    const std::size_t h = tiny_denoiser_config().hidden;
    for (std::size_t i = 0; i < 3 * h; ++i) EXPECT_EQ(after[i], before[i]);
    bool null_row_moved = false;
    for (std::size_t i = 3 * h; i < 4 * h; ++i) null_row_moved |= after[i] != before[i];
    EXPECT_TRUE(null_row_moved);
}

TEST(Denoiser, LossOracles) {
    Rng rng(18);
    std::vector<Tensor> eps, zeros;
    for (int i = 0; i < 1000; ++i) {
        eps.push_back(rng.normal({4, 16, 16}));
        zeros.emplace_back(Shape{4, 16, 16});
    }
    EXPECT_EQ(noise_prediction_loss(eps, eps), 0.0);
    EXPECT_NEAR(noise_prediction_loss(eps, zeros) / 1024.0, 1.0, 0.05);
    EXPECT_THROW(noise_prediction_loss(eps, std::vector<Tensor>{}), std::invalid_argument);
}

TEST(Denoiser, WeightsRoundTripBitwise) {
    const auto dir = std::filesystem::temp_directory_path() / "docvce_test_models";
    std::filesystem::create_directories(dir);
    Denoiser d(tiny_denoiser_config(), 19);
    randomize(d, 20);
    d.save(dir / "a.dvce");
    const Denoiser back = Denoiser::load(dir / "a.dvce");
    back.save(dir / "b.dvce");
    EXPECT_EQ(file_bytes(dir / "a.dvce"), file_bytes(dir / "b.dvce"));
    for (std::size_t i = 0; i < d.parameters().size(); ++i) EXPECT_EQ(d.parameters()[i], back.parameters()[i]);
    EXPECT_EQ(back.config().hidden, 16u);
    EXPECT_THROW(Classifier::load(dir / "a.dvce"), ModelFileError);
    std::filesystem::remove_all(dir);
}

TEST(Denoiser, TrainingRejectsBadInput) {
    Denoiser d(tiny_denoiser_config(), 1);
    const std::vector<Tensor> latents{Tensor(Shape{12})};
    const std::vector<std::size_t> labels{0};
    TrainConfig cfg;
    EXPECT_THROW(train_denoiser(d, latents, labels, cfg, build_linear_schedule(10, 1e-3, 0.2)), std::invalid_argument);
    EXPECT_THROW(train_denoiser(d, {}, {}, cfg, build_linear_schedule(50, 1e-3, 0.2)), std::invalid_argument);
    cfg.learning_rate = 0.0;
    EXPECT_THROW(train_denoiser(d, latents, labels, cfg, build_linear_schedule(50, 1e-3, 0.2)), std::invalid_argument);
}

// --- classifier ---------------------------------------------------------------

TEST(Classifier, UntrainedIsNearUniform) {
    Rng rng(21);
    const Classifier c(ClassifierConfig{}, 22);
    for (int i = 0; i < 10; ++i) {
        Tensor x = rng.normal({1, 32, 32});
        for (double& v : x.values()) v = std::clamp(0.5 + 0.3 * v, 0.0, 1.0);
        for (double p : c.classify(x)) EXPECT_NEAR(p, 0.25, 0.02);
    }
}

TEST(Classifier, OutputIsADistribution) {
    Rng rng(23);
    const auto& s = small_stack();
    for (int i = 0; i < 50; ++i) {
        Tensor x(Shape{1, 32, 32});
        for (double& v : x.values()) v = rng.uniform();
        const auto p = s.classifier.classify(x);
        double total = 0.0;
        for (double v : p) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
            total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Classifier, HeldOutAccuracy) {
    const auto& s = small_stack();
    EXPECT_GE(accuracy(s.classifier, s.test.images, s.test.labels), 0.95);
}

TEST(Classifier, OverfitsSingleBatch) {
    SyntheticSpec spec;
    spec.samples_per_class = 4;
    const auto data = generate_dataset(spec);
    Classifier c(ClassifierConfig{}, 24);
    TrainConfig cfg;
    cfg.epochs = 1000;
    cfg.batch_size = data.size();
    cfg.learning_rate = 0.05;
    const auto h = train_classifier(c, data.images, data.labels, cfg);
    EXPECT_LT(h.epoch_losses.back(), 0.01);
}

TEST(Classifier, TrainingIsReproducible) {
    SyntheticSpec spec;
    spec.samples_per_class = 10;
    const auto data = generate_dataset(spec);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.rng_seed = 25;
    Classifier a(ClassifierConfig{}, 26), b(ClassifierConfig{}, 26);
    EXPECT_EQ(train_classifier(a, data.images, data.labels, cfg).epoch_losses,
              train_classifier(b, data.images, data.labels, cfg).epoch_losses);
    for (std::size_t i = 0; i < a.parameters().size(); ++i) EXPECT_EQ(a.parameters()[i], b.parameters()[i]);
}

TEST(Classifier, PermutedLabelsGiveChanceAccuracy) {
    SyntheticSpec spec;
    spec.seed = 27;
    auto train = generate_dataset(spec);
    spec.seed = 28;
    spec.samples_per_class = 100;
    auto test = generate_dataset(spec);
    Rng rng(29);
    std::shuffle(train.labels.begin(), train.labels.end(), rng.engine());
    std::shuffle(test.labels.begin(), test.labels.end(), rng.engine());
    Classifier c(ClassifierConfig{}, 30);
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.learning_rate = 0.05;
    train_classifier(c, train.images, train.labels, cfg);
    EXPECT_NEAR(accuracy(c, test.images, test.labels), 0.25, 0.10);
}

TEST(Classifier, LogProbGradientMatchesFiniteDifferencesAtRandomPixels) {
    Rng rng(31);
    const auto& s = small_stack();
    const Tensor x = s.test.images[3];
    for (std::size_t target = 0; target < 4; ++target) {
        const Tensor g = s.classifier.log_prob_grad(x, target);
        ASSERT_EQ(g.shape(), x.shape());
        for (int probe = 0; probe < 20; ++probe) {
            const std::size_t i = rng.index(x.size());
            Tensor up = x, down = x;
            up[i] += 1e-5;
            down[i] -= 1e-5;
            const double numeric =
                (s.classifier.log_probabilities(up)[target] - s.classifier.log_probabilities(down)[target]) / 2e-5;
            EXPECT_LT(std::abs(g[i] - numeric) / (std::abs(g[i]) + 1e-12), 1e-4);
        }
    }
}

TEST(Classifier, FullGradientsWrtInputAndWeights) {
    Rng rng(32);
    Classifier c(ClassifierConfig{24, 6, 3}, 33);
    randomize(c, 34);
    int probes = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t target = rng.index(3);
        auto wrt_x = [&](Graph&, Var x) { return c.log_prob(x, target); };
        EXPECT_LT(finite_diff_check(wrt_x, rng.normal({24}), 1e-5), 1e-4);
        ++probes;
        const Tensor x = rng.normal({2, 24});
        for (std::size_t k = 0; k < c.parameters().size(); ++k) {
            auto wrt_w = [&](Graph& g, Var w) {
                auto ws = c.parameters().bind(g, false);
                ws[k] = w;
                return sum(pick(log_softmax(c.logits(g.constant(x), ws)), {target, 0}));
            };
            EXPECT_LT(finite_diff_check(wrt_w, c.parameters()[k], 1e-5), 1e-4);
            ++probes;
        }
    }
    EXPECT_GE(probes, 50);
}

TEST(Classifier, SaturatedClassHasSmallerGradient) {
    const auto& s = small_stack();
    const auto templates = class_templates(SyntheticSpec{});
    const Tensor& confident = templates[0];
    const Tensor& unlikely = templates[1];
    ASSERT_GT(s.classifier.classify(confident)[0], 0.9);
    ASSERT_LT(s.classifier.classify(unlikely)[0], 0.1);
    EXPECT_LT(l2_norm(s.classifier.log_prob_grad(confident, 0)), l2_norm(s.classifier.log_prob_grad(unlikely, 0)));
}

TEST(Classifier, ProbabilityWeightedGradientsCancel) {
    const auto& s = small_stack();
    for (int i = 0; i < 5; ++i) {
        const Tensor& x = s.test.images[static_cast<std::size_t>(i)];
        const auto p = s.classifier.classify(x);
        Tensor total(x.shape());
        for (std::size_t y = 0; y < 4; ++y) total = axpby(1.0, total, p[y], s.classifier.log_prob_grad(x, y));
        for (double v : total.values()) EXPECT_NEAR(v, 0.0, 1e-9);
    }
}

TEST(Classifier, PenultimateFeatures) {
    const auto& s = small_stack();
    const Tensor f = s.classifier.penultimate_features(s.test.images[0]);
    EXPECT_EQ(f.size(), s.classifier.feature_dim());
    EXPECT_EQ(f, s.classifier.penultimate_features(s.test.images[0]));
    EXPECT_THROW(s.classifier.penultimate_features(Tensor(Shape{5})), std::invalid_argument);

    double same = 0.0, cross = 0.0;
    std::size_t n_same = 0, n_cross = 0;
    std::vector<Tensor> feats;
    for (std::size_t i = 0; i < 40; ++i) feats.push_back(s.classifier.penultimate_features(s.test.images[i]));
    for (std::size_t i = 0; i < 40; ++i)
        for (std::size_t j = i + 1; j < 40; ++j) {
            const double c = cosine(feats[i], feats[j]);
            if (s.test.labels[i] == s.test.labels[j]) {
                same += c;
                ++n_same;
            } else {
                cross += c;
                ++n_cross;
            }
        }
    EXPECT_GT(same / n_same, cross / n_cross);
}

TEST(Classifier, Errors) {
    const Classifier c(ClassifierConfig{}, 1);
    EXPECT_THROW(c.log_prob_grad(Tensor(Shape{1, 32, 32}), 4), std::invalid_argument);
    EXPECT_THROW(c.classify(Tensor(Shape{1, 16, 16})), std::invalid_argument);
    TrainConfig cfg;
    Classifier m(ClassifierConfig{}, 1);
    EXPECT_THROW(train_classifier(m, {}, {}, cfg), std::invalid_argument);
    const std::vector<Tensor> one{Tensor(Shape{1, 32, 32})};
    const std::vector<std::size_t> bad{9};
    EXPECT_THROW(train_classifier(m, one, bad, cfg), std::invalid_argument);
}

TEST(Classifier, WeightsRoundTripBitwise) {
    const auto dir = std::filesystem::temp_directory_path() / "docvce_test_classifier";
    std::filesystem::create_directories(dir);
    const auto& s = small_stack();
    s.classifier.save(dir / "c.dvce");
    const Classifier back = Classifier::load(dir / "c.dvce");
    back.save(dir / "c2.dvce");
    EXPECT_EQ(file_bytes(dir / "c.dvce"), file_bytes(dir / "c2.dvce"));
    EXPECT_EQ(back.classify(s.test.images[0]), s.classifier.classify(s.test.images[0]));
    std::filesystem::remove_all(dir);
}
