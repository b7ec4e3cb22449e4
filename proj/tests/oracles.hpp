#pragma once

// Independent reference implementations shared by the unit tests and the acceptance run.

#include <cmath>
#include <cstdint>
#include <list>
#include <vector>

#include "docvce/docvce.hpp"

namespace docvce::testing {

// Replaces every weight with N(0, 0.3^2) so no gradient path is zeroed by initialization.
template <class Model>
void randomize(Model& m, std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
        for (double& v : m.parameters()[i].values()) v = 0.3 * rng.normal();
    }
}

// Sign-agreement mask, written without reference to angles.
inline Tensor sign_mask_oracle(const Tensor& g_cls, const Tensor& g_cfg) {
    Tensor out(g_cls.shape());
    for (std::size_t i = 0; i < g_cls.size(); ++i) {
        const bool agree = (g_cls[i] > 0 && g_cfg[i] > 0) || (g_cls[i] < 0 && g_cfg[i] < 0);
        out[i] = agree ? g_cls[i] : 0.0;
    }
    return out;
}

struct SimPatch {
    std::size_t r0, c0, r1, c1;  // half-open
};

struct SimResult {
    Tensor image;
    std::size_t calls = 0;
};

// Reference implementation of the refinement loop, kept deliberately naive:
// it splits with its own arithmetic and rebuilds the candidate image pixel by pixel.
template <class Model>
SimResult brute_force_refine(const Tensor& x_cf, const Tensor& x_f, const Model& model, std::size_t target,
                             double delta, std::size_t min_patch) {
    const std::size_t h = x_cf.dim(1), w = x_cf.dim(2);
    auto quarters = [](const SimPatch& p) {
        const std::size_t rm = p.r0 + (p.r1 - p.r0 + 1) / 2;
        const std::size_t cm = p.c0 + (p.c1 - p.c0 + 1) / 2;
        return std::vector<SimPatch>{{p.r0, p.c0, rm, cm}, {p.r0, cm, rm, p.c1}, {rm, p.c0, p.r1, cm}, {rm, cm, p.r1, p.c1}};
    };
    SimResult res;
    const auto p0 = model(x_cf);
    ++res.calls;
    const double p_cf = p0[target];
    res.image = x_cf;
    std::list<SimPatch> queue;
    for (const auto& q : quarters({0, 0, h, w})) queue.push_back(q);
    while (!queue.empty()) {
        const SimPatch p = queue.front();
        queue.pop_front();
        Tensor candidate(x_cf.shape());
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const bool inside = y >= p.r0 && y < p.r1 && x >= p.c0 && x < p.c1;
                candidate[y * w + x] = inside ? x_f[y * w + x] : res.image[y * w + x];
            }
        const auto probs = model(candidate);
        ++res.calls;
        std::size_t best = 0;
        for (std::size_t k = 1; k < probs.size(); ++k)
            if (probs[k] > probs[best]) best = k;
        if (best == target && std::fabs(p_cf - probs[target]) < delta) {
            res.image = candidate;
        } else if (p.r1 - p.r0 > min_patch && p.c1 - p.c0 > min_patch) {
            for (const auto& q : quarters(p)) queue.push_back(q);
        }
    }
    return res;
}

// Softmax over logits = W x + b for a random sparse W.
struct LinearModel {
    std::vector<Tensor> weights;
    std::vector<double> bias;

    std::vector<double> operator()(const Tensor& x) const {
        std::vector<double> logits;
        for (std::size_t k = 0; k < weights.size(); ++k) logits.push_back(dot(weights[k], x) + bias[k]);
        auto lp = log_softmax(logits);
        for (double& v : lp) v = std::exp(v);
        return lp;
    }
};

inline LinearModel random_model(Rng& rng, std::size_t classes, const Shape& shape, double density, double strength) {
    LinearModel m;
    for (std::size_t k = 0; k < classes; ++k) {
        Tensor w(shape);
        for (double& v : w.values()) v = rng.uniform() < density ? strength * rng.normal() : 0.0;
        m.weights.push_back(std::move(w));
        m.bias.push_back(rng.normal());
    }
    return m;
}

inline Tensor random_image(Rng& rng, const Shape& shape) {
    Tensor t(shape);
    for (double& v : t.values()) v = rng.uniform();
    return t;
}

inline CFRecord fixture_record(bool flipped, double conf, double l1, double l2, double bl1, double bl2) {
    CFRecord r;
    r.flipped = flipped;
    r.confidence = conf;
    r.l1 = l1;
    r.l2 = l2;
    r.base_l1 = bl1;
    r.base_l2 = bl2;
    return r;
}

// Ten records with dyadic fields so every sum is exact.
inline std::vector<CFRecord> ten_record_fixture() {
    return {
        fixture_record(true, 0.75, 10.0, 2.0, 40.0, 4.0),   fixture_record(false, 0.25, 99.0, 9.0, 99.0, 9.0),
        fixture_record(true, 0.875, 12.5, 2.5, 30.0, 3.5),  fixture_record(true, 0.5, 8.0, 1.5, 20.0, 2.5),
        fixture_record(false, 0.125, 77.0, 7.0, 77.0, 7.0), fixture_record(true, 1.0, 4.0, 1.0, 16.0, 2.0),
        fixture_record(true, 0.625, 6.0, 1.25, 12.0, 1.5),  fixture_record(false, 0.375, 55.0, 5.0, 55.0, 5.0),
        fixture_record(true, 0.75, 3.5, 0.75, 14.0, 1.75), fixture_record(true, 0.5, 4.0, 1.0, 8.0, 1.25),
    };
}

// Tr(sqrt(P)) for a 2x2 matrix with positive real eigenvalues: sqrt(tr P + 2 sqrt(det P)).
inline double trace_sqrt_2x2(double a, double b, double c, double d) {
    return std::sqrt(a + d + 2.0 * std::sqrt(a * d - b * c));
}

inline std::vector<Tensor> gaussian_2d(Rng& rng, std::size_t n, double m0, double m1, double s00, double s01, double s11) {
    // Cholesky of [[s00,s01],[s01,s11]]
    const double l00 = std::sqrt(s00), l10 = s01 / l00, l11 = std::sqrt(s11 - l10 * l10);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.normal(), v = rng.normal();
        out.push_back(Tensor::vector({m0 + l00 * u, m1 + l10 * u + l11 * v}));
    }
    return out;
}

}  // namespace docvce::testing
