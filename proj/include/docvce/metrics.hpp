#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "docvce/tensor.hpp"

namespace docvce {

struct GaussianFit {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
};

/// Mean and unbiased covariance of a set of feature vectors. When the set has
/// no more samples than dimensions, 1e-6*I is added to the covariance.
inline GaussianFit fit_gaussian(std::span<const Tensor> features) {
    if (features.size() < 2) throw std::invalid_argument("fit_gaussian: need at least two samples");
    const auto dim = static_cast<Eigen::Index>(features.front().size());
    if (dim == 0) throw std::invalid_argument("fit_gaussian: empty feature vectors");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(features.size()), dim);
    for (std::size_t r = 0; r < features.size(); ++r) {
        if (static_cast<Eigen::Index>(features[r].size()) != dim) {
            throw std::invalid_argument("fit_gaussian: feature vectors differ in length");
        }
        for (Eigen::Index c = 0; c < dim; ++c) x(static_cast<Eigen::Index>(r), c) = features[r][static_cast<std::size_t>(c)];
    }
    GaussianFit fit;
    fit.mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - fit.mean.transpose();
    fit.covariance = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    if (x.rows() <= dim) fit.covariance += 1e-6 * Eigen::MatrixXd::Identity(dim, dim);
    return fit;
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are clamped to 0.
inline Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
    if (solver.info() != Eigen::Success) throw NumericalError("symmetric_sqrt: eigendecomposition failed");
    const Eigen::VectorXd root = solver.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return solver.eigenvectors() * root.asDiagonal() * solver.eigenvectors().transpose();
}

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}). The cross term uses
/// Tr((S_a S_b)^{1/2}) = Tr((R S_b R)^{1/2}) with R = S_a^{1/2}, which keeps every
/// square root symmetric.
inline double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
    if (a.mean.size() != b.mean.size()) throw std::invalid_argument("frechet_distance: dimension mismatch");
    const Eigen::MatrixXd root_a = symmetric_sqrt(a.covariance);
    Eigen::MatrixXd inner = root_a * b.covariance * root_a;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(inner, Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) throw NumericalError("frechet_distance: eigendecomposition failed");
    const double cross = solver.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double value = (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    if (!std::isfinite(value)) throw NumericalError("frechet_distance: non-finite result");
    return value;
}

inline double frechet_feature_distance(std::span<const Tensor> features_a, std::span<const Tensor> features_b) {
    return frechet_distance(fit_gaussian(features_a), fit_gaussian(features_b));
}

}  // namespace docvce
