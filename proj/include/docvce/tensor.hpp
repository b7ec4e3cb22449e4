#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace docvce {

using Shape = std::vector<std::size_t>;

/// Raised when an operation produces NaN or Inf. Nothing downstream is allowed
/// to see a non-finite value.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array of doubles.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size()) {
            throw std::invalid_argument("tensor: shape " + shape_string(shape_) + " does not match " +
                                        std::to_string(data_.size()) + " values");
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    static Tensor vector(std::initializer_list<double> values) {
        return Tensor(Shape{values.size()}, std::vector<double>(values));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    std::span<const double> values() const& { return data_; }
    std::span<double> values() & { return data_; }
    // a span into a temporary would dangle
    std::span<const double> values() const&& = delete;
    std::span<double> values() && = delete;
    const double* data() const { return data_.data(); }
    double* data() { return data_.data(); }
    const std::vector<double>& storage() const& { return data_; }
    std::vector<double> storage() && { return std::move(data_); }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    double item() const {
        if (data_.size() != 1) {
            throw std::invalid_argument("tensor: item() on tensor of shape " + shape_string(shape_));
        }
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size()) {
            throw std::invalid_argument("tensor: cannot reshape " + shape_string(shape_) + " to " +
                                        shape_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
    }
}

inline void require_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) {
        throw NumericalError(std::string(what) + ": non-finite value produced");
    }
}

// Elementwise helpers on plain tensors. These are the non-differentiable
// counterparts of the graph primitives and are used by the closed-form
// diffusion algebra.

inline Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
    require_same_shape(x, y, "axpby");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
    return out;
}

inline Tensor scaled(const Tensor& x, double a) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i];
    return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return axpby(1.0, a, 1.0, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return axpby(1.0, a, -1.0, b); }

inline double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double l1_distance(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "l1_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s;
}

inline double l2_distance(const Tensor& a, const Tensor& b) { return l2_norm(a - b); }

inline Tensor clamped(const Tensor& x, double lo, double hi) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::min(hi, std::max(lo, x[i]));
    return out;
}

inline std::size_t argmax(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("argmax: empty input");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

/// Numerically stable log-softmax over a 1-D logit vector.
inline std::vector<double> log_softmax(std::span<const double> logits) {
    if (logits.empty()) throw std::invalid_argument("log_softmax: empty class dimension");
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double s = 0.0;
    for (double v : logits) s += std::exp(v - m);
    const double lse = m + std::log(s);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

}  // namespace docvce
