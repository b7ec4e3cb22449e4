#pragma once

// Tape-based reverse-mode differentiation over docvce::Tensor.
//
// A Graph records primitive operations in execution order, so the tape is
// already a topological order and backward() is a single reverse sweep.
// Values are recorded eagerly; every primitive checks its output for NaN/Inf.

#include <Eigen/Core>

#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "docvce/tensor.hpp"

namespace docvce {

class Graph;

/// Handle to a recorded node. Cheap to copy; only valid while its Graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class Gradients {
public:
    explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

    /// Gradient for `v`; zero tensor when no path leads from `v` to the output.
    Tensor operator[](Var v) const;

private:
    std::vector<Tensor> grads_;
    friend class Graph;
};

class Graph {
public:
    using Backward = std::function<void(const Tensor& grad_out, std::vector<Tensor>& grads)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Differentiable leaf.
    Var input(Tensor value) { return push(std::move(value), true, true, nullptr); }

    /// Non-differentiable leaf.
    Var constant(Tensor value) { return push(std::move(value), false, false, nullptr); }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    bool is_input(Var v) const { return v.graph == this && v.id < nodes_.size() && nodes_[v.id].is_input; }
    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a single-element output.
    Gradients backward(Var output) const {
        check_owner(output, "backward");
        const Tensor& out = value(output);
        if (out.size() != 1) {
            throw std::invalid_argument("backward: output is not scalar, shape " + shape_string(out.shape()));
        }
        std::vector<Tensor> grads(nodes_.size());
        grads[output.id] = Tensor(out.shape(), 1.0);
        for (std::size_t i = output.id + 1; i-- > 0;) {
            const Node& n = nodes_[i];
            if (grads[i].empty() || !n.backward) continue;
            n.backward(grads[i], grads);
        }
        return Gradients(std::move(grads));
    }

    // Used by primitive implementations.
    Var record(Tensor value, std::vector<Var> parents, Backward backward, const char* name) {
        require_finite(value, name);
        bool needs = false;
        for (Var p : parents) {
            check_owner(p, name);
            needs = needs || nodes_[p.id].requires_grad;
        }
        return push(std::move(value), needs, false, needs ? std::move(backward) : nullptr);
    }

    void check_owner(Var v, const char* what) const {
        if (v.graph != this || v.id >= nodes_.size()) {
            throw std::invalid_argument(std::string(what) + ": variable does not belong to this graph");
        }
    }

private:
    struct Node {
        Tensor value;
        bool requires_grad;
        bool is_input;
        Backward backward;
    };

    Var push(Tensor value, bool requires_grad, bool is_input, Backward backward) {
        nodes_.push_back(Node{std::move(value), requires_grad, is_input, std::move(backward)});
        return Var{this, nodes_.size() - 1};
    }

    std::deque<Node> nodes_;  // stable references across push_back
};

inline const Tensor& Var::value() const {
    if (!graph) throw std::logic_error("Var: unbound variable");
    return graph->value(*this);
}

inline Tensor Gradients::operator[](Var v) const {
    if (v.id >= grads_.size()) throw std::invalid_argument("gradients: variable not part of the swept graph");
    if (grads_[v.id].empty()) return Tensor(v.value().shape());
    return grads_[v.id];
}

/// d(scalar_output)/d(wrt) where `wrt` must be a differentiable input of the graph.
inline Tensor grad(const Graph& graph, Var scalar_output, Var wrt) {
    if (!graph.is_input(wrt)) throw std::invalid_argument("grad: wrt is not a differentiable input of the graph");
    return graph.backward(scalar_output)[wrt];
}

namespace detail {

inline void accumulate(std::vector<Tensor>& grads, std::size_t id, const Tensor& g) {
    Tensor& slot = grads[id];
    if (slot.empty()) {
        slot = g;
        return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
    return ConstMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline MutMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
    return MutMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline Graph& graph_of(Var a, Var b, const char* what) {
    if (a.graph == nullptr || a.graph != b.graph) {
        throw std::invalid_argument(std::string(what) + ": operands belong to different graphs");
    }
    return *a.graph;
}

template <class Fn, class Df>
Var unary_elementwise(Var a, Fn fn, Df dfn, const char* name) {
    Graph& g = *a.graph;
    const Tensor& x = a.value();
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = fn(x[i]);
    const std::size_t ia = a.id;
    return g.record(std::move(y), {a},
                    [&g, ia, dfn](const Tensor& go, std::vector<Tensor>& grads) {
                        const Tensor& x = g.value(Var{&g, ia});
                        Tensor gx(x.shape());
                        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = go[i] * dfn(x[i]);
                        accumulate(grads, ia, gx);
                    },
                    name);
}

}  // namespace detail

// --- primitives -------------------------------------------------------------

inline Var add(Var a, Var b) {
    Graph& g = detail::graph_of(a, b, "add");
    require_same_shape(a.value(), b.value(), "add");
    const std::size_t ia = a.id, ib = b.id;
    return g.record(a.value() + b.value(), {a, b},
                    [ia, ib](const Tensor& go, std::vector<Tensor>& grads) {
                        detail::accumulate(grads, ia, go);
                        detail::accumulate(grads, ib, go);
                    },
                    "add");
}

inline Var sub(Var a, Var b) {
    Graph& g = detail::graph_of(a, b, "sub");
    require_same_shape(a.value(), b.value(), "sub");
    const std::size_t ia = a.id, ib = b.id;
    return g.record(a.value() - b.value(), {a, b},
                    [ia, ib](const Tensor& go, std::vector<Tensor>& grads) {
                        detail::accumulate(grads, ia, go);
                        detail::accumulate(grads, ib, scaled(go, -1.0));
                    },
                    "sub");
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    Graph& g = detail::graph_of(a, b, "mul");
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    require_same_shape(x, y, "mul");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    const std::size_t ia = a.id, ib = b.id;
    return g.record(std::move(out), {a, b},
                    [&g, ia, ib](const Tensor& go, std::vector<Tensor>& grads) {
                        const Tensor& x = g.value(Var{&g, ia});
                        const Tensor& y = g.value(Var{&g, ib});
                        Tensor gx(x.shape()), gy(y.shape());
                        for (std::size_t i = 0; i < x.size(); ++i) {
                            gx[i] = go[i] * y[i];
                            gy[i] = go[i] * x[i];
                        }
                        detail::accumulate(grads, ia, gx);
                        detail::accumulate(grads, ib, gy);
                    },
                    "mul");
}

inline Var scale(Var a, double s) {
    Graph& g = *a.graph;
    const std::size_t ia = a.id;
    return g.record(scaled(a.value(), s), {a},
                    [ia, s](const Tensor& go, std::vector<Tensor>& grads) {
                        detail::accumulate(grads, ia, scaled(go, s));
                    },
                    "scale");
}

inline Var reshape(Var a, Shape shape) {
    Graph& g = *a.graph;
    const std::size_t ia = a.id;
    Shape original = a.value().shape();
    return g.record(a.value().reshaped(std::move(shape)), {a},
                    [ia, original](const Tensor& go, std::vector<Tensor>& grads) {
                        detail::accumulate(grads, ia, go.reshaped(original));
                    },
                    "reshape");
}

/// [m,k] x [k,n] -> [m,n].
inline Var matmul(Var a, Var b) {
    Graph& g = detail::graph_of(a, b, "matmul");
    const Tensor& x = a.value();
    const Tensor& w = b.value();
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_string(x.shape()) + " x " +
                                    shape_string(w.shape()));
    }
    const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
    Tensor out(Shape{m, n});
    detail::as_matrix(out, m, n).noalias() = detail::as_matrix(x, m, k) * detail::as_matrix(w, k, n);
    const std::size_t ia = a.id, ib = b.id;
    return g.record(std::move(out), {a, b},
                    [&g, ia, ib, m, k, n](const Tensor& go, std::vector<Tensor>& grads) {
                        const bool need_a = g.requires_grad(Var{&g, ia});
                        const bool need_b = g.requires_grad(Var{&g, ib});
                        const auto gom = detail::as_matrix(go, m, n);
                        if (need_a) {
                            Tensor gx(Shape{m, k});
                            detail::as_matrix(gx, m, k).noalias() =
                                gom * detail::as_matrix(g.value(Var{&g, ib}), k, n).transpose();
                            detail::accumulate(grads, ia, gx);
                        }
                        if (need_b) {
                            Tensor gw(Shape{k, n});
                            detail::as_matrix(gw, k, n).noalias() =
                                detail::as_matrix(g.value(Var{&g, ia}), m, k).transpose() * gom;
                            detail::accumulate(grads, ib, gw);
                        }
                    },
                    "matmul");
}

/// Adds a bias row [n] to every row of [m,n].
inline Var add_bias(Var a, Var bias) {
    Graph& g = detail::graph_of(a, bias, "add_bias");
    const Tensor& x = a.value();
    const Tensor& b = bias.value();
    if (x.rank() != 2 || b.size() != x.dim(1)) {
        throw std::invalid_argument("add_bias: bias " + shape_string(b.shape()) + " does not fit " +
                                    shape_string(x.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out = x;
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] += b[c];
    const std::size_t ia = a.id, ib = bias.id;
    Shape bshape = b.shape();
    return g.record(std::move(out), {a, bias},
                    [ia, ib, m, n, bshape](const Tensor& go, std::vector<Tensor>& grads) {
                        detail::accumulate(grads, ia, go);
                        Tensor gb(bshape);
                        for (std::size_t r = 0; r < m; ++r)
                            for (std::size_t c = 0; c < n; ++c) gb[c] += go[r * n + c];
                        detail::accumulate(grads, ib, gb);
                    },
                    "add_bias");
}

/// x·W + b with x [m,k], W [k,n], b [n].
inline Var affine(Var x, Var weight, Var bias) { return add_bias(matmul(x, weight), bias); }

/// Multiplies row r of x [m,n] by s[r], s of shape [m] or [m,1].
inline Var scale_rows(Var a, Var s) {
    Graph& g = detail::graph_of(a, s, "scale_rows");
    const Tensor& x = a.value();
    const Tensor& f = s.value();
    if (x.rank() != 2 || f.size() != x.dim(0)) {
        throw std::invalid_argument("scale_rows: factors " + shape_string(f.shape()) + " do not fit " +
                                    shape_string(x.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out(x.shape());
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = f[r] * x[r * n + c];
    const std::size_t ia = a.id, is = s.id;
    return g.record(std::move(out), {a, s},
                    [&g, ia, is, m, n](const Tensor& go, std::vector<Tensor>& grads) {
                        const Tensor& x = g.value(Var{&g, ia});
                        const Tensor& f = g.value(Var{&g, is});
                        Tensor gx(x.shape()), gf(f.shape());
                        for (std::size_t r = 0; r < m; ++r) {
                            for (std::size_t c = 0; c < n; ++c) {
                                gx[r * n + c] = go[r * n + c] * f[r];
                                gf[r] += go[r * n + c] * x[r * n + c];
                            }
                        }
                        detail::accumulate(grads, ia, gx);
                        detail::accumulate(grads, is, gf);
                    },
                    "scale_rows");
}

/// x·sigmoid(x).
inline Var silu(Var a) {
    return detail::unary_elementwise(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        },
        "silu");
}

inline Var tanh(Var a) {
    return detail::unary_elementwise(
        a, [](double x) { return std::tanh(x); },
        [](double x) {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        },
        "tanh");
}

inline Var sum(Var a) {
    Graph& g = *a.graph;
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    const std::size_t ia = a.id;
    Shape shape = a.value().shape();
    return g.record(Tensor::scalar(s), {a},
                    [ia, shape](const Tensor& go, std::vector<Tensor>& grads) {
                        detail::accumulate(grads, ia, Tensor(shape, go[0]));
                    },
                    "sum");
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Row-wise log-softmax over the last dimension of a [K] or [m,K] tensor.
inline Var log_softmax(Var a) {
    Graph& g = *a.graph;
    const Tensor& x = a.value();
    if (x.empty() || x.rank() == 0 || x.shape().back() == 0) {
        throw std::invalid_argument("log_softmax: empty class dimension");
    }
    const std::size_t k = x.shape().back();
    const std::size_t rows = x.size() / k;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const auto row = log_softmax(x.values().subspan(r * k, k));
        std::copy(row.begin(), row.end(), out.data() + r * k);
    }
    const std::size_t ia = a.id;
    const std::size_t io = g.size();  // id this node will receive
    // d logsoftmax_i / dx_j = delta_ij - softmax_j
    return g.record(std::move(out), {a},
                    [&g, ia, io, rows, k](const Tensor& go, std::vector<Tensor>& grads) {
                        const Tensor& y = g.value(Var{&g, io});
                        Tensor gx(y.shape());
                        for (std::size_t r = 0; r < rows; ++r) {
                            double total = 0.0;
                            for (std::size_t c = 0; c < k; ++c) total += go[r * k + c];
                            for (std::size_t c = 0; c < k; ++c) {
                                gx[r * k + c] = go[r * k + c] - std::exp(y[r * k + c]) * total;
                            }
                        }
                        detail::accumulate(grads, ia, gx);
                    },
                    "log_softmax");
}

/// Selects column idx[r] from each row of [m,K], giving [m].
inline Var pick(Var a, std::vector<std::size_t> idx) {
    Graph& g = *a.graph;
    const Tensor& x = a.value();
    const std::size_t k = x.shape().back();
    const std::size_t rows = x.size() / k;
    if (idx.size() != rows) throw std::invalid_argument("pick: one index per row required");
    Tensor out(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        if (idx[r] >= k) throw std::invalid_argument("pick: index out of range");
        out[r] = x[r * k + idx[r]];
    }
    const std::size_t ia = a.id;
    Shape shape = x.shape();
    return g.record(std::move(out), {a},
                    [ia, shape, idx = std::move(idx), k](const Tensor& go, std::vector<Tensor>& grads) {
                        Tensor gx(shape);
                        for (std::size_t r = 0; r < idx.size(); ++r) gx[r * k + idx[r]] = go[r];
                        detail::accumulate(grads, ia, gx);
                    },
                    "pick");
}

/// ||a - b||^2 as a scalar.
inline Var squared_l2(Var a, Var b) {
    Graph& g = detail::graph_of(a, b, "squared_l2");
    require_same_shape(a.value(), b.value(), "squared_l2");
    const Tensor diff = a.value() - b.value();
    const std::size_t ia = a.id, ib = b.id;
    return g.record(Tensor::scalar(dot(diff, diff)), {a, b},
                    [diff, ia, ib](const Tensor& go, std::vector<Tensor>& grads) {
                        detail::accumulate(grads, ia, scaled(diff, 2.0 * go[0]));
                        detail::accumulate(grads, ib, scaled(diff, -2.0 * go[0]));
                    },
                    "squared_l2");
}

/// Row lookup: table [V,H], ids -> [len(ids),H]. Unused rows get exactly zero gradient.
inline Var embedding(Var table, std::vector<std::size_t> ids) {
    Graph& g = *table.graph;
    const Tensor& t = table.value();
    if (t.rank() != 2) throw std::invalid_argument("embedding: table must be rank 2");
    const std::size_t v = t.dim(0), h = t.dim(1);
    Tensor out(Shape{ids.size(), h});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= v) throw std::invalid_argument("embedding: id out of range");
        std::copy_n(t.data() + ids[r] * h, h, out.data() + r * h);
    }
    const std::size_t it = table.id;
    Shape shape = t.shape();
    return g.record(std::move(out), {table},
                    [it, shape, h, ids = std::move(ids)](const Tensor& go, std::vector<Tensor>& grads) {
                        Tensor gt(shape);
                        for (std::size_t r = 0; r < ids.size(); ++r)
                            for (std::size_t c = 0; c < h; ++c) gt[ids[r] * h + c] += go[r * h + c];
                        detail::accumulate(grads, it, gt);
                    },
                    "embedding");
}

/// Applies a fixed linear operator. `adjoint` must be the transpose of `forward`.
inline Var linear_map(Var a, std::function<Tensor(const Tensor&)> forward,
                      std::function<Tensor(const Tensor&)> adjoint) {
    Graph& g = *a.graph;
    const std::size_t ia = a.id;
    return g.record(forward(a.value()), {a},
                    [ia, adjoint = std::move(adjoint)](const Tensor& go, std::vector<Tensor>& grads) {
                        detail::accumulate(grads, ia, adjoint(go));
                    },
                    "linear_map");
}

// --- finite differences -----------------------------------------------------

/// max_i |analytic_i - central_i| / (|analytic_i| + 1e-12), central differences with step `epsilon`.
inline double finite_diff_check(const std::function<double(const Tensor&)>& fn, const Tensor& point,
                                const Tensor& analytic, double epsilon) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("finite_diff_check: epsilon must be positive");
    require_same_shape(point, analytic, "finite_diff_check");
    double worst = 0.0;
    Tensor probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        probe[i] = point[i] + epsilon;
        const double up = fn(probe);
        probe[i] = point[i] - epsilon;
        const double down = fn(probe);
        probe[i] = point[i];
        const double numeric = (up - down) / (2.0 * epsilon);
        worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-12));
    }
    return worst;
}

/// Builds `build(graph, x)` once for the analytic gradient and again per probe.
inline double finite_diff_check(const std::function<Var(Graph&, Var)>& build, const Tensor& point,
                                double epsilon) {
    auto evaluate = [&](const Tensor& x) {
        Graph g;
        Var out = build(g, g.input(x));
        if (out.value().size() != 1) throw std::invalid_argument("finite_diff_check: function output is not scalar");
        return out.value()[0];
    };
    Graph g;
    Var x = g.input(point);
    Var out = build(g, x);
    if (out.value().size() != 1) throw std::invalid_argument("finite_diff_check: function output is not scalar");
    return finite_diff_check(evaluate, point, grad(g, out, x), epsilon);
}

}  // namespace docvce
