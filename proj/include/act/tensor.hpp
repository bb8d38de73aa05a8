#pragma once

// Dense double-precision tensors with define-by-run reverse-mode differentiation.
//
// Every operation that touches a requires_grad input records its inputs and a
// backward rule on the result node. backward() walks the recorded graph in
// reverse topological order. Leaf gradients accumulate across calls until
// zero_grad(); interior gradients are recomputed on every call.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "act/error.hpp"

namespace act {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty means "no gradient yet"
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents
    const char* op = "leaf";

    bool has_grad() const { return !grad.empty(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        for (auto e : shape) detail::require(e > 0, "tensor extents must be positive, got " + shape_str(shape));
        detail::require(numel_of(shape) == data.size(),
                        "shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = numel_of(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) { return from({}, {value}, requires_grad); }

    static Tensor vector(std::initializer_list<double> values, bool requires_grad = false) {
        return from({values.size()}, std::vector<double>(values), requires_grad);
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data, bool requires_grad = false) {
        return from({rows, cols}, std::move(data), requires_grad);
    }

    explicit operator bool() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node().shape; }
    std::size_t rank() const { return node().shape.size(); }
    std::size_t numel() const { return node().data.size(); }
    std::size_t rows() const {
        detail::require(rank() == 2, "rows() needs a rank-2 tensor, got " + shape_str(shape()));
        return shape()[0];
    }
    std::size_t cols() const {
        detail::require(rank() == 2, "cols() needs a rank-2 tensor, got " + shape_str(shape()));
        return shape()[1];
    }

    std::span<const double> data() const { return node().data; }
    /// Direct write access, for optimizers and initializers. Bypasses the graph.
    std::span<double> mutable_data() { return node().data; }

    double item() const {
        detail::require(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
        return node().data[0];
    }
    double operator[](std::size_t i) const { return node().data.at(i); }
    double at(std::size_t r, std::size_t c) const { return node().data.at(r * cols() + c); }

    bool requires_grad() const { return node().requires_grad; }
    bool is_leaf() const { return !node().backward; }
    bool has_grad() const { return node().has_grad(); }
    std::span<const double> grad() const { return node().grad; }

    /// Clears an existing gradient to zeros. A tensor that never received one is left untouched.
    void zero_grad() {
        auto& g = node().grad;
        std::fill(g.begin(), g.end(), 0.0);
    }

    /// Value copy cut off from the graph.
    Tensor detach() const { return from(shape(), node().data, false); }

    /// Deep copy of a leaf keeping its requires_grad flag but not its gradient.
    Tensor clone() const { return from(shape(), node().data, requires_grad()); }

    const void* id() const { return node_.get(); }

    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
    detail::Node& node() const {
        detail::require(static_cast<bool>(node_), "use of an empty tensor");
        return *node_;
    }

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

/// The recorded operations reachable from a root, in topological order
/// (every node after the nodes that produced its inputs).
struct Tape {
    std::vector<std::shared_ptr<detail::Node>> order;
};

inline Tape record_tape(const Tensor& root) {
    Tape tape;
    std::unordered_set<const detail::Node*> visited;
    // Iterative post-order DFS; graphs from long unrolled losses can be deep.
    std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
    stack.emplace_back(root.node_ptr(), 0);
    visited.insert(root.node_ptr().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            auto parent = node->parents[next++];
            if (parent->requires_grad && visited.insert(parent.get()).second) stack.emplace_back(parent, 0);
        } else {
            tape.order.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

inline void backward(const Tensor& loss) {
    detail::require(static_cast<bool>(loss), "backward() on an empty tensor");
    detail::require(loss.numel() == 1, "backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    detail::require(loss.requires_grad(), "backward() on a loss that is not connected to any requires_grad tensor");
    const Tape tape = record_tape(loss);
    for (const auto& n : tape.order) {
        if (n->backward) n->grad.assign(n->data.size(), 0.0);
    }
    auto& root = loss.node();
    root.ensure_grad();
    root.grad[0] += 1.0;
    for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

inline void zero_grad(std::span<Tensor> params) {
    for (auto& p : params) p.zero_grad();
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

/// Builds a result node. The backward rule is only attached when some input needs gradients.
inline Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                          const char* op, std::function<void(Node&)> rule) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    if (any_requires_grad(inputs)) {
        node->requires_grad = true;
        for (const Tensor* t : inputs) node->parents.push_back(t->node_ptr());
        node->backward = std::move(rule);
    }
    return Tensor(std::move(node));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank2(const Tensor& a, const char* op) {
    require(a.rank() == 2, std::string(op) + ": expected rank-2 tensor, got " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, "add", [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, "sub", [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, "mul", [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
        }
    });
}

inline Tensor scalar_mul(const Tensor& x, double s) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x.data()[i];
    return detail::make_result(x.shape(), std::move(out), {&x}, "scalar_mul", [s](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += s * self.grad[i];
    });
}

inline Tensor add_scalar(const Tensor& x, double s) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + s;
    return detail::make_result(x.shape(), std::move(out), {&x}, "add_scalar", [](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& x) { return scalar_mul(x, s); }
inline Tensor operator*(const Tensor& x, double s) { return scalar_mul(x, s); }
inline Tensor operator+(const Tensor& x, double s) { return add_scalar(x, s); }
inline Tensor operator-(const Tensor& x) { return scalar_mul(x, -1.0); }

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    detail::require(b.rows() == k,
                    "matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const auto A = a.data();
    const auto B = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * B[p * n + j];
        }
    return detail::make_result({m, n}, std::move(out), {&a, &b}, "matmul", [m, k, n](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& G = self.grad;
        if (pa.requires_grad) {  // dA = dC * B^T
            pa.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * pb.data[p * n + j];
                    pa.grad[i * k + p] += acc;
                }
        }
        if (pb.requires_grad) {  // dB = A^T * dC
            pb.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = pa.data[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) pb.grad[p * n + j] += aip * G[i * n + j];
                }
        }
    });
}

/// x[n x m] + bias[m] added to every row. The only broadcast the library offers.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank2(x, "add_row_bias");
    const std::size_t n = x.rows(), m = x.cols();
    detail::require(bias.numel() == m && bias.rank() == 1,
                    "add_row_bias: bias " + shape_str(bias.shape()) + " does not match row width " + std::to_string(m));
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bias.data()[j];
    return detail::make_result(x.shape(), std::move(out), {&x, &bias}, "add_row_bias", [n, m](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pb = *self.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) pb.grad[j] += self.grad[i * m + j];
        }
    });
}

/// Stacks two matrices with equal column counts vertically.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "concat_rows");
    detail::require_rank2(b, "concat_rows");
    detail::require(a.cols() == b.cols(), "concat_rows: column mismatch " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
    std::vector<double> out(a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const std::size_t split = a.numel();
    return detail::make_result({a.rows() + b.rows(), a.cols()}, std::move(out), {&a, &b}, "concat_rows",
                               [split](detail::Node& self) {
                                   auto& pa = *self.parents[0];
                                   auto& pb = *self.parents[1];
                                   if (pa.requires_grad) {
                                       pa.ensure_grad();
                                       for (std::size_t i = 0; i < split; ++i) pa.grad[i] += self.grad[i];
                                   }
                                   if (pb.requires_grad) {
                                       pb.ensure_grad();
                                       for (std::size_t i = split; i < self.grad.size(); ++i)
                                           pb.grad[i - split] += self.grad[i];
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    return detail::make_result(x.shape(), std::move(out), {&x}, "relu", [](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (p.data[i] > 0.0) p.grad[i] += self.grad[i];
    });
}

inline Tensor exp(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.data()[i]);
    return detail::make_result(x.shape(), std::move(out), {&x}, "exp", [](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * self.data[i];
    });
}

/// ln(x + eps) elementwise. Every x + eps must be strictly positive.
inline Tensor log_shifted(const Tensor& x, double eps) {
    if (!(eps >= 0.0)) throw DomainError("log_shifted: eps must be nonnegative", 0);
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double arg = x.data()[i] + eps;
        if (!(arg > 0.0)) {
            std::ostringstream os;
            os << "log_shifted: argument x[" << i << "] + eps = " << arg << " is not positive";
            throw DomainError(os.str(), i);
        }
        out[i] = std::log(arg);
    }
    return detail::make_result(x.shape(), std::move(out), {&x}, "log_shifted", [eps](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] / (p.data[i] + eps);
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return detail::make_result({}, {acc}, {&x}, "sum", [](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (auto& g : p.grad) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.numel());
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return detail::make_result({}, {acc * inv}, {&x}, "mean", [inv](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (auto& g : p.grad) g += self.grad[0] * inv;
    });
}

namespace detail {

inline Tensor reduce_axis(const Tensor& x, std::size_t axis, double scale, const char* op) {
    require(axis < x.rank(), std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                                 shape_str(x.shape()));
    const auto& shape = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t len = shape[axis];
    Shape out_shape;
    for (std::size_t i = 0; i < shape.size(); ++i)
        if (i != axis) out_shape.push_back(shape[i]);
    std::vector<double> out(outer * inner, 0.0);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t a = 0; a < len; ++a)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x.data()[(o * len + a) * inner + i];
    for (auto& v : out) v *= scale;
    return make_result(std::move(out_shape), std::move(out), {&x}, op, [outer, len, inner, scale](Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t a = 0; a < len; ++a)
                for (std::size_t i = 0; i < inner; ++i)
                    p.grad[(o * len + a) * inner + i] += scale * self.grad[o * inner + i];
    });
}

}  // namespace detail

inline Tensor sum(const Tensor& x, std::size_t axis) { return detail::reduce_axis(x, axis, 1.0, "sum"); }

inline Tensor mean(const Tensor& x, std::size_t axis) {
    detail::require(axis < x.rank(), "mean: axis " + std::to_string(axis) + " out of range for shape " +
                                         shape_str(x.shape()));
    return detail::reduce_axis(x, axis, 1.0 / static_cast<double>(x.shape()[axis]), "mean");
}

// ---------------------------------------------------------------------------
// Row-wise softmax family

inline Tensor softmax_rows(const Tensor& logits) {
    detail::require_rank2(logits, "softmax_rows");
    const std::size_t n = logits.rows(), k = logits.cols();
    std::vector<double> out(n * k);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = logits.data().data() + r * k;
        const double hi = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += (out[r * k + j] = std::exp(row[j] - hi));
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] /= z;
    }
    return detail::make_result(logits.shape(), std::move(out), {&logits}, "softmax_rows", [n, k](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < k; ++j) dot += self.grad[r * k + j] * self.data[r * k + j];
            for (std::size_t j = 0; j < k; ++j)
                p.grad[r * k + j] += self.data[r * k + j] * (self.grad[r * k + j] - dot);
        }
    });
}

inline Tensor log_softmax_rows(const Tensor& logits) {
    detail::require_rank2(logits, "log_softmax_rows");
    const std::size_t n = logits.rows(), k = logits.cols();
    std::vector<double> out(n * k);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = logits.data().data() + r * k;
        const double hi = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - hi);
        const double lse = hi + std::log(z);
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = row[j] - lse;
    }
    return detail::make_result(logits.shape(), std::move(out), {&logits}, "log_softmax_rows",
                               [n, k](detail::Node& self) {
                                   auto& p = *self.parents[0];
                                   p.ensure_grad();
                                   for (std::size_t r = 0; r < n; ++r) {
                                       double gsum = 0.0;
                                       for (std::size_t j = 0; j < k; ++j) gsum += self.grad[r * k + j];
                                       for (std::size_t j = 0; j < k; ++j)
                                           p.grad[r * k + j] +=
                                               self.grad[r * k + j] - std::exp(self.data[r * k + j]) * gsum;
                                   }
                               });
}

}  // namespace act
