#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// The graph is define-by-run: every traced operation allocates a node that
// remembers its inputs and how to push gradients back to them. backward()
// walks the graph once in reverse topological order. Training runs in
// float; gradient checking instantiates the same code in double.

#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vinter/common.hpp"

namespace vinter {

bool grad_enabled();
void set_grad_enabled(bool on);

// Disables graph construction for the current scope (generation, eval
// passes, numeric probes).
struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

namespace detail {

template <typename Real>
struct TensorNode {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // sized lazily by backward()
    bool requires_grad = false;
    const char* op = "";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // reads this->grad, accumulates into parents
};

}  // namespace detail

template <typename Real>
class Tensor {
    static_assert(std::is_floating_point_v<Real>);

  public:
    using Node = detail::TensorNode<Real>;

    Tensor() = default;
    Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false) {
        if (shape_size(shape) != data.size()) {
            throw DimensionError("tensor: shape " + shape_str(shape) + " needs " +
                                 std::to_string(shape_size(shape)) + " values, got " +
                                 std::to_string(data.size()));
        }
        node_ = std::make_shared<Node>();
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
        node_->op = "leaf";
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<Real> d(shape_size(shape), Real(0));
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }
    static Tensor full(Shape shape, Real value) {
        std::vector<Real> d(shape_size(shape), value);
        return Tensor(std::move(shape), std::move(d));
    }
    static Tensor scalar(Real value) { return Tensor(Shape{}, {value}); }
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
        std::vector<Real> d(shape_size(shape));
        for (auto& v : d) v = static_cast<Real>(rng.normal() * stddev);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return check()->shape; }
    std::size_t rank() const { return check()->shape.size(); }
    std::size_t size() const { return check()->data.size(); }
    std::size_t dim(std::size_t i) const {
        const Shape& s = shape();
        if (i >= s.size()) throw IndexError("tensor: axis " + std::to_string(i) + " out of range for " + shape_str(s));
        return s[i];
    }

    const std::vector<Real>& data() const { return check()->data; }
    std::vector<Real>& data() { return check()->data; }

    Real item() const {
        if (size() != 1) throw ContractError("tensor: item() requires a scalar, got " + shape_str(shape()));
        return data()[0];
    }
    Real at(std::initializer_list<std::size_t> idx) const {
        const Shape& s = shape();
        if (idx.size() != s.size()) throw IndexError("tensor: index rank mismatch for " + shape_str(s));
        std::size_t flat = 0, i = 0;
        for (std::size_t v : idx) {
            if (v >= s[i]) throw IndexError("tensor: index out of range for " + shape_str(s));
            flat = flat * s[i] + v;
            ++i;
        }
        return data()[flat];
    }

    bool requires_grad() const { return check()->requires_grad; }
    void set_requires_grad(bool on) { check()->requires_grad = on; }
    bool has_grad() const { return defined() && node_->grad.size() == node_->data.size(); }
    const std::vector<Real>& grad() const {
        if (!has_grad()) throw ContractError("tensor: no gradient present (run backward first)");
        return node_->grad;
    }
    void zero_grad() { check()->grad.assign(node_->data.size(), Real(0)); }

    // Copy of the values with no graph attachment.
    Tensor detached() const { return Tensor(shape(), data()); }

    std::shared_ptr<Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<Node> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

  private:
    const std::shared_ptr<Node>& check() const {
        if (!node_) throw ContractError("tensor: use of a default-constructed tensor");
        return node_;
    }
    std::shared_ptr<Node> node_;
};

template <typename Real>
using GradMap = std::map<std::string, Tensor<Real>>;

namespace detail {

// Builds a traced op node. Tracking happens only if grads are enabled and
// some input requires them; otherwise the result is a plain tensor.
template <typename Real>
Tensor<Real> make_op(const char* op, Shape shape, std::vector<Real> data,
                     std::vector<Tensor<Real>> inputs,
                     std::function<void(TensorNode<Real>&)> backprop) {
    Tensor<Real> out(std::move(shape), std::move(data));
    bool track = grad_enabled();
    if (track) {
        bool any = false;
        for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
        track = any;
    }
    if (track) {
        auto node = out.node();
        node->requires_grad = true;
        node->op = op;
        for (const auto& in : inputs) {
            if (in.defined() && in.requires_grad()) node->parents.push_back(in.node());
        }
        node->backprop = std::move(backprop);
    }
    return out;
}

// Accumulates src into dst (same length).
template <typename Real>
inline void axpy(std::vector<Real>& dst, const std::vector<Real>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real factor);
template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x);

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis);
template <typename Real>
Tensor<Real> log_softmax(const Tensor<Real>& x, std::size_t axis);

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape new_shape);
template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& x, std::size_t axis_a, std::size_t axis_b);
template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& xs, std::size_t axis);
template <typename Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t axis, std::size_t start, std::size_t end);

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x);
template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x);

template <typename Real>
Tensor<Real> embedding_lookup(const Tensor<Real>& table, const std::vector<int>& ids);
// out[i] = x[i, ids[i]] for a [rows, cols] tensor.
template <typename Real>
Tensor<Real> pick(const Tensor<Real>& x, const std::vector<int>& ids);

// Per-row (last axis) normalization followed by an affine transform.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = Real(1e-5));

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node
// reachable from `loss`. Gradients of all touched nodes are reset first, so
// repeated calls on the same graph give bit-identical results.
template <typename Real>
void backward(const Tensor<Real>& loss);

// As above, then returns detached gradient tensors for the named parameters.
// Parameters that do not appear in the graph get zero gradients.
template <typename Real>
GradMap<Real> backward(const Tensor<Real>& loss, const std::map<std::string, Tensor<Real>>& params);

struct FiniteDiffReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

// Central-difference check of analytic gradients. `f` must rebuild the loss
// graph from the live parameter tensors on every call and be deterministic.
FiniteDiffReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                   const std::map<std::string, Tensor<double>>& params,
                                   double eps = 1e-5);

}  // namespace vinter

#include "vinter/tensor_impl.hpp"
