#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "stk/common.hpp"

namespace stk {

struct TensorImpl;

// One recorded tape entry. Nodes form a DAG through `parents`; backward
// replays them in reverse topological order exactly once.
struct Node {
    const char* op;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    // Reads out.grad, accumulates into parents' grad buffers.
    std::function<void(const TensorImpl& out)> backprop;
};

struct TensorImpl {
    std::vector<int64_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // empty means absent
    std::shared_ptr<Node> node;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    double* grad_buf(); // lazily allocates zeros
};

// Dense row-major f64 tensor with an optional gradient slot. Value-semantics
// handle: copies share the underlying buffer. Tensors are immutable after
// construction except through ops; leaves may be updated in place between
// backward passes (optimizer).
class Tensor {
public:
    Tensor() = default;

    static Tensor create(std::vector<int64_t> shape, std::vector<double> data,
                         bool requires_grad = false);
    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<int64_t> shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // uniform in [lo,hi); deterministic given rng state
    static Tensor rand_uniform(std::vector<int64_t> shape, Rng& rng, double lo = 0.0,
                               double hi = 1.0, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(p_); }
    const std::vector<int64_t>& shape() const { return p_->shape; }
    int64_t dim(int i) const { return p_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(p_->shape.size()); }
    int64_t numel() const { return p_->numel(); }

    const std::vector<double>& data() const { return p_->data; }
    std::vector<double>& mutable_data() { return p_->data; }
    double item() const;
    double at(std::initializer_list<int64_t> idx) const;

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool v);
    bool has_grad() const { return !p_->grad.empty(); }
    const std::vector<double>& grad() const { return p_->grad; }
    // grad, or zeros when the leaf was disconnected from the loss
    std::vector<double> grad_or_zeros() const;
    void zero_grad() { p_->grad.clear(); }

    // Reverse-mode sweep from a scalar. Accumulates into every reachable
    // tensor's grad buffer (leaves included).
    void backward() const;

    // Detached copy of the values as a fresh leaf.
    Tensor detach(bool requires_grad = false) const;

    std::shared_ptr<TensorImpl> impl() const { return p_; }
    static Tensor from_impl(std::shared_ptr<TensorImpl> p) {
        Tensor t;
        t.p_ = std::move(p);
        return t;
    }

    bool same_impl(const Tensor& other) const { return p_ == other.p_; }

private:
    std::shared_ptr<TensorImpl> p_;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);
bool same_shape(const Tensor& a, const Tensor& b);

// Op-author helper: builds the result tensor and, when grad mode is on and
// any parent requires grad, attaches the tape node.
Tensor make_op_result(std::vector<int64_t> shape, std::vector<double> data,
                      std::vector<Tensor> parents, const char* op,
                      std::function<void(const TensorImpl&)> backprop);

// Accumulate `n` values from src into the parent's grad buffer.
void accumulate_grad(const std::shared_ptr<TensorImpl>& parent, const double* src);

// Max over coordinates of |g_auto - g_fd| / max(1e-12, |g_auto| + |g_fd|),
// central differences with step eps on the leaf `x`. `f` must re-run the
// forward pass reading x's current values; NaN anywhere maps to +inf.
double finite_diff_check(const std::function<Tensor()>& f, Tensor x, double eps);

// Convenience overload for a plain tensor-function of one input.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps);

} // namespace stk
