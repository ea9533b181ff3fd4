#include "stk/tensor.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace stk {

double* TensorImpl::grad_buf() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
}

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

namespace {

void check_shape_valid(const std::vector<int64_t>& shape) {
    for (int64_t d : shape)
        require(d > 0, Err::ShapeMismatch, "dimensions must be positive, got " + shape_str(shape));
}

void check_finite(const std::vector<double>& data) {
    for (double v : data)
        require(std::isfinite(v), Err::NonFiniteInput, "tensor holds NaN or Inf");
}

} // namespace

Tensor Tensor::create(std::vector<int64_t> shape, std::vector<double> data, bool requires_grad) {
    check_shape_valid(shape);
    require(shape_numel(shape) == static_cast<int64_t>(data.size()), Err::ShapeMismatch,
            "shape " + shape_str(shape) + " expects " + std::to_string(shape_numel(shape)) +
                " values, got " + std::to_string(data.size()));
    check_finite(data);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return from_impl(std::move(impl));
}

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, bool requires_grad) {
    check_shape_valid(shape);
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)), value);
    return create(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return create({1}, {value}, requires_grad);
}

Tensor Tensor::rand_uniform(std::vector<int64_t> shape, Rng& rng, double lo, double hi,
                            bool requires_grad) {
    check_shape_valid(shape);
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (double& v : data) v = rng.uniform(lo, hi);
    return create(std::move(shape), std::move(data), requires_grad);
}

double Tensor::item() const {
    require(numel() == 1, Err::NotScalar, "item() on shape " + shape_str(shape()));
    return p_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    require(static_cast<int>(idx.size()) == rank(), Err::ShapeMismatch, "index rank mismatch");
    int64_t flat = 0;
    int i = 0;
    for (int64_t v : idx) {
        flat = flat * p_->shape[static_cast<size_t>(i)] + v;
        ++i;
    }
    return p_->data[static_cast<size_t>(flat)];
}

void Tensor::set_requires_grad(bool v) {
    require(!p_->node, Err::InvalidConfig, "requires_grad may only be toggled on leaves");
    p_->requires_grad = v;
}

std::vector<double> Tensor::grad_or_zeros() const {
    if (!p_->grad.empty()) return p_->grad;
    return std::vector<double>(p_->data.size(), 0.0);
}

Tensor Tensor::detach(bool requires_grad) const {
    return create(p_->shape, p_->data, requires_grad);
}

void Tensor::backward() const {
    require(numel() == 1, Err::NotScalar,
            "backward requires a scalar loss, got shape " + shape_str(shape()));

    // Post-order DFS over tape nodes, iterative to keep deep graphs safe.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    struct Frame {
        TensorImpl* impl;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    if (p_->node) {
        stack.push_back({p_.get(), 0});
        seen.insert(p_.get());
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        auto& parents = f.impl->node->parents;
        if (f.next_parent < parents.size()) {
            TensorImpl* parent = parents[f.next_parent++].get();
            if (parent->node && !seen.count(parent)) {
                seen.insert(parent);
                stack.push_back({parent, 0});
            }
        } else {
            order.push_back(f.impl);
            stack.pop_back();
        }
    }

    p_->grad_buf()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* impl = *it;
        impl->node->backprop(*impl);
    }
}

Tensor make_op_result(std::vector<int64_t> shape, std::vector<double> data,
                      std::vector<Tensor> parents, const char* op,
                      std::function<void(const TensorImpl&)> backprop) {
    if (debug_checks()) check_finite(data);
    auto impl = std::make_shared<TensorImpl>();
    require(shape_numel(shape) == static_cast<int64_t>(data.size()), Err::ShapeMismatch,
            std::string(op) + ": internal result shape mismatch");
    impl->shape = std::move(shape);
    impl->data = std::move(data);

    bool needs = false;
    if (grad_enabled())
        for (const Tensor& t : parents)
            if (t.requires_grad()) needs = true;

    if (needs) {
        impl->requires_grad = true;
        auto node = std::make_shared<Node>();
        node->op = op;
        node->parents.reserve(parents.size());
        for (const Tensor& t : parents) node->parents.push_back(t.impl());
        node->backprop = std::move(backprop);
        impl->node = std::move(node);
    }
    return Tensor::from_impl(std::move(impl));
}

void accumulate_grad(const std::shared_ptr<TensorImpl>& parent, const double* src) {
    double* g = parent->grad_buf();
    size_t n = parent->data.size();
    for (size_t i = 0; i < n; ++i) g[i] += src[i];
}

double finite_diff_check(const std::function<Tensor()>& f, Tensor x, double eps) {
    require(eps > 0, Err::InvalidConfig, "finite_diff_check: eps must be positive");

    x.zero_grad();
    Tensor loss = f();
    require(loss.numel() == 1, Err::NotScalar, "finite_diff_check: f must be scalar-valued");
    loss.backward();
    std::vector<double> g_auto = x.grad_or_zeros();

    const double inf = std::numeric_limits<double>::infinity();
    double worst = 0.0;
    std::vector<double>& xd = x.mutable_data();
    NoGradGuard no_grad;
    for (size_t i = 0; i < xd.size(); ++i) {
        const double orig = xd[i];
        xd[i] = orig + eps;
        double fp = f().item();
        xd[i] = orig - eps;
        double fm = f().item();
        xd[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) return inf;
        double g_fd = (fp - fm) / (2.0 * eps);
        double ga = g_auto[i];
        if (!std::isfinite(ga)) return inf;
        double err = std::abs(ga - g_fd) / std::max(1e-12, std::abs(ga) + std::abs(g_fd));
        if (err > worst) worst = err;
    }
    return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps) {
    Tensor leaf = x.detach(true);
    return finite_diff_check([&]() { return f(leaf); }, leaf, eps);
}

} // namespace stk
