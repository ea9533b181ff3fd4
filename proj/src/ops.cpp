#include "stk/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace stk {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), Err::ShapeMismatch,
            std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// unary op with elementwise derivative depending on (x, y)
template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Bwd dydx) {
    const auto& xd = x.data();
    std::vector<double> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
    auto xi = x.impl();
    auto out_copy = out; // the closure needs y values for some derivatives
    return make_op_result(x.shape(), std::move(out), {x}, name,
                          [xi, dydx, out_copy = std::move(out_copy)](const TensorImpl& o) {
                              if (!xi->requires_grad) return;
                              double* g = xi->grad_buf();
                              const auto& xd = xi->data;
                              for (size_t i = 0; i < xd.size(); ++i)
                                  g[i] += o.grad[i] * dydx(xd[i], out_copy[i]);
                          });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return make_op_result(a.shape(), std::move(out), {a, b}, "add", [ai, bi](const TensorImpl& o) {
        if (ai->requires_grad) accumulate_grad(ai, o.grad.data());
        if (bi->requires_grad) accumulate_grad(bi, o.grad.data());
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return make_op_result(a.shape(), std::move(out), {a, b}, "sub", [ai, bi](const TensorImpl& o) {
        if (ai->requires_grad) accumulate_grad(ai, o.grad.data());
        if (bi->requires_grad) {
            double* g = bi->grad_buf();
            for (size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return make_op_result(a.shape(), std::move(out), {a, b}, "mul", [ai, bi](const TensorImpl& o) {
        if (ai->requires_grad) {
            double* g = ai->grad_buf();
            for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bi->data[i];
        }
        if (bi->requires_grad) {
            double* g = bi->grad_buf();
            for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * ai->data[i];
        }
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    auto ai = a.impl();
    return make_op_result(a.shape(), std::move(out), {a}, "add_scalar",
                          [ai](const TensorImpl& o) {
                              if (ai->requires_grad) accumulate_grad(ai, o.grad.data());
                          });
}

Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    auto ai = a.impl();
    return make_op_result(a.shape(), std::move(out), {a}, "mul_scalar",
                          [ai, s](const TensorImpl& o) {
                              if (!ai->requires_grad) return;
                              double* g = ai->grad_buf();
                              for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * s;
                          });
}

Tensor relu6(const Tensor& x) {
    // derivative 0 at the kinks x in {0,6}
    return unary_op(
        x, "relu6", [](double v) { return std::min(std::max(v, 0.0), 6.0); },
        [](double v, double) { return (v > 0.0 && v < 6.0) ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    return unary_op(
        x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
        [](double v, double) {
            double phi_cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            double phi_pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            return phi_cdf + v * phi_pdf;
        });
}

Tensor tanh_op(const Tensor& x) {
    return unary_op(
        x, "tanh", [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x, "sigmoid",
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor sum_all(const Tensor& x) {
    // fixed sequential row-major reduction order
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    auto xi = x.impl();
    return make_op_result({1}, {acc}, {x}, "sum_all", [xi](const TensorImpl& o) {
        if (!xi->requires_grad) return;
        double* g = xi->grad_buf();
        double go = o.grad[0];
        for (size_t i = 0; i < xi->data.size(); ++i) g[i] += go;
    });
}

Tensor mean_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    double inv_n = 1.0 / static_cast<double>(x.numel());
    auto xi = x.impl();
    return make_op_result({1}, {acc * inv_n}, {x}, "mean_all", [xi, inv_n](const TensorImpl& o) {
        if (!xi->requires_grad) return;
        double* g = xi->grad_buf();
        double go = o.grad[0] * inv_n;
        for (size_t i = 0; i < xi->data.size(); ++i) g[i] += go;
    });
}

Tensor reshape(const Tensor& x, std::vector<int64_t> shape) {
    require(shape_numel(shape) == x.numel(), Err::ShapeMismatch,
            "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    auto xi = x.impl();
    return make_op_result(std::move(shape), x.data(), {x}, "reshape", [xi](const TensorImpl& o) {
        if (xi->requires_grad) accumulate_grad(xi, o.grad.data());
    });
}

namespace {

std::vector<int64_t> strides_of(const std::vector<int64_t>& shape) {
    std::vector<int64_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        s[static_cast<size_t>(i)] = s[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
    return s;
}

// out[idx] = in[perm(idx)]; returns mapping out_flat -> in_flat
std::vector<int64_t> permute_map(const std::vector<int64_t>& in_shape,
                                 const std::vector<int>& perm) {
    size_t r = in_shape.size();
    std::vector<int64_t> out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
    auto in_strides = strides_of(in_shape);
    auto out_strides = strides_of(out_shape);
    int64_t n = shape_numel(in_shape);
    std::vector<int64_t> map(static_cast<size_t>(n));
    for (int64_t o = 0; o < n; ++o) {
        int64_t rem = o, in_flat = 0;
        for (size_t i = 0; i < r; ++i) {
            int64_t coord = rem / out_strides[i];
            rem %= out_strides[i];
            in_flat += coord * in_strides[static_cast<size_t>(perm[i])];
        }
        map[static_cast<size_t>(o)] = in_flat;
    }
    return map;
}

} // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    require(static_cast<int>(perm.size()) == x.rank(), Err::ShapeMismatch, "permute: rank mismatch");
    std::vector<int64_t> out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i)
        out_shape[i] = x.shape()[static_cast<size_t>(perm[i])];
    auto map = permute_map(x.shape(), perm);
    std::vector<double> out(map.size());
    for (size_t i = 0; i < map.size(); ++i) out[i] = x.data()[static_cast<size_t>(map[i])];
    auto xi = x.impl();
    return make_op_result(std::move(out_shape), std::move(out), {x}, "permute",
                          [xi, map = std::move(map)](const TensorImpl& o) {
                              if (!xi->requires_grad) return;
                              double* g = xi->grad_buf();
                              for (size_t i = 0; i < map.size(); ++i)
                                  g[static_cast<size_t>(map[i])] += o.grad[i];
                          });
}

Tensor concat(const std::vector<Tensor>& parts, int dim) {
    require(!parts.empty(), Err::ShapeMismatch, "concat: no inputs");
    const auto& base = parts[0].shape();
    size_t r = base.size();
    require(dim >= 0 && dim < static_cast<int>(r), Err::ShapeMismatch, "concat: bad dim");
    int64_t outer = 1, inner = 1, total_dim = 0;
    for (int i = 0; i < dim; ++i) outer *= base[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(dim) + 1; i < r; ++i) inner *= base[i];
    for (const Tensor& t : parts) {
        require(t.rank() == static_cast<int>(r), Err::ShapeMismatch, "concat: rank mismatch");
        for (size_t i = 0; i < r; ++i)
            require(i == static_cast<size_t>(dim) || t.shape()[i] == base[i], Err::ShapeMismatch,
                    "concat: incompatible shapes");
        total_dim += t.shape()[static_cast<size_t>(dim)];
    }
    std::vector<int64_t> out_shape = base;
    out_shape[static_cast<size_t>(dim)] = total_dim;
    std::vector<double> out(static_cast<size_t>(outer * total_dim * inner));
    int64_t offset = 0;
    for (const Tensor& t : parts) {
        int64_t d = t.shape()[static_cast<size_t>(dim)];
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total_dim + offset) * inner,
                        t.data().data() + o * d * inner, static_cast<size_t>(d * inner) * 8);
        offset += d;
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    std::vector<int64_t> dims;
    for (const Tensor& t : parts) {
        impls.push_back(t.impl());
        dims.push_back(t.shape()[static_cast<size_t>(dim)]);
    }
    return make_op_result(std::move(out_shape), std::move(out), parts, "concat",
                          [impls, dims, outer, inner, total_dim](const TensorImpl& o) {
                              int64_t offset = 0;
                              for (size_t p = 0; p < impls.size(); ++p) {
                                  int64_t d = dims[p];
                                  if (impls[p]->requires_grad) {
                                      double* g = impls[p]->grad_buf();
                                      for (int64_t out_i = 0; out_i < outer; ++out_i) {
                                          const double* src =
                                              o.grad.data() + (out_i * total_dim + offset) * inner;
                                          double* dst = g + out_i * d * inner;
                                          for (int64_t i = 0; i < d * inner; ++i) dst[i] += src[i];
                                      }
                                  }
                                  offset += d;
                              }
                          });
}

Tensor slice(const Tensor& x, int dim, int64_t start, int64_t len) {
    const auto& shape = x.shape();
    size_t r = shape.size();
    require(dim >= 0 && dim < static_cast<int>(r), Err::ShapeMismatch, "slice: bad dim");
    require(start >= 0 && len >= 1 && start + len <= shape[static_cast<size_t>(dim)],
            Err::ShapeMismatch, "slice: out of range");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < dim; ++i) outer *= shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(dim) + 1; i < r; ++i) inner *= shape[i];
    int64_t d = shape[static_cast<size_t>(dim)];
    std::vector<int64_t> out_shape = shape;
    out_shape[static_cast<size_t>(dim)] = len;
    std::vector<double> out(static_cast<size_t>(outer * len * inner));
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, x.data().data() + (o * d + start) * inner,
                    static_cast<size_t>(len * inner) * 8);
    auto xi = x.impl();
    return make_op_result(std::move(out_shape), std::move(out), {x}, "slice",
                          [xi, outer, inner, d, start, len](const TensorImpl& o) {
                              if (!xi->requires_grad) return;
                              double* g = xi->grad_buf();
                              for (int64_t out_i = 0; out_i < outer; ++out_i) {
                                  const double* src = o.grad.data() + out_i * len * inner;
                                  double* dst = g + (out_i * d + start) * inner;
                                  for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                              }
                          });
}

namespace {

// C[m,n] += A[m,k] * B[k,n], raw pointers
void mm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t t = 0; t < k; ++t) {
            double av = arow[t];
            if (av == 0.0) continue;
            const double* brow = b + t * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T where B is [n,k]
void mm_acc_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (int64_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
            crow[j] += acc;
        }
    }
}

// C[m,n] += A^T * B where A is [k,m], B is [k,n]
void mm_acc_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t t = 0; t < k; ++t) {
        const double* arow = a + t * m;
        const double* brow = b + t * n;
        for (int64_t i = 0; i < m; ++i) {
            double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, Err::ShapeMismatch, "matmul: expects 2-D inputs");
    int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    require(k == k2, Err::ShapeMismatch,
            "matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    count_macs(static_cast<uint64_t>(m) * k * n);
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    mm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto ai = a.impl(), bi = b.impl();
    return make_op_result({m, n}, std::move(out), {a, b}, "matmul",
                          [ai, bi, m, k, n](const TensorImpl& o) {
                              const double* go = o.grad.data();
                              if (ai->requires_grad) // dA = dC * B^T
                                  mm_acc_nt(go, bi->data.data(), ai->grad_buf(), m, n, k);
                              if (bi->requires_grad) // dB = A^T * dC
                                  mm_acc_tn(ai->data.data(), go, bi->grad_buf(), k, m, n);
                          });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b) {
    require(a.rank() == 3 && b.rank() == 3, Err::ShapeMismatch, "bmm: expects 3-D inputs");
    int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2);
    require(b.dim(0) == B, Err::ShapeMismatch, "bmm: batch mismatch");
    int64_t n = trans_b ? b.dim(1) : b.dim(2);
    int64_t bk = trans_b ? b.dim(2) : b.dim(1);
    require(bk == k, Err::ShapeMismatch, "bmm: inner dims");
    count_macs(static_cast<uint64_t>(B) * m * k * n);
    std::vector<double> out(static_cast<size_t>(B * m * n), 0.0);
    for (int64_t bi_ = 0; bi_ < B; ++bi_) {
        const double* pa = a.data().data() + bi_ * m * k;
        const double* pb = b.data().data() + bi_ * (trans_b ? n * k : k * n);
        double* pc = out.data() + bi_ * m * n;
        if (trans_b)
            mm_acc_nt(pa, pb, pc, m, k, n);
        else
            mm_acc(pa, pb, pc, m, k, n);
    }
    auto ai = a.impl(), bi = b.impl();
    return make_op_result(
        {B, m, n}, std::move(out), {a, b}, "bmm",
        [ai, bi, B, m, k, n, trans_b](const TensorImpl& o) {
            for (int64_t t = 0; t < B; ++t) {
                const double* go = o.grad.data() + t * m * n;
                const double* pa = ai->data.data() + t * m * k;
                const double* pb = bi->data.data() + t * (trans_b ? n * k : k * n);
                if (ai->requires_grad) {
                    double* ga = ai->grad_buf() + t * m * k;
                    if (trans_b) // dA = dC * B  (B is [n,k])
                        mm_acc(go, pb, ga, m, n, k);
                    else // dA = dC * B^T
                        mm_acc_nt(go, pb, ga, m, n, k);
                }
                if (bi->requires_grad) {
                    double* gb = bi->grad_buf() + t * (trans_b ? n * k : k * n);
                    if (trans_b) // dB[j,t'] = sum_i dC[i,j] A[i,t']
                        mm_acc_tn(go, pa, gb, n, m, k);
                    else // dB = A^T * dC
                        mm_acc_tn(pa, go, gb, k, m, n);
                }
            }
        });
}

Tensor bmm_shared_a(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 3, Err::ShapeMismatch, "bmm_shared_a: ranks");
    int64_t m = a.dim(0), k = a.dim(1);
    int64_t B = b.dim(0), n = b.dim(2);
    require(b.dim(1) == k, Err::ShapeMismatch, "bmm_shared_a: inner dims");
    count_macs(static_cast<uint64_t>(B) * m * k * n);
    std::vector<double> out(static_cast<size_t>(B * m * n), 0.0);
    for (int64_t t = 0; t < B; ++t)
        mm_acc(a.data().data(), b.data().data() + t * k * n, out.data() + t * m * n, m, k, n);
    auto ai = a.impl(), bi = b.impl();
    return make_op_result({B, m, n}, std::move(out), {a, b}, "bmm_shared_a",
                          [ai, bi, B, m, k, n](const TensorImpl& o) {
                              for (int64_t t = 0; t < B; ++t) {
                                  const double* go = o.grad.data() + t * m * n;
                                  if (ai->requires_grad) // dA += dC * B[t]^T
                                      mm_acc_nt(go, bi->data.data() + t * k * n, ai->grad_buf(), m,
                                                n, k);
                                  if (bi->requires_grad) // dB[t] = A^T * dC
                                      mm_acc_tn(ai->data.data(), go, bi->grad_buf() + t * k * n, k,
                                                m, n);
                              }
                          });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    require(v.rank() == 1, Err::ShapeMismatch, "add_rowvec: v must be 1-D");
    int64_t d = v.dim(0);
    require(x.rank() >= 1 && x.shape().back() == d, Err::ShapeMismatch,
            "add_rowvec: last dim " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    int64_t rows = x.numel() / d;
    std::vector<double> out(x.data().size());
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j)
            out[static_cast<size_t>(r * d + j)] =
                x.data()[static_cast<size_t>(r * d + j)] + v.data()[static_cast<size_t>(j)];
    auto xi = x.impl(), vi = v.impl();
    return make_op_result(x.shape(), std::move(out), {x, v}, "add_rowvec",
                          [xi, vi, rows, d](const TensorImpl& o) {
                              if (xi->requires_grad) accumulate_grad(xi, o.grad.data());
                              if (vi->requires_grad) {
                                  double* g = vi->grad_buf();
                                  for (int64_t r = 0; r < rows; ++r)
                                      for (int64_t j = 0; j < d; ++j) g[j] += o.grad[static_cast<size_t>(r * d + j)];
                              }
                          });
}

Tensor add_bias_nchw(const Tensor& x, const Tensor& b) {
    require(x.rank() == 4 && b.rank() == 1 && x.dim(1) == b.dim(0), Err::ShapeMismatch,
            "add_bias_nchw: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(x.data().size());
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            double bv = b.data()[static_cast<size_t>(c)];
            const double* src = x.data().data() + (n * C + c) * HW;
            double* dst = out.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] + bv;
        }
    auto xi = x.impl(), bi = b.impl();
    return make_op_result(x.shape(), std::move(out), {x, b}, "add_bias_nchw",
                          [xi, bi, N, C, HW](const TensorImpl& o) {
                              if (xi->requires_grad) accumulate_grad(xi, o.grad.data());
                              if (bi->requires_grad) {
                                  double* g = bi->grad_buf();
                                  for (int64_t n = 0; n < N; ++n)
                                      for (int64_t c = 0; c < C; ++c) {
                                          const double* src = o.grad.data() + (n * C + c) * HW;
                                          double acc = 0.0;
                                          for (int64_t i = 0; i < HW; ++i) acc += src[i];
                                          g[c] += acc;
                                      }
                              }
                          });
}

Tensor add_pos_embed(const Tensor& tokens, const Tensor& pe) {
    require(tokens.rank() == 3 && pe.rank() == 2, Err::ShapeMismatch, "add_pos_embed: ranks");
    int64_t B = tokens.dim(0), T = tokens.dim(1), d = tokens.dim(2);
    require(pe.dim(0) == T && pe.dim(1) == d, Err::ShapeMismatch,
            "add_pos_embed: tokens " + shape_str(tokens.shape()) + " vs embed " +
                shape_str(pe.shape()));
    std::vector<double> out(tokens.data().size());
    int64_t td = T * d;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < td; ++i)
            out[static_cast<size_t>(b * td + i)] =
                tokens.data()[static_cast<size_t>(b * td + i)] + pe.data()[static_cast<size_t>(i)];
    auto ti = tokens.impl(), pi = pe.impl();
    return make_op_result(tokens.shape(), std::move(out), {tokens, pe}, "add_pos_embed",
                          [ti, pi, B, td](const TensorImpl& o) {
                              if (ti->requires_grad) accumulate_grad(ti, o.grad.data());
                              if (pi->requires_grad) {
                                  double* g = pi->grad_buf();
                                  for (int64_t b = 0; b < B; ++b)
                                      for (int64_t i = 0; i < td; ++i)
                                          g[i] += o.grad[static_cast<size_t>(b * td + i)];
                              }
                          });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require(w.rank() == 2, Err::ShapeMismatch, "linear: weight must be 2-D");
    int64_t d_in = w.dim(0), d_out = w.dim(1);
    require(x.shape().back() == d_in, Err::ShapeMismatch,
            "linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    int64_t rows = x.numel() / d_in;
    Tensor flat = reshape(x, {rows, d_in});
    Tensor y = matmul(flat, w);
    if (bias.defined()) y = add_rowvec(y, bias);
    std::vector<int64_t> out_shape = x.shape();
    out_shape.back() = d_out;
    return reshape(y, std::move(out_shape));
}

std::pair<int64_t, int64_t> conv2d_output_hw(int64_t h, int64_t w, int64_t kh, int64_t kw,
                                             const Conv2dSpec& spec) {
    int64_t oh = (h + 2 * spec.pad_h - kh) / spec.stride_h + 1;
    int64_t ow = (w + 2 * spec.pad_w - kw) / spec.stride_w + 1;
    require(oh >= 1 && ow >= 1, Err::EmptyOutput,
            "conv2d: empty output for input " + std::to_string(h) + "x" + std::to_string(w) +
                " kernel " + std::to_string(kh) + "x" + std::to_string(kw));
    return {oh, ow};
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dSpec& spec) {
    require(x.rank() == 4 && w.rank() == 4, Err::ShapeMismatch, "conv2d: x and w must be 4-D");
    const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = w.dim(0), Cin_g = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int64_t g = spec.groups;
    require(g >= 1 && Cin % g == 0 && Cout % g == 0, Err::ShapeMismatch,
            "conv2d: groups must divide channels");
    require(Cin / g == Cin_g, Err::ShapeMismatch,
            "conv2d: weight expects Cin/groups=" + std::to_string(Cin_g) + ", got Cin=" +
                std::to_string(Cin) + " groups=" + std::to_string(g));
    require(spec.stride_h >= 1 && spec.stride_w >= 1 && spec.pad_h >= 0 && spec.pad_w >= 0,
            Err::InvalidConfig, "conv2d: bad stride/padding");
    if (bias.defined())
        require(bias.rank() == 1 && bias.dim(0) == Cout, Err::ShapeMismatch, "conv2d: bias shape");
    auto [OH, OW] = conv2d_output_hw(H, W, kh, kw, spec);
    const int64_t co_per_g = Cout / g;

    count_macs(static_cast<uint64_t>(N) * Cout * Cin_g * kh * kw * OH * OW);

    std::vector<double> out(static_cast<size_t>(N * Cout * OH * OW), 0.0);
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co) {
            const int64_t gi = co / co_per_g;
            double* yplane = out.data() + (n * Cout + co) * OH * OW;
            for (int64_t ci = 0; ci < Cin_g; ++ci) {
                const double* xplane = xd + (n * Cin + gi * Cin_g + ci) * H * W;
                const double* wk = wd + ((co * Cin_g) + ci) * kh * kw;
                for (int64_t oh = 0; oh < OH; ++oh) {
                    const int64_t ih0 = oh * spec.stride_h - spec.pad_h;
                    for (int64_t i = 0; i < kh; ++i) {
                        const int64_t ih = ih0 + i;
                        if (ih < 0 || ih >= H) continue;
                        const double* xrow = xplane + ih * W;
                        const double* wrow = wk + i * kw;
                        double* yrow = yplane + oh * OW;
                        for (int64_t ow = 0; ow < OW; ++ow) {
                            const int64_t iw0 = ow * spec.stride_w - spec.pad_w;
                            double acc = 0.0;
                            for (int64_t j = 0; j < kw; ++j) {
                                const int64_t iw = iw0 + j;
                                if (iw < 0 || iw >= W) continue;
                                acc += xrow[iw] * wrow[j];
                            }
                            yrow[ow] += acc;
                        }
                    }
                }
            }
            if (bias.defined()) {
                const double bv = bias.data()[static_cast<size_t>(co)];
                for (int64_t i = 0; i < OH * OW; ++i) yplane[i] += bv;
            }
        }

    auto xi = x.impl(), wi = w.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    std::vector<Tensor> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    Conv2dSpec sp = spec;
    return make_op_result(
        {N, Cout, OH, OW}, std::move(out), std::move(parents), "conv2d",
        [xi, wi, bi, sp, N, Cin, H, W, Cout, Cin_g, kh, kw, OH, OW,
         co_per_g](const TensorImpl& o) {
            const double* go = o.grad.data();
            const double* xd = xi->data.data();
            const double* wd = wi->data.data();
            double* gx = xi->requires_grad ? xi->grad_buf() : nullptr;
            double* gw = wi->requires_grad ? wi->grad_buf() : nullptr;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t co = 0; co < Cout; ++co) {
                    const int64_t gi = co / co_per_g;
                    const double* gplane = go + (n * Cout + co) * OH * OW;
                    for (int64_t ci = 0; ci < Cin_g; ++ci) {
                        const int64_t xoff = (n * Cin + gi * Cin_g + ci) * H * W;
                        const int64_t woff = ((co * Cin_g) + ci) * kh * kw;
                        for (int64_t oh = 0; oh < OH; ++oh) {
                            const int64_t ih0 = oh * sp.stride_h - sp.pad_h;
                            for (int64_t i = 0; i < kh; ++i) {
                                const int64_t ih = ih0 + i;
                                if (ih < 0 || ih >= H) continue;
                                for (int64_t ow = 0; ow < OW; ++ow) {
                                    const int64_t iw0 = ow * sp.stride_w - sp.pad_w;
                                    const double gov = gplane[oh * OW + ow];
                                    if (gov == 0.0) continue;
                                    for (int64_t j = 0; j < kw; ++j) {
                                        const int64_t iw = iw0 + j;
                                        if (iw < 0 || iw >= W) continue;
                                        if (gx) gx[xoff + ih * W + iw] += wd[woff + i * kw + j] * gov;
                                        if (gw) gw[woff + i * kw + j] += xd[xoff + ih * W + iw] * gov;
                                    }
                                }
                            }
                        }
                    }
                }
            if (bi && bi->requires_grad) {
                double* gb = bi->grad_buf();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t co = 0; co < Cout; ++co) {
                        const double* gplane = go + (n * Cout + co) * OH * OW;
                        double acc = 0.0;
                        for (int64_t i = 0; i < OH * OW; ++i) acc += gplane[i];
                        gb[co] += acc;
                    }
            }
        });
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                        const Conv2dSpec& spec) {
    require(x.rank() == 4 && w.rank() == 4, Err::ShapeMismatch, "depthwise: x and w must be 4-D");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t kh = w.dim(2), kw = w.dim(3);
    require(w.dim(0) == C && w.dim(1) == 1, Err::ShapeMismatch,
            "depthwise: weight must be [C,1,kh,kw] with C=" + std::to_string(C));
    if (bias.defined())
        require(bias.rank() == 1 && bias.dim(0) == C, Err::ShapeMismatch, "depthwise: bias shape");
    auto [OH, OW] = conv2d_output_hw(H, W, kh, kw, spec);

    count_macs(static_cast<uint64_t>(N) * C * kh * kw * OH * OW);

    std::vector<double> out(static_cast<size_t>(N * C * OH * OW), 0.0);
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* xplane = xd + (n * C + c) * H * W;
            const double* wk = wd + c * kh * kw;
            double* yplane = out.data() + (n * C + c) * OH * OW;
            const double bv = bias.defined() ? bias.data()[static_cast<size_t>(c)] : 0.0;
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    double acc = bv;
                    const int64_t ih0 = oh * spec.stride_h - spec.pad_h;
                    const int64_t iw0 = ow * spec.stride_w - spec.pad_w;
                    for (int64_t i = 0; i < kh; ++i) {
                        const int64_t ih = ih0 + i;
                        if (ih < 0 || ih >= H) continue;
                        for (int64_t j = 0; j < kw; ++j) {
                            const int64_t iw = iw0 + j;
                            if (iw < 0 || iw >= W) continue;
                            acc += xplane[ih * W + iw] * wk[i * kw + j];
                        }
                    }
                    yplane[oh * OW + ow] = acc;
                }
        }

    auto xi = x.impl(), wi = w.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    std::vector<Tensor> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    Conv2dSpec sp = spec;
    return make_op_result(
        {N, C, OH, OW}, std::move(out), std::move(parents), "depthwise_conv2d",
        [xi, wi, bi, sp, N, C, H, W, kh, kw, OH, OW](const TensorImpl& o) {
            const double* go = o.grad.data();
            const double* xd = xi->data.data();
            const double* wd = wi->data.data();
            double* gx = xi->requires_grad ? xi->grad_buf() : nullptr;
            double* gw = wi->requires_grad ? wi->grad_buf() : nullptr;
            double* gb = (bi && bi->requires_grad) ? bi->grad_buf() : nullptr;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t xoff = (n * C + c) * H * W;
                    const int64_t woff = c * kh * kw;
                    const double* gplane = go + (n * C + c) * OH * OW;
                    for (int64_t oh = 0; oh < OH; ++oh)
                        for (int64_t ow = 0; ow < OW; ++ow) {
                            const double gov = gplane[oh * OW + ow];
                            if (gov == 0.0) continue;
                            if (gb) gb[c] += gov;
                            const int64_t ih0 = oh * sp.stride_h - sp.pad_h;
                            const int64_t iw0 = ow * sp.stride_w - sp.pad_w;
                            for (int64_t i = 0; i < kh; ++i) {
                                const int64_t ih = ih0 + i;
                                if (ih < 0 || ih >= H) continue;
                                for (int64_t j = 0; j < kw; ++j) {
                                    const int64_t iw = iw0 + j;
                                    if (iw < 0 || iw >= W) continue;
                                    if (gx) gx[xoff + ih * W + iw] += wd[woff + i * kw + j] * gov;
                                    if (gw) gw[woff + i * kw + j] += xd[xoff + ih * W + iw] * gov;
                                }
                            }
                        }
                }
        });
}

Tensor bilinear_sample(const Tensor& x, const Tensor& coords) {
    require(x.rank() == 4, Err::ShapeMismatch, "bilinear_sample: x must be [N,C,H,W]");
    require(coords.rank() == 3 && coords.dim(2) == 2, Err::ShapeMismatch,
            "bilinear_sample: coords must be [N,P,2]");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(coords.dim(0) == N, Err::ShapeMismatch, "bilinear_sample: batch mismatch");
    const int64_t P = coords.dim(1);

    count_macs(4ULL * static_cast<uint64_t>(N) * C * P);

    std::vector<double> out(static_cast<size_t>(N * C * P), 0.0);
    const double* xd = x.data().data();
    const double* cd = coords.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t p = 0; p < P; ++p) {
            const double h = cd[(n * P + p) * 2 + 0];
            const double w = cd[(n * P + p) * 2 + 1];
            if (h <= -1.0 || h >= static_cast<double>(H) || w <= -1.0 ||
                w >= static_cast<double>(W))
                continue; // fully outside: zero padding
            const int64_t h0 = static_cast<int64_t>(std::floor(h));
            const int64_t w0 = static_cast<int64_t>(std::floor(w));
            const double lh = h - static_cast<double>(h0);
            const double lw = w - static_cast<double>(w0);
            const bool v00 = h0 >= 0 && h0 < H && w0 >= 0 && w0 < W;
            const bool v01 = h0 >= 0 && h0 < H && w0 + 1 >= 0 && w0 + 1 < W;
            const bool v10 = h0 + 1 >= 0 && h0 + 1 < H && w0 >= 0 && w0 < W;
            const bool v11 = h0 + 1 >= 0 && h0 + 1 < H && w0 + 1 >= 0 && w0 + 1 < W;
            const double c00 = (1 - lh) * (1 - lw), c01 = (1 - lh) * lw;
            const double c10 = lh * (1 - lw), c11 = lh * lw;
            for (int64_t c = 0; c < C; ++c) {
                const double* plane = xd + (n * C + c) * H * W;
                double acc = 0.0;
                if (v00) acc += c00 * plane[h0 * W + w0];
                if (v01) acc += c01 * plane[h0 * W + w0 + 1];
                if (v10) acc += c10 * plane[(h0 + 1) * W + w0];
                if (v11) acc += c11 * plane[(h0 + 1) * W + w0 + 1];
                out[static_cast<size_t>((n * C + c) * P + p)] = acc;
            }
        }

    auto xi = x.impl(), ci_ = coords.impl();
    return make_op_result(
        {N, C, P}, std::move(out), {x, coords}, "bilinear_sample",
        [xi, ci_, N, C, H, W, P](const TensorImpl& o) {
            const double* go = o.grad.data();
            const double* xd = xi->data.data();
            const double* cd = ci_->data.data();
            double* gx = xi->requires_grad ? xi->grad_buf() : nullptr;
            double* gc = ci_->requires_grad ? ci_->grad_buf() : nullptr;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t p = 0; p < P; ++p) {
                    const double h = cd[(n * P + p) * 2 + 0];
                    const double w = cd[(n * P + p) * 2 + 1];
                    if (h <= -1.0 || h >= static_cast<double>(H) || w <= -1.0 ||
                        w >= static_cast<double>(W))
                        continue;
                    const int64_t h0 = static_cast<int64_t>(std::floor(h));
                    const int64_t w0 = static_cast<int64_t>(std::floor(w));
                    const double lh = h - static_cast<double>(h0);
                    const double lw = w - static_cast<double>(w0);
                    const bool v00 = h0 >= 0 && h0 < H && w0 >= 0 && w0 < W;
                    const bool v01 = h0 >= 0 && h0 < H && w0 + 1 >= 0 && w0 + 1 < W;
                    const bool v10 = h0 + 1 >= 0 && h0 + 1 < H && w0 >= 0 && w0 < W;
                    const bool v11 = h0 + 1 >= 0 && h0 + 1 < H && w0 + 1 >= 0 && w0 + 1 < W;
                    const double c00 = (1 - lh) * (1 - lw), c01 = (1 - lh) * lw;
                    const double c10 = lh * (1 - lw), c11 = lh * lw;
                    double dh = 0.0, dw = 0.0;
                    for (int64_t c = 0; c < C; ++c) {
                        const double gov = go[(n * C + c) * P + p];
                        const int64_t base = (n * C + c) * H * W;
                        const double p00 = v00 ? xd[base + h0 * W + w0] : 0.0;
                        const double p01 = v01 ? xd[base + h0 * W + w0 + 1] : 0.0;
                        const double p10 = v10 ? xd[base + (h0 + 1) * W + w0] : 0.0;
                        const double p11 = v11 ? xd[base + (h0 + 1) * W + w0 + 1] : 0.0;
                        if (gx && gov != 0.0) {
                            if (v00) gx[base + h0 * W + w0] += c00 * gov;
                            if (v01) gx[base + h0 * W + w0 + 1] += c01 * gov;
                            if (v10) gx[base + (h0 + 1) * W + w0] += c10 * gov;
                            if (v11) gx[base + (h0 + 1) * W + w0 + 1] += c11 * gov;
                        }
                        if (gc) {
                            dh += gov * ((1 - lw) * (p10 - p00) + lw * (p11 - p01));
                            dw += gov * ((1 - lh) * (p01 - p00) + lh * (p11 - p10));
                        }
                    }
                    if (gc) {
                        gc[(n * P + p) * 2 + 0] += dh;
                        gc[(n * P + p) * 2 + 1] += dw;
                    }
                }
        });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormBuffers& buffers, bool training, double momentum, double eps) {
    require(x.rank() == 4, Err::ShapeMismatch, "batch_norm2d: x must be [N,C,H,W]");
    const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    require(gamma.rank() == 1 && gamma.dim(0) == C && beta.rank() == 1 && beta.dim(0) == C,
            Err::ShapeMismatch, "batch_norm2d: gamma/beta must be [C]");
    require(buffers.running_mean.defined() && buffers.running_mean.dim(0) == C &&
                buffers.running_var.dim(0) == C,
            Err::ShapeMismatch, "batch_norm2d: running stats must be [C]");

    const int64_t cnt = N * HW;
    std::vector<double> mean(static_cast<size_t>(C)), var(static_cast<size_t>(C));
    if (training) {
        for (int64_t c = 0; c < C; ++c) {
            double m = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const double* p = x.data().data() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) m += p[i];
            }
            m /= static_cast<double>(cnt);
            double v = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const double* p = x.data().data() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    double d = p[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<double>(cnt); // biased, used for normalization
            mean[static_cast<size_t>(c)] = m;
            var[static_cast<size_t>(c)] = v;
            // running stats keep the unbiased estimate
            double v_unbiased = cnt > 1 ? v * static_cast<double>(cnt) / static_cast<double>(cnt - 1) : v;
            auto& rm = buffers.running_mean.mutable_data();
            auto& rv = buffers.running_var.mutable_data();
            rm[static_cast<size_t>(c)] = (1.0 - momentum) * rm[static_cast<size_t>(c)] + momentum * m;
            rv[static_cast<size_t>(c)] = (1.0 - momentum) * rv[static_cast<size_t>(c)] + momentum * v_unbiased;
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            mean[static_cast<size_t>(c)] = buffers.running_mean.data()[static_cast<size_t>(c)];
            var[static_cast<size_t>(c)] = buffers.running_var.data()[static_cast<size_t>(c)];
        }
    }

    std::vector<double> inv_std(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c)
        inv_std[static_cast<size_t>(c)] = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);

    std::vector<double> out(x.data().size());
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* p = x.data().data() + (n * C + c) * HW;
            double* q = out.data() + (n * C + c) * HW;
            const double m = mean[static_cast<size_t>(c)];
            const double is = inv_std[static_cast<size_t>(c)];
            const double gma = gamma.data()[static_cast<size_t>(c)];
            const double bta = beta.data()[static_cast<size_t>(c)];
            for (int64_t i = 0; i < HW; ++i) q[i] = (p[i] - m) * is * gma + bta;
        }

    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    return make_op_result(
        x.shape(), std::move(out), {x, gamma, beta}, "batch_norm2d",
        [xi, gi, bi, N, C, HW, cnt, training, mean = std::move(mean),
         inv_std = std::move(inv_std)](const TensorImpl& o) {
            const double* go = o.grad.data();
            const double* xd = xi->data.data();
            for (int64_t c = 0; c < C; ++c) {
                const double m = mean[static_cast<size_t>(c)];
                const double is = inv_std[static_cast<size_t>(c)];
                const double gma = gi->data[static_cast<size_t>(c)];
                // per-channel sums over N,H,W
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const double* gp = go + (n * C + c) * HW;
                    const double* xp = xd + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        sum_dy += gp[i];
                        sum_dy_xhat += gp[i] * (xp[i] - m) * is;
                    }
                }
                if (gi->requires_grad) gi->grad_buf()[c] += sum_dy_xhat;
                if (bi->requires_grad) bi->grad_buf()[c] += sum_dy;
                if (xi->requires_grad) {
                    double* gx = xi->grad_buf();
                    if (training) {
                        const double inv_cnt = 1.0 / static_cast<double>(cnt);
                        for (int64_t n = 0; n < N; ++n) {
                            const double* gp = go + (n * C + c) * HW;
                            const double* xp = xd + (n * C + c) * HW;
                            double* gxp = gx + (n * C + c) * HW;
                            for (int64_t i = 0; i < HW; ++i) {
                                double xhat = (xp[i] - m) * is;
                                gxp[i] += gma * is *
                                          (gp[i] - sum_dy * inv_cnt - xhat * sum_dy_xhat * inv_cnt);
                            }
                        }
                    } else {
                        for (int64_t n = 0; n < N; ++n) {
                            const double* gp = go + (n * C + c) * HW;
                            double* gxp = gx + (n * C + c) * HW;
                            for (int64_t i = 0; i < HW; ++i) gxp[i] += gma * is * gp[i];
                        }
                    }
                }
            }
        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require(x.rank() >= 1, Err::ShapeMismatch, "layer_norm: needs at least 1-D");
    const int64_t d = x.shape().back();
    require(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
            Err::ShapeMismatch, "layer_norm: gamma/beta must match last dim");
    const int64_t rows = x.numel() / d;

    std::vector<double> mean(static_cast<size_t>(rows)), inv_std(static_cast<size_t>(rows));
    std::vector<double> out(x.data().size());
    for (int64_t r = 0; r < rows; ++r) {
        const double* p = x.data().data() + r * d;
        double m = 0.0;
        for (int64_t j = 0; j < d; ++j) m += p[j];
        m /= static_cast<double>(d);
        double v = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double t = p[j] - m;
            v += t * t;
        }
        v /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(v + eps);
        mean[static_cast<size_t>(r)] = m;
        inv_std[static_cast<size_t>(r)] = is;
        double* q = out.data() + r * d;
        for (int64_t j = 0; j < d; ++j)
            q[j] = (p[j] - m) * is * gamma.data()[static_cast<size_t>(j)] +
                   beta.data()[static_cast<size_t>(j)];
    }

    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    return make_op_result(
        x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
        [xi, gi, bi, rows, d, mean = std::move(mean), inv_std = std::move(inv_std)](
            const TensorImpl& o) {
            const double* go = o.grad.data();
            const double* xd = xi->data.data();
            for (int64_t r = 0; r < rows; ++r) {
                const double m = mean[static_cast<size_t>(r)];
                const double is = inv_std[static_cast<size_t>(r)];
                const double* gp = go + r * d;
                const double* xp = xd + r * d;
                double sum_g = 0.0, sum_g_xhat = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    double gj = gp[j] * gi->data[static_cast<size_t>(j)];
                    double xhat = (xp[j] - m) * is;
                    sum_g += gj;
                    sum_g_xhat += gj * xhat;
                    if (gi->requires_grad) gi->grad_buf()[j] += gp[j] * xhat;
                    if (bi->requires_grad) bi->grad_buf()[j] += gp[j];
                }
                if (xi->requires_grad) {
                    double* gx = xi->grad_buf() + r * d;
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (int64_t j = 0; j < d; ++j) {
                        double gj = gp[j] * gi->data[static_cast<size_t>(j)];
                        double xhat = (xp[j] - m) * is;
                        gx[j] += is * (gj - sum_g * inv_d - xhat * sum_g_xhat * inv_d);
                    }
                }
            }
        });
}

Tensor softmax_lastdim(const Tensor& x) {
    const int64_t d = x.shape().back();
    const int64_t rows = x.numel() / d;
    std::vector<double> out(x.data().size());
    for (int64_t r = 0; r < rows; ++r) {
        const double* p = x.data().data() + r * d;
        double mx = p[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, p[j]);
        double sum = 0.0;
        double* q = out.data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
            q[j] = std::exp(p[j] - mx);
            sum += q[j];
        }
        const double inv = 1.0 / sum;
        for (int64_t j = 0; j < d; ++j) q[j] *= inv;
    }
    auto xi = x.impl();
    auto y_copy = out;
    return make_op_result(x.shape(), std::move(out), {x}, "softmax",
                          [xi, rows, d, y = std::move(y_copy)](const TensorImpl& o) {
                              if (!xi->requires_grad) return;
                              double* gx = xi->grad_buf();
                              const double* go = o.grad.data();
                              for (int64_t r = 0; r < rows; ++r) {
                                  const double* yr = y.data() + r * d;
                                  const double* gr = go + r * d;
                                  double dot = 0.0;
                                  for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
                                  double* gxr = gx + r * d;
                                  for (int64_t j = 0; j < d; ++j)
                                      gxr[j] += yr[j] * (gr[j] - dot);
                              }
                          });
}

Tensor mhsa(const Tensor& tokens, const AttentionParams& p, Tensor* attn_out) {
    require(tokens.rank() == 3, Err::ShapeMismatch, "mhsa: tokens must be [B,T,d]");
    const int64_t B = tokens.dim(0), T = tokens.dim(1), d = tokens.dim(2);
    require(d == p.d_model, Err::ShapeMismatch, "mhsa: token dim vs params");
    require(p.heads >= 1 && d % p.heads == 0, Err::HeadsDontDivide,
            "mhsa: heads=" + std::to_string(p.heads) + " does not divide d=" + std::to_string(d));
    const int64_t h = p.heads, dh = d / h;

    Tensor q = linear(tokens, p.wq, p.bq);
    Tensor k = linear(tokens, p.wk, p.bk);
    Tensor v = linear(tokens, p.wv, p.bv);

    auto split_heads = [&](const Tensor& t) {
        Tensor r = reshape(t, {B, T, h, dh});
        r = permute(r, {0, 2, 1, 3}); // [B,h,T,dh]
        return reshape(r, {B * h, T, dh});
    };
    Tensor qh = split_heads(q), kh = split_heads(k), vh = split_heads(v);

    Tensor scores = mul_scalar(bmm(qh, kh, /*trans_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax_lastdim(scores); // [B*h,T,T]
    if (attn_out) *attn_out = attn.detach();
    Tensor ctx = bmm(attn, vh); // [B*h,T,dh]

    Tensor merged = reshape(ctx, {B, h, T, dh});
    merged = permute(merged, {0, 2, 1, 3});
    merged = reshape(merged, {B, T, d});
    return linear(merged, p.wo, p.bo);
}

Tensor ffn(const Tensor& tokens, const AttentionParams& p) {
    Tensor hdn = gelu(linear(tokens, p.w1, p.b1));
    return linear(hdn, p.w2, p.b2);
}

Tensor unfold_tokens(const Tensor& x, int64_t ph, int64_t pw) {
    require(x.rank() == 4, Err::ShapeMismatch, "unfold_tokens: x must be [N,d,H,W]");
    const int64_t N = x.dim(0), d = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(ph >= 1 && pw >= 1, Err::InvalidConfig, "unfold_tokens: bad patch");
    require(H % ph == 0 && W % pw == 0, Err::IndivisibleSpatialDims,
            "unfold_tokens: " + std::to_string(H) + "x" + std::to_string(W) +
                " not divisible by patch " + std::to_string(ph) + "x" + std::to_string(pw));
    const int64_t nh = H / ph, nw = W / pw, P = ph * pw, T = nh * nw;

    std::vector<double> out(static_cast<size_t>(N * P * T * d));
    const double* xd = x.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < d; ++c) {
            const double* plane = xd + (n * d + c) * H * W;
            for (int64_t th = 0; th < nh; ++th)
                for (int64_t tw = 0; tw < nw; ++tw)
                    for (int64_t ip = 0; ip < ph; ++ip)
                        for (int64_t jp = 0; jp < pw; ++jp) {
                            int64_t p = ip * pw + jp;
                            int64_t t = th * nw + tw;
                            out[static_cast<size_t>(((n * P + p) * T + t) * d + c)] =
                                plane[(th * ph + ip) * W + (tw * pw + jp)];
                        }
        }
    auto xi = x.impl();
    return make_op_result(
        {N, P, T, d}, std::move(out), {x}, "unfold_tokens",
        [xi, N, d, H, W, ph, pw, nh, nw, P, T](const TensorImpl& o) {
            if (!xi->requires_grad) return;
            double* gx = xi->grad_buf();
            const double* go = o.grad.data();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < d; ++c) {
                    double* plane = gx + (n * d + c) * H * W;
                    for (int64_t th = 0; th < nh; ++th)
                        for (int64_t tw = 0; tw < nw; ++tw)
                            for (int64_t ip = 0; ip < ph; ++ip)
                                for (int64_t jp = 0; jp < pw; ++jp) {
                                    int64_t p = ip * pw + jp;
                                    int64_t t = th * nw + tw;
                                    plane[(th * ph + ip) * W + (tw * pw + jp)] +=
                                        go[static_cast<size_t>(((n * P + p) * T + t) * d + c)];
                                }
                }
        });
}

Tensor fold_tokens(const Tensor& tokens, int64_t d, int64_t h, int64_t w, int64_t ph, int64_t pw) {
    require(tokens.rank() == 4, Err::ShapeMismatch, "fold_tokens: tokens must be [N,P,T,d]");
    require(h % ph == 0 && w % pw == 0, Err::IndivisibleSpatialDims, "fold_tokens: patch mismatch");
    const int64_t N = tokens.dim(0), P = tokens.dim(1), T = tokens.dim(2);
    const int64_t nh = h / ph, nw = w / pw;
    require(P == ph * pw && T == nh * nw && tokens.dim(3) == d, Err::ShapeMismatch,
            "fold_tokens: token shape " + shape_str(tokens.shape()) + " does not match target");

    std::vector<double> out(static_cast<size_t>(N * d * h * w));
    const double* td = tokens.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < d; ++c) {
            double* plane = out.data() + (n * d + c) * h * w;
            for (int64_t th = 0; th < nh; ++th)
                for (int64_t tw = 0; tw < nw; ++tw)
                    for (int64_t ip = 0; ip < ph; ++ip)
                        for (int64_t jp = 0; jp < pw; ++jp) {
                            int64_t p = ip * pw + jp;
                            int64_t t = th * nw + tw;
                            plane[(th * ph + ip) * w + (tw * pw + jp)] =
                                td[static_cast<size_t>(((n * P + p) * T + t) * d + c)];
                        }
        }
    auto ti = tokens.impl();
    return make_op_result(
        {N, d, h, w}, std::move(out), {tokens}, "fold_tokens",
        [ti, N, d, h, w, ph, pw, nh, nw, P, T](const TensorImpl& o) {
            if (!ti->requires_grad) return;
            double* gt = ti->grad_buf();
            const double* go = o.grad.data();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < d; ++c) {
                    const double* plane = go + (n * d + c) * h * w;
                    for (int64_t th = 0; th < nh; ++th)
                        for (int64_t tw = 0; tw < nw; ++tw)
                            for (int64_t ip = 0; ip < ph; ++ip)
                                for (int64_t jp = 0; jp < pw; ++jp) {
                                    int64_t p = ip * pw + jp;
                                    int64_t t = th * nw + tw;
                                    gt[static_cast<size_t>(((n * P + p) * T + t) * d + c)] +=
                                        plane[(th * ph + ip) * w + (tw * pw + jp)];
                                }
                }
        });
}

Tensor global_avg_pool2d(const Tensor& x) {
    require(x.rank() == 4, Err::ShapeMismatch, "global_avg_pool2d: x must be [N,C,H,W]");
    const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const double inv = 1.0 / static_cast<double>(HW);
    std::vector<double> out(static_cast<size_t>(N * C));
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* p = x.data().data() + (n * C + c) * HW;
            double acc = 0.0;
            for (int64_t i = 0; i < HW; ++i) acc += p[i];
            out[static_cast<size_t>(n * C + c)] = acc * inv;
        }
    auto xi = x.impl();
    return make_op_result({N, C}, std::move(out), {x}, "global_avg_pool2d",
                          [xi, N, C, HW, inv](const TensorImpl& o) {
                              if (!xi->requires_grad) return;
                              double* gx = xi->grad_buf();
                              for (int64_t n = 0; n < N; ++n)
                                  for (int64_t c = 0; c < C; ++c) {
                                      double g = o.grad[static_cast<size_t>(n * C + c)] * inv;
                                      double* gp = gx + (n * C + c) * HW;
                                      for (int64_t i = 0; i < HW; ++i) gp[i] += g;
                                  }
                          });
}

Tensor pixel_shuffle(const Tensor& x, int64_t r) {
    require(x.rank() == 4, Err::ShapeMismatch, "pixel_shuffle: x must be 4-D");
    const int64_t N = x.dim(0), Cr2 = x.dim(1), h = x.dim(2), w = x.dim(3);
    require(r >= 1 && Cr2 % (r * r) == 0, Err::ShapeMismatch,
            "pixel_shuffle: channels not divisible by r^2");
    const int64_t C = Cr2 / (r * r);
    std::vector<double> out(x.data().size());
    const double* xd = x.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t dy = 0; dy < r; ++dy)
                for (int64_t dx = 0; dx < r; ++dx) {
                    const double* src = xd + (((n * Cr2) + c * r * r + dy * r + dx) * h) * w;
                    for (int64_t i = 0; i < h; ++i)
                        for (int64_t j = 0; j < w; ++j)
                            out[static_cast<size_t>(
                                ((n * C + c) * h * r + i * r + dy) * w * r + j * r + dx)] =
                                src[i * w + j];
                }
    auto xi = x.impl();
    return make_op_result(
        {N, C, h * r, w * r}, std::move(out), {x}, "pixel_shuffle",
        [xi, N, C, Cr2, h, w, r](const TensorImpl& o) {
            if (!xi->requires_grad) return;
            double* gx = xi->grad_buf();
            const double* go = o.grad.data();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t dy = 0; dy < r; ++dy)
                        for (int64_t dx = 0; dx < r; ++dx) {
                            double* dst = gx + (((n * Cr2) + c * r * r + dy * r + dx) * h) * w;
                            for (int64_t i = 0; i < h; ++i)
                                for (int64_t j = 0; j < w; ++j)
                                    dst[i * w + j] += go[static_cast<size_t>(
                                        ((n * C + c) * h * r + i * r + dy) * w * r + j * r + dx)];
                        }
        });
}

} // namespace stk
