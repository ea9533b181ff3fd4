#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "stk/tensor.hpp"

namespace stk {

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor relu6(const Tensor& x);
Tensor gelu(const Tensor& x); // exact erf form
Tensor tanh_op(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// ---- reductions ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- shape ----
Tensor reshape(const Tensor& x, std::vector<int64_t> shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int dim);
Tensor slice(const Tensor& x, int dim, int64_t start, int64_t len);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b); // [m,k]x[k,n]
// batched [B,m,k]x[B,k,n]; trans_b multiplies by B's last-two-dims transpose
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false);
// one shared left matrix applied per batch: a[m,k] x b[B,k,n] -> [B,m,n]
Tensor bmm_shared_a(const Tensor& a, const Tensor& b);
// x[...,d_in] * w[d_in,d_out] (+ bias[d_out]); leading dims preserved
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

// broadcast adds
Tensor add_rowvec(const Tensor& x, const Tensor& v);       // [...,d] + [d]
Tensor add_bias_nchw(const Tensor& x, const Tensor& b);    // [N,C,H,W] + [C]
Tensor add_pos_embed(const Tensor& tokens, const Tensor& pe); // [B,T,d] + [T,d]

// ---- convolution ----
struct Conv2dSpec {
    int64_t stride_h = 1, stride_w = 1;
    int64_t pad_h = 0, pad_w = 0;
    int64_t groups = 1;
};

// Cross-correlation with zero padding. x[N,Cin,H,W], w[Cout,Cin/g,kh,kw],
// optional bias[Cout]. Depthwise = groups == Cin == Cout.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dSpec& spec);

// Dedicated depthwise path: channel c convolves only with kernel slice c.
// w[C,1,kh,kw]; must agree with conv2d(groups=C) to machine precision.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                        const Conv2dSpec& spec);

std::pair<int64_t, int64_t> conv2d_output_hw(int64_t h, int64_t w, int64_t kh, int64_t kw,
                                             const Conv2dSpec& spec);

// Fractional-coordinate read with zero padding outside the map.
// coords[N,P,2] holds (row, col) in continuous pixel space; out [N,C,P].
Tensor bilinear_sample(const Tensor& x, const Tensor& coords);

// ---- normalization ----
struct BatchNormBuffers {
    Tensor running_mean; // [C], plain buffer
    Tensor running_var;  // [C]
};

// Train mode normalizes with batch statistics and updates the running
// buffers in place (momentum 0.1, unbiased variance for the running
// estimate); eval mode normalizes with the stored statistics.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormBuffers& buffers, bool training, double momentum = 0.1,
                    double eps = 1e-5);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ---- attention ----
Tensor softmax_lastdim(const Tensor& x);

struct AttentionParams {
    int64_t d_model = 0;
    int64_t heads = 1;
    int64_t ffn_hidden = 0;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo; // [d,d] / [d]
    Tensor w1, b1;                         // [d,ffn] / [ffn]
    Tensor w2, b2;                         // [ffn,d] / [d]
};

// Scaled dot-product multi-head self-attention over tokens [B,T,d].
// Residuals and pre-norm are the caller's job. When attn_out is non-null it
// receives a detached copy of the softmaxed attention [B*heads,T,T].
Tensor mhsa(const Tensor& tokens, const AttentionParams& p, Tensor* attn_out = nullptr);

// Per-token feed-forward: w2 * gelu(w1 * token).
Tensor ffn(const Tensor& tokens, const AttentionParams& p);

// ---- tokens ----
// Non-overlapping ph x pw patches; pixels sharing an intra-patch position
// form one sequence: x[N,d,H,W] -> [N, ph*pw, (H/ph)*(W/pw), d].
Tensor unfold_tokens(const Tensor& x, int64_t ph, int64_t pw);
// Exact inverse of unfold_tokens.
Tensor fold_tokens(const Tensor& tokens, int64_t d, int64_t h, int64_t w, int64_t ph, int64_t pw);

// ---- misc ----
Tensor global_avg_pool2d(const Tensor& x); // [N,C,H,W] -> [N,C]
// [N, C*r*r, h, w] -> [N, C, h*r, w*r]
Tensor pixel_shuffle(const Tensor& x, int64_t r);

} // namespace stk
