#pragma once

#include <memory>

#include "stk/layer.hpp"
#include "stk/ops.hpp"
#include "stk/tensor.hpp"

namespace stk {

enum class SnakeAxis { Horizontal, Vertical };

// Raw predictor output -> cumulative offsets anchored at the kernel center.
// Steps outward are tanh-bounded, so adjacent kernel points never drift
// apart by more than one pixel:
//   i > c: d[i] = d[i-1] + tanh(raw[i])
//   i < c: d[i] = d[i+1] - tanh(raw[i])
// d[c] == 0 exactly; raw[c] is unused. raw: [N,K,H,W], K odd.
Tensor accumulate_snake_offsets(const Tensor& raw);

// 3x3 stride-1 pad-1 conv producing 2K offset channels (K per axis).
Tensor predict_offsets(const Tensor& x, const Tensor& w, const Tensor& bias);

// y(x0) = sum_i w_i * x(x0 + p_i + dp_i), sampled bilinearly. The K base
// points p_i run along `axis`; offsets displace the perpendicular
// coordinate. weights: [Cout,Cin,K]; offsets: [N,K,H,W]; output [N,Cout,H,W].
Tensor snake_conv2d(const Tensor& x, const Tensor& weights, const Tensor& offsets,
                    SnakeAxis axis);

// Two snake branches (horizontal + vertical) at stride 1, concatenated,
// fused by a pointwise conv, then downsampled by a stride-2 depthwise 3x3.
// Norm + ReLU6 after every conv. Output: [N, out_ch, ceil(H/2), ceil(W/2)].
class DscBlock : public Layer {
public:
    DscBlock(int64_t in_ch, int64_t out_ch, int64_t branch_ch, int64_t kernel_points, Rng& rng);

    Tensor forward(const Tensor& x, bool training) override;
    void collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers) override;
    void cost(const std::string& prefix, std::vector<CostRow>& rows,
              std::vector<int64_t>& shape) const override;

    int64_t in_ch, out_ch, branch_ch, kernel_points;
    Tensor predictor_w, predictor_b; // zero-initialized: starts in the standard-conv regime
    Tensor snake_h_w, snake_v_w;     // [branch_ch, in_ch, K]
    BnUnit bn_h, bn_v, bn_fuse, bn_down;
    Tensor fuse_w; // [out_ch, 2*branch_ch, 1, 1]
    Tensor down_w; // [out_ch, 1, 3, 3] depthwise
};

} // namespace stk
