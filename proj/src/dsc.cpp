#include "stk/dsc.hpp"

#include <cmath>

namespace stk {

namespace {

// cumulative sum outward from the center index over dim 1
Tensor snake_cumsum_center(const Tensor& t) {
    const int64_t N = t.dim(0), K = t.dim(1), H = t.dim(2), W = t.dim(3);
    const int64_t HW = H * W, c = (K - 1) / 2;
    std::vector<double> out(t.data().size(), 0.0);
    const double* td = t.data().data();
    for (int64_t n = 0; n < N; ++n) {
        const int64_t base = n * K * HW;
        for (int64_t p = 0; p < HW; ++p) {
            for (int64_t i = c + 1; i < K; ++i)
                out[static_cast<size_t>(base + i * HW + p)] =
                    out[static_cast<size_t>(base + (i - 1) * HW + p)] + td[base + i * HW + p];
            for (int64_t i = c - 1; i >= 0; --i)
                out[static_cast<size_t>(base + i * HW + p)] =
                    out[static_cast<size_t>(base + (i + 1) * HW + p)] - td[base + i * HW + p];
        }
    }
    auto ti = t.impl();
    return make_op_result(
        t.shape(), std::move(out), {t}, "snake_cumsum_center",
        [ti, N, K, HW, c](const TensorImpl& o) {
            if (!ti->requires_grad) return;
            double* g = ti->grad_buf();
            const double* go = o.grad.data();
            for (int64_t n = 0; n < N; ++n) {
                const int64_t base = n * K * HW;
                for (int64_t p = 0; p < HW; ++p) {
                    // d[j] for j >= i depends on t[i] (i > c); suffix sums
                    double acc = 0.0;
                    for (int64_t i = K - 1; i > c; --i) {
                        acc += go[base + i * HW + p];
                        g[base + i * HW + p] += acc;
                    }
                    // d[j] for j <= i gets -t[i] (i < c); prefix sums
                    acc = 0.0;
                    for (int64_t i = 0; i < c; ++i) {
                        acc += go[base + i * HW + p];
                        g[base + i * HW + p] -= acc;
                    }
                }
            }
        });
}

} // namespace

Tensor accumulate_snake_offsets(const Tensor& raw) {
    require(raw.rank() == 4, Err::ShapeMismatch, "accumulate_snake_offsets: raw must be [N,K,H,W]");
    require(raw.dim(1) % 2 == 1, Err::EvenK,
            "accumulate_snake_offsets: K must be odd, got " + std::to_string(raw.dim(1)));
    return snake_cumsum_center(tanh_op(raw));
}

Tensor predict_offsets(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require(w.rank() == 4 && w.dim(2) == 3 && w.dim(3) == 3, Err::ShapeMismatch,
            "predict_offsets: predictor must be a 3x3 conv");
    require(w.dim(0) % 2 == 0, Err::ShapeMismatch,
            "predict_offsets: output channels must be 2K");
    Conv2dSpec sp;
    sp.pad_h = sp.pad_w = 1;
    return conv2d(x, w, bias, sp);
}

namespace {

// coordinate grid (base points + perpendicular offsets) as [N, K*H*W, 2]
Tensor snake_coords(const Tensor& offsets, SnakeAxis axis) {
    const int64_t N = offsets.dim(0), K = offsets.dim(1), H = offsets.dim(2), W = offsets.dim(3);
    const int64_t HW = H * W, c = (K - 1) / 2;
    std::vector<double> out(static_cast<size_t>(N * K * HW * 2));
    const double* od = offsets.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < K; ++i) {
            const double base_step = static_cast<double>(i - c);
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    const int64_t p = (n * K + i) * HW + y * W + x;
                    const double dp = od[p];
                    double row, col;
                    if (axis == SnakeAxis::Horizontal) {
                        row = static_cast<double>(y) + dp; // offset perpendicular to the axis
                        col = static_cast<double>(x) + base_step;
                    } else {
                        row = static_cast<double>(y) + base_step;
                        col = static_cast<double>(x) + dp;
                    }
                    const int64_t q = (n * K * HW + i * HW + y * W + x) * 2;
                    out[static_cast<size_t>(q)] = row;
                    out[static_cast<size_t>(q) + 1] = col;
                }
        }
    auto oi = offsets.impl();
    const int64_t comp = (axis == SnakeAxis::Horizontal) ? 0 : 1;
    return make_op_result({N, K * HW, 2}, std::move(out), {offsets}, "snake_coords",
                          [oi, comp](const TensorImpl& o) {
                              if (!oi->requires_grad) return;
                              double* g = oi->grad_buf();
                              const double* go = o.grad.data();
                              const size_t n = oi->data.size();
                              for (size_t p = 0; p < n; ++p) g[p] += go[2 * p + static_cast<size_t>(comp)];
                          });
}

} // namespace

Tensor snake_conv2d(const Tensor& x, const Tensor& weights, const Tensor& offsets,
                    SnakeAxis axis) {
    require(x.rank() == 4 && weights.rank() == 3 && offsets.rank() == 4, Err::ShapeMismatch,
            "snake_conv2d: ranks");
    const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = weights.dim(0), K = weights.dim(2);
    require(weights.dim(1) == Cin, Err::ShapeMismatch, "snake_conv2d: weight Cin mismatch");
    require(K % 2 == 1, Err::EvenK, "snake_conv2d: K must be odd");
    require(offsets.dim(0) == N && offsets.dim(1) == K && offsets.dim(2) == H &&
                offsets.dim(3) == W,
            Err::ShapeMismatch, "snake_conv2d: offsets must be [N,K,H,W] aligned with x");

    Tensor coords = snake_coords(offsets, axis);            // [N, K*H*W, 2]
    Tensor sampled = bilinear_sample(x, coords);            // [N, Cin, K*H*W]
    Tensor stacked = reshape(sampled, {N, Cin * K, H * W}); // (ci,k) major, positions minor
    Tensor wflat = reshape(weights, {Cout, Cin * K});
    Tensor out = bmm_shared_a(wflat, stacked); // [N, Cout, H*W]
    return reshape(out, {N, Cout, H, W});
}

DscBlock::DscBlock(int64_t in_ch_, int64_t out_ch_, int64_t branch_ch_, int64_t kernel_points_,
                   Rng& rng)
    : in_ch(in_ch_), out_ch(out_ch_), branch_ch(branch_ch_), kernel_points(kernel_points_) {
    require(kernel_points % 2 == 1, Err::EvenK, "DscBlock: K must be odd");
    const int64_t K = kernel_points;
    predictor_w = Tensor::zeros({2 * K, in_ch, 3, 3}, true);
    predictor_b = Tensor::zeros({2 * K}, true);
    snake_h_w = kaiming_uniform({branch_ch, in_ch, K}, in_ch * K, rng);
    snake_v_w = kaiming_uniform({branch_ch, in_ch, K}, in_ch * K, rng);
    bn_h = BnUnit::make(branch_ch);
    bn_v = BnUnit::make(branch_ch);
    fuse_w = kaiming_uniform({out_ch, 2 * branch_ch, 1, 1}, 2 * branch_ch, rng);
    bn_fuse = BnUnit::make(out_ch);
    down_w = kaiming_uniform({out_ch, 1, 3, 3}, 9, rng);
    bn_down = BnUnit::make(out_ch);
}

Tensor DscBlock::forward(const Tensor& x, bool training) {
    const int64_t K = kernel_points;
    Tensor raw = predict_offsets(x, predictor_w, predictor_b); // [N,2K,H,W]
    Tensor dp_h = accumulate_snake_offsets(slice(raw, 1, 0, K));
    Tensor dp_v = accumulate_snake_offsets(slice(raw, 1, K, K));

    Tensor bh = relu6(bn_h.forward(snake_conv2d(x, snake_h_w, dp_h, SnakeAxis::Horizontal),
                                   training));
    Tensor bv = relu6(bn_v.forward(snake_conv2d(x, snake_v_w, dp_v, SnakeAxis::Vertical),
                                   training));

    Tensor fused = relu6(bn_fuse.forward(conv2d(concat({bh, bv}, 1), fuse_w, {}, {}), training));

    Conv2dSpec down_spec;
    down_spec.stride_h = down_spec.stride_w = 2;
    down_spec.pad_h = down_spec.pad_w = 1;
    down_spec.groups = out_ch;
    return relu6(bn_down.forward(depthwise_conv2d(fused, down_w, {}, down_spec), training));
}

void DscBlock::collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers) {
    params.emplace_back(prefix + ".predictor.weight", predictor_w);
    params.emplace_back(prefix + ".predictor.bias", predictor_b);
    params.emplace_back(prefix + ".snake_h.weight", snake_h_w);
    params.emplace_back(prefix + ".snake_v.weight", snake_v_w);
    bn_h.collect(prefix + ".bn_h", params, buffers);
    bn_v.collect(prefix + ".bn_v", params, buffers);
    params.emplace_back(prefix + ".fuse.weight", fuse_w);
    bn_fuse.collect(prefix + ".bn_fuse", params, buffers);
    params.emplace_back(prefix + ".down.weight", down_w);
    bn_down.collect(prefix + ".bn_down", params, buffers);
}

void DscBlock::cost(const std::string& prefix, std::vector<CostRow>& rows,
                    std::vector<int64_t>& shape) const {
    const int64_t K = kernel_points;
    const int64_t H = shape[1], W = shape[2], HW = H * W;

    int64_t pred_params = 2 * K * in_ch * 9 + 2 * K;
    rows.push_back({prefix + ".predictor", pred_params, 2 * K * in_ch * 9 * HW, {2 * K, H, W}});

    for (const char* branch : {".snake_h", ".snake_v"}) {
        int64_t wparams = branch_ch * in_ch * K;
        rows.push_back({prefix + branch, wparams, wparams * HW, {branch_ch, H, W}});
        rows.push_back(
            {prefix + branch + std::string(".sample"), 0, 4 * in_ch * K * HW, {in_ch, H, W}});
        rows.push_back({prefix + branch + std::string(".bn"), 2 * branch_ch, 0, {branch_ch, H, W}});
    }

    int64_t fuse_params = out_ch * 2 * branch_ch;
    rows.push_back({prefix + ".fuse", fuse_params, fuse_params * HW, {out_ch, H, W}});
    rows.push_back({prefix + ".bn_fuse", 2 * out_ch, 0, {out_ch, H, W}});

    Conv2dSpec down_spec;
    down_spec.stride_h = down_spec.stride_w = 2;
    down_spec.pad_h = down_spec.pad_w = 1;
    auto [oh, ow] = conv2d_output_hw(H, W, 3, 3, down_spec);
    rows.push_back({prefix + ".down", out_ch * 9, out_ch * 9 * oh * ow, {out_ch, oh, ow}});
    rows.push_back({prefix + ".bn_down", 2 * out_ch, 0, {out_ch, oh, ow}});
    shape = {out_ch, oh, ow};
}

} // namespace stk
