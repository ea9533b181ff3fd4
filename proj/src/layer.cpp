#include "stk/layer.hpp"

#include <cmath>

namespace stk {

Tensor kaiming_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return Tensor::rand_uniform(std::move(shape), rng, -bound, bound, true);
}

BnUnit BnUnit::make(int64_t channels) {
    BnUnit u;
    u.gamma = Tensor::full({channels}, 1.0, true);
    u.beta = Tensor::zeros({channels}, true);
    u.buffers.running_mean = Tensor::zeros({channels});
    u.buffers.running_var = Tensor::full({channels}, 1.0);
    return u;
}

Tensor BnUnit::forward(const Tensor& x, bool training) {
    return batch_norm2d(x, gamma, beta, buffers, training);
}

void BnUnit::collect(const std::string& prefix, NamedTensors& params,
                     NamedTensors& buffers_out) const {
    params.emplace_back(prefix + ".gamma", gamma);
    params.emplace_back(prefix + ".beta", beta);
    buffers_out.emplace_back(prefix + ".running_mean", buffers.running_mean);
    buffers_out.emplace_back(prefix + ".running_var", buffers.running_var);
}

ConvBnAct::ConvBnAct(int64_t in_ch_, int64_t out_ch_, int64_t kh_, int64_t kw_, Conv2dSpec spec_,
                     bool norm, bool act, Rng& rng)
    : has_norm(norm), has_act(act), spec(spec_), in_ch(in_ch_), out_ch(out_ch_), kh(kh_), kw(kw_) {
    int64_t fan_in = (in_ch / spec.groups) * kh * kw;
    weight = kaiming_uniform({out_ch, in_ch / spec.groups, kh, kw}, fan_in, rng);
    if (has_norm)
        bn = BnUnit::make(out_ch);
    else
        bias = Tensor::zeros({out_ch}, true);
}

Tensor ConvBnAct::forward(const Tensor& x, bool training) {
    Tensor y = (spec.groups == in_ch && in_ch == out_ch)
                   ? depthwise_conv2d(x, weight, bias, spec)
                   : conv2d(x, weight, bias, spec);
    if (has_norm) y = bn.forward(y, training);
    if (has_act) y = relu6(y);
    return y;
}

void ConvBnAct::collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers) {
    params.emplace_back(prefix + ".conv.weight", weight);
    if (bias.defined()) params.emplace_back(prefix + ".conv.bias", bias);
    if (has_norm) bn.collect(prefix + ".bn", params, buffers);
}

void ConvBnAct::cost(const std::string& prefix, std::vector<CostRow>& rows,
                     std::vector<int64_t>& shape) const {
    auto [oh, ow] = conv2d_output_hw(shape[1], shape[2], kh, kw, spec);
    int64_t wparams = out_ch * (in_ch / spec.groups) * kh * kw;
    CostRow conv{prefix + ".conv", wparams + (bias.defined() ? out_ch : 0),
                 wparams * oh * ow, {out_ch, oh, ow}};
    rows.push_back(conv);
    if (has_norm) rows.push_back({prefix + ".bn", 2 * out_ch, 0, {out_ch, oh, ow}});
    shape = {out_ch, oh, ow};
}

} // namespace stk
