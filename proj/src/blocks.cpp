#include "stk/blocks.hpp"

#include <cmath>

namespace stk {

TransformerLayer TransformerLayer::make(int64_t d, int64_t heads, int64_t ffn_hidden, Rng& rng) {
    require(heads >= 1 && d % heads == 0, Err::HeadsDontDivide,
            "transformer: heads must divide dim");
    TransformerLayer l;
    l.ln1_g = Tensor::full({d}, 1.0, true);
    l.ln1_b = Tensor::zeros({d}, true);
    l.ln2_g = Tensor::full({d}, 1.0, true);
    l.ln2_b = Tensor::zeros({d}, true);
    l.attn.d_model = d;
    l.attn.heads = heads;
    l.attn.ffn_hidden = ffn_hidden;
    l.attn.wq = kaiming_uniform({d, d}, d, rng);
    l.attn.bq = Tensor::zeros({d}, true);
    l.attn.wk = kaiming_uniform({d, d}, d, rng);
    l.attn.bk = Tensor::zeros({d}, true);
    l.attn.wv = kaiming_uniform({d, d}, d, rng);
    l.attn.bv = Tensor::zeros({d}, true);
    l.attn.wo = kaiming_uniform({d, d}, d, rng);
    l.attn.bo = Tensor::zeros({d}, true);
    l.attn.w1 = kaiming_uniform({d, ffn_hidden}, d, rng);
    l.attn.b1 = Tensor::zeros({ffn_hidden}, true);
    l.attn.w2 = kaiming_uniform({ffn_hidden, d}, ffn_hidden, rng);
    l.attn.b2 = Tensor::zeros({d}, true);
    return l;
}

Tensor TransformerLayer::forward(const Tensor& tokens, Tensor* attn_out) const {
    Tensor t1 = add(tokens, mhsa(layer_norm(tokens, ln1_g, ln1_b), attn, attn_out));
    return add(t1, ffn(layer_norm(t1, ln2_g, ln2_b), attn));
}

void TransformerLayer::collect(const std::string& prefix, NamedTensors& params) const {
    params.emplace_back(prefix + ".ln1.gamma", ln1_g);
    params.emplace_back(prefix + ".ln1.beta", ln1_b);
    params.emplace_back(prefix + ".attn.wq", attn.wq);
    params.emplace_back(prefix + ".attn.bq", attn.bq);
    params.emplace_back(prefix + ".attn.wk", attn.wk);
    params.emplace_back(prefix + ".attn.bk", attn.bk);
    params.emplace_back(prefix + ".attn.wv", attn.wv);
    params.emplace_back(prefix + ".attn.bv", attn.bv);
    params.emplace_back(prefix + ".attn.wo", attn.wo);
    params.emplace_back(prefix + ".attn.bo", attn.bo);
    params.emplace_back(prefix + ".ln2.gamma", ln2_g);
    params.emplace_back(prefix + ".ln2.beta", ln2_b);
    params.emplace_back(prefix + ".ffn.w1", attn.w1);
    params.emplace_back(prefix + ".ffn.b1", attn.b1);
    params.emplace_back(prefix + ".ffn.w2", attn.w2);
    params.emplace_back(prefix + ".ffn.b2", attn.b2);
}

int64_t TransformerLayer::param_count() const {
    const int64_t d = attn.d_model, f = attn.ffn_hidden;
    return 4 * d * d + 4 * d   // attention projections with biases
           + 2 * d * f + f + d // ffn
           + 4 * d;            // two layer norms
}

IrlbBlock::IrlbBlock(int64_t in_ch_, int64_t out_ch_, int64_t stride_, double expansion, Rng& rng)
    : in_ch(in_ch_), out_ch(out_ch_), stride(stride_),
      expanded(static_cast<int64_t>(std::llround(expansion * static_cast<double>(in_ch_)))),
      residual(stride_ == 1 && in_ch_ == out_ch_),
      expand(in_ch, expanded, 1, 1, Conv2dSpec{}, true, true, rng),
      dw(expanded, expanded, 3, 3,
         Conv2dSpec{stride_, stride_, 1, 1, expanded}, true, true, rng),
      project(expanded, out_ch, 1, 1, Conv2dSpec{}, true, false, rng) {
    require(stride == 1 || stride == 2, Err::InvalidConfig, "IrlbBlock: stride must be 1 or 2");
    require(expanded >= 1, Err::InvalidConfig, "IrlbBlock: expansion too small");
}

Tensor IrlbBlock::forward(const Tensor& x, bool training) {
    Tensor y = project.forward(dw.forward(expand.forward(x, training), training), training);
    return residual ? add(x, y) : y;
}

void IrlbBlock::collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers) {
    expand.collect(prefix + ".expand", params, buffers);
    dw.collect(prefix + ".dw", params, buffers);
    project.collect(prefix + ".project", params, buffers);
}

void IrlbBlock::cost(const std::string& prefix, std::vector<CostRow>& rows,
                     std::vector<int64_t>& shape) const {
    expand.cost(prefix + ".expand", rows, shape);
    dw.cost(prefix + ".dw", rows, shape);
    project.cost(prefix + ".project", rows, shape);
}

HybridBlock::HybridBlock(int64_t in_ch_, int64_t dim_, int64_t depth_, int64_t heads_,
                         int64_t ffn_hidden_, int64_t patch_h_, int64_t patch_w_, int64_t in_h,
                         int64_t in_w, Rng& rng)
    : in_ch(in_ch_), dim(dim_), depth(depth_), heads(heads_), ffn_hidden(ffn_hidden_),
      patch_h(patch_h_), patch_w(patch_w_),
      down(in_ch, dim, 3, 3, Conv2dSpec{2, 2, 1, 1, 1}, true, true, rng),
      local_proj(in_ch, dim, 1, 1, Conv2dSpec{2, 2, 0, 0, 1}, true, false, rng) {
    auto [oh, ow] = conv2d_output_hw(in_h, in_w, 3, 3, Conv2dSpec{2, 2, 1, 1, 1});
    require(oh % patch_h == 0 && ow % patch_w == 0, Err::IndivisibleSpatialDims,
            "HybridBlock: downsampled " + std::to_string(oh) + "x" + std::to_string(ow) +
                " not divisible by patch " + std::to_string(patch_h) + "x" +
                std::to_string(patch_w));
    tokens_per_group = (oh / patch_h) * (ow / patch_w);
    pos_embed = Tensor::zeros({tokens_per_group, dim}, true);
    layers.reserve(static_cast<size_t>(depth));
    for (int64_t i = 0; i < depth; ++i)
        layers.push_back(TransformerLayer::make(dim, heads, ffn_hidden, rng));
}

Tensor HybridBlock::forward(const Tensor& x, bool training) {
    return forward_debug(x, training, nullptr);
}

Tensor HybridBlock::forward_debug(const Tensor& x, bool training,
                                  std::vector<Tensor>* attn_maps) {
    const int64_t N = x.dim(0);
    Tensor local = down.forward(x, training); // [N,d,h,w]
    const int64_t h = local.dim(2), w = local.dim(3);
    Tensor tok4 = unfold_tokens(local, patch_h, patch_w); // [N,P,T,d]
    const int64_t P = tok4.dim(1), T = tok4.dim(2);
    require(T == tokens_per_group, Err::ShapeMismatch,
            "HybridBlock: token count " + std::to_string(T) +
                " does not match positional embedding length " +
                std::to_string(tokens_per_group));
    Tensor tokens = add_pos_embed(reshape(tok4, {N * P, T, dim}), pos_embed);
    for (auto& layer : layers) {
        Tensor maps;
        tokens = layer.forward(tokens, attn_maps ? &maps : nullptr);
        if (attn_maps) attn_maps->push_back(maps);
    }
    Tensor folded = fold_tokens(reshape(tokens, {N, P, T, dim}), dim, h, w, patch_h, patch_w);
    Tensor shortcut = local_proj.forward(x, training);
    return add(shortcut, folded);
}

void HybridBlock::collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers) {
    down.collect(prefix + ".down", params, buffers);
    params.emplace_back(prefix + ".pos_embed", pos_embed);
    for (size_t i = 0; i < layers.size(); ++i)
        layers[i].collect(prefix + ".layers." + std::to_string(i), params);
    local_proj.collect(prefix + ".local_proj", params, buffers);
}

void HybridBlock::cost(const std::string& prefix, std::vector<CostRow>& rows,
                       std::vector<int64_t>& shape) const {
    std::vector<int64_t> in_shape = shape;
    down.cost(prefix + ".down", rows, shape);
    const int64_t h = shape[1], w = shape[2];
    const int64_t P = patch_h * patch_w;
    const int64_t T = (h / patch_h) * (w / patch_w);
    const int64_t t_total = P * T;
    rows.push_back({prefix + ".pos_embed", tokens_per_group * dim, 0, {P, T, dim}});
    for (int64_t i = 0; i < depth; ++i) {
        std::string lp = prefix + ".layers." + std::to_string(i);
        rows.push_back({lp + ".ln1", 2 * dim, 0, {P, T, dim}});
        rows.push_back({lp + ".attn", 4 * dim * dim + 4 * dim,
                        4 * t_total * dim * dim + 2 * P * T * T * dim, {P, T, dim}});
        rows.push_back({lp + ".ln2", 2 * dim, 0, {P, T, dim}});
        rows.push_back({lp + ".ffn", 2 * dim * ffn_hidden + ffn_hidden + dim,
                        2 * t_total * dim * ffn_hidden, {P, T, dim}});
    }
    std::vector<int64_t> proj_shape = in_shape;
    local_proj.cost(prefix + ".local_proj", rows, proj_shape);
    require(proj_shape == shape, Err::ShapeMismatch, "HybridBlock: branch shapes disagree");
}

} // namespace stk
