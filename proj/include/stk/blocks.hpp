#pragma once

#include <memory>
#include <vector>

#include "stk/layer.hpp"
#include "stk/ops.hpp"

namespace stk {

// Pre-norm transformer layer: x + MHSA(LN(x)), then x + FFN(LN(x)).
struct TransformerLayer {
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    AttentionParams attn;

    static TransformerLayer make(int64_t d, int64_t heads, int64_t ffn_hidden, Rng& rng);
    Tensor forward(const Tensor& tokens, Tensor* attn_out = nullptr) const;
    void collect(const std::string& prefix, NamedTensors& params) const;
    int64_t param_count() const;
};

// Inverted residual linear bottleneck: pointwise expand -> depthwise 3x3
// (stride 1 or 2) -> pointwise project with no activation. Residual when
// stride 1 and channel counts match.
class IrlbBlock : public Layer {
public:
    IrlbBlock(int64_t in_ch, int64_t out_ch, int64_t stride, double expansion, Rng& rng);

    Tensor forward(const Tensor& x, bool training) override;
    void collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers) override;
    void cost(const std::string& prefix, std::vector<CostRow>& rows,
              std::vector<int64_t>& shape) const override;

    int64_t in_ch, out_ch, stride, expanded;
    bool residual;
    ConvBnAct expand, dw, project;
};

// Local stride-2 aggregation -> tokens with positional embeddings ->
// transformer stack -> folded back and fused additively with a stride-2
// pointwise projection of the block input.
class HybridBlock : public Layer {
public:
    HybridBlock(int64_t in_ch, int64_t dim, int64_t depth, int64_t heads, int64_t ffn_hidden,
                int64_t patch_h, int64_t patch_w, int64_t in_h, int64_t in_w, Rng& rng);

    Tensor forward(const Tensor& x, bool training) override;
    Tensor forward_debug(const Tensor& x, bool training, std::vector<Tensor>* attn_maps);
    void collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers) override;
    void cost(const std::string& prefix, std::vector<CostRow>& rows,
              std::vector<int64_t>& shape) const override;

    int64_t in_ch, dim, depth, heads, ffn_hidden, patch_h, patch_w;
    int64_t tokens_per_group; // fixed by the build-time input size
    ConvBnAct down;           // 3x3 stride-2 local aggregation
    Tensor pos_embed;         // [T, d], zero-initialized
    std::vector<TransformerLayer> layers;
    ConvBnAct local_proj;     // stride-2 pointwise, norm, no activation
};

} // namespace stk
