#pragma once

#include <memory>
#include <string>
#include <vector>

#include "stk/io.hpp"
#include "stk/ops.hpp"
#include "stk/tensor.hpp"

namespace stk {

// One line of the static cost table. MACs follow the profiler convention:
// batch 1, multiply-accumulates only (bias adds, norms, activations and
// pooling count zero), padded kernel taps included.
struct CostRow {
    std::string name;
    int64_t params = 0;
    int64_t macs = 0;
    std::vector<int64_t> out_shape;
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, bool training) = 0;
    // Trainable parameters and non-trainable buffers, prefixed dotted names.
    virtual void collect(const std::string& prefix, NamedTensors& params,
                         NamedTensors& buffers) = 0;
    // Appends this layer's rows and advances `shape` (no batch dim).
    virtual void cost(const std::string& prefix, std::vector<CostRow>& rows,
                      std::vector<int64_t>& shape) const = 0;
};

// Kaiming-uniform: bound sqrt(6 / fan_in).
Tensor kaiming_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng);

struct BnUnit {
    Tensor gamma, beta;
    BatchNormBuffers buffers;

    static BnUnit make(int64_t channels);
    Tensor forward(const Tensor& x, bool training);
    void collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers) const;
    int64_t param_count() const { return gamma.numel() + beta.numel(); }
};

// conv -> optional batch norm -> optional ReLU6. Bias only when not
// followed by a norm.
class ConvBnAct : public Layer {
public:
    ConvBnAct(int64_t in_ch, int64_t out_ch, int64_t kh, int64_t kw, Conv2dSpec spec, bool norm,
              bool act, Rng& rng);

    Tensor forward(const Tensor& x, bool training) override;
    void collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers) override;
    void cost(const std::string& prefix, std::vector<CostRow>& rows,
              std::vector<int64_t>& shape) const override;

    Tensor weight;
    Tensor bias; // undefined when norm is present
    bool has_norm, has_act;
    BnUnit bn;
    Conv2dSpec spec;
    int64_t in_ch, out_ch, kh, kw;
};

} // namespace stk
