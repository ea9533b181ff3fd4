#pragma once

#include <memory>
#include <string>
#include <vector>

#include "stk/blocks.hpp"
#include "stk/dsc.hpp"
#include "stk/layer.hpp"

namespace stk {

enum class HeadMode { Multiclass, Multilabel };

struct StagePlan {
    int64_t out_ch = 0;
    int64_t blocks = 1;
};

struct VitPlan {
    int64_t dim = 0;
    int64_t depth = 1;
    int64_t patch = 2;
};

// Declarative model description. The committed defaults pin the published
// cost envelope; everything is overridable through JSON configs.
struct ModelConfig {
    int64_t input_h = 224, input_w = 224;
    int64_t num_classes = 2;
    HeadMode head = HeadMode::Multiclass;

    int64_t stem_ch = 24;
    StagePlan stage1{32, 2};
    StagePlan stage2{72, 2};

    // stage-2 downsampling block ("ds2"): snake-conv block, or an IRLB
    // stride-2 stand-in when the S flag is off
    int64_t ds_out_ch = 288;
    int64_t dsc_branch_ch = 288;
    int64_t dsc_kernel_points = 9;

    VitPlan stage3{144, 2, 2};
    VitPlan stage4{192, 3, 1};
    int64_t heads = 4;
    double ffn_ratio = 2.0;
    double expansion = 4.0;

    // IRLB stand-ins for stages 3/4 when the V flag is off
    StagePlan voff_stage3{256, 3};
    StagePlan voff_stage4{320, 3};

    bool dsc_enabled = true; // ablation flag S
    bool vit_enabled = true; // ablation flag V
    std::string pretrained_init; // ablation flag P: checkpoint path, empty = off

    uint64_t seed = 0;

    void validate() const; // throws InvalidConfig with a field-level message
    int64_t ffn_hidden(int64_t dim) const;

    static ModelConfig default_224();
    static ModelConfig tiny_64();
    static ModelConfig tiny_gradcheck_32();
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

class Model {
public:
    explicit Model(const ModelConfig& cfg);

    // Full classification pass: features -> global average pool -> linear
    // head; raw logits out. Taps, when requested, collect each top-level
    // block's output by name.
    Tensor forward(const Tensor& x, bool training, NamedTensors* taps = nullptr);
    // Encoder part only (stem through the last stage).
    Tensor features(const Tensor& x, bool training, NamedTensors* taps = nullptr);

    NamedTensors params() const;
    NamedTensors buffers() const;
    std::vector<std::string> layer_names() const;
    std::vector<CostRow> cost_rows(int64_t input_h, int64_t input_w) const;
    int64_t feature_channels() const { return feature_ch_; }
    const ModelConfig& config() const { return cfg_; }

    Tensor head_w, head_b;

private:
    ModelConfig cfg_;
    int64_t feature_ch_ = 0;
    std::vector<std::pair<std::string, std::unique_ptr<Layer>>> layers_;
};

struct LoadReport {
    std::vector<std::string> matched;
    std::vector<std::string> missing;    // in the model but not the file
    std::vector<std::string> unexpected; // in the file but not the model
};

// Full checkpoint: every parameter and buffer plus the config, restored
// bitwise. load_checkpoint rebuilds the model from the embedded config.
void save_checkpoint(const Model& m, const std::string& path,
                     const NamedTensors& extra = {});
Model load_checkpoint(const std::string& path);
// By-name partial restore (pretraining -> classifier); unmatched model
// parameters keep their fresh initialization.
LoadReport load_into(Model& m, const std::string& path);
NamedTensors checkpoint_extras(const std::string& path, const std::string& prefix);

} // namespace stk
