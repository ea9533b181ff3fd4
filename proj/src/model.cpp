#include "stk/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>

namespace stk {

using nlohmann::json;

void ModelConfig::validate() const {
    auto positive = [](int64_t v, const char* field) {
        require(v >= 1, Err::InvalidConfig, std::string(field) + " must be positive");
    };
    require(input_h >= 32 && input_w >= 32 && input_h % 32 == 0 && input_w % 32 == 0,
            Err::InvalidConfig, "input_size must be a positive multiple of 32");
    if (head == HeadMode::Multiclass)
        require(num_classes >= 2, Err::InvalidConfig,
                "num_classes must be >= 2 for the multiclass head");
    else
        require(num_classes >= 1, Err::InvalidConfig,
                "num_classes must be >= 1 for the multilabel head");
    positive(stem_ch, "stem_ch");
    positive(stage1.out_ch, "stage1.out_ch");
    positive(stage1.blocks, "stage1.blocks");
    positive(stage2.out_ch, "stage2.out_ch");
    positive(stage2.blocks, "stage2.blocks");
    positive(ds_out_ch, "ds.out_ch");
    positive(dsc_branch_ch, "ds.branch_ch");
    require(dsc_kernel_points >= 3 && dsc_kernel_points % 2 == 1, Err::InvalidConfig,
            "ds.kernel_points must be an odd integer >= 3");
    positive(stage3.dim, "stage3.dim");
    positive(stage3.depth, "stage3.depth");
    positive(stage3.patch, "stage3.patch");
    positive(stage4.dim, "stage4.dim");
    positive(stage4.depth, "stage4.depth");
    positive(stage4.patch, "stage4.patch");
    positive(heads, "heads");
    require(stage3.dim % heads == 0, Err::InvalidConfig, "stage3.dim must be divisible by heads");
    require(stage4.dim % heads == 0, Err::InvalidConfig, "stage4.dim must be divisible by heads");
    require(ffn_ratio > 0, Err::InvalidConfig, "ffn_ratio must be positive");
    require(expansion > 0, Err::InvalidConfig, "expansion must be positive");
    positive(voff_stage3.out_ch, "voff_stage3.out_ch");
    positive(voff_stage3.blocks, "voff_stage3.blocks");
    positive(voff_stage4.out_ch, "voff_stage4.out_ch");
    positive(voff_stage4.blocks, "voff_stage4.blocks");
    if (vit_enabled) {
        int64_t h3 = input_h / 16, w3 = input_w / 16; // stage-3 token map
        require(h3 % stage3.patch == 0 && w3 % stage3.patch == 0, Err::InvalidConfig,
                "stage3.patch must divide the stage-3 token map " + std::to_string(h3) + "x" +
                    std::to_string(w3));
        int64_t h4 = input_h / 32, w4 = input_w / 32;
        require(h4 % stage4.patch == 0 && w4 % stage4.patch == 0, Err::InvalidConfig,
                "stage4.patch must divide the stage-4 token map " + std::to_string(h4) + "x" +
                    std::to_string(w4));
    }
}

int64_t ModelConfig::ffn_hidden(int64_t dim) const {
    return std::max<int64_t>(1, static_cast<int64_t>(std::llround(ffn_ratio * static_cast<double>(dim))));
}

ModelConfig ModelConfig::default_224() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny_64() {
    ModelConfig c;
    c.input_h = c.input_w = 64;
    c.num_classes = 2;
    c.stem_ch = 8;
    c.stage1 = {12, 1};
    c.stage2 = {16, 1};
    c.ds_out_ch = 32;
    c.dsc_branch_ch = 16;
    c.dsc_kernel_points = 9;
    c.stage3 = {32, 2, 2};
    c.stage4 = {48, 3, 1};
    c.heads = 4;
    c.voff_stage3 = {32, 1};
    c.voff_stage4 = {48, 1};
    return c;
}

ModelConfig ModelConfig::tiny_gradcheck_32() {
    ModelConfig c;
    c.input_h = c.input_w = 32;
    c.num_classes = 2;
    c.stem_ch = 4;
    c.stage1 = {8, 1};
    c.stage2 = {8, 1};
    c.ds_out_ch = 16;
    c.dsc_branch_ch = 8;
    c.dsc_kernel_points = 3;
    c.stage3 = {16, 1, 2};
    c.stage4 = {16, 1, 1};
    c.heads = 4;
    c.voff_stage3 = {16, 1};
    c.voff_stage4 = {16, 1};
    return c;
}

namespace {

void check_keys(const json& j, const std::string& where,
                const std::set<std::string>& allowed) {
    require(j.is_object(), Err::InvalidConfig, where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        require(allowed.count(it.key()) > 0, Err::InvalidConfig,
                "unknown key '" + it.key() + "' in " + where);
}

StagePlan stage_from_json(const json& j, const std::string& where) {
    check_keys(j, where, {"out_ch", "blocks"});
    StagePlan s;
    if (j.contains("out_ch")) s.out_ch = j["out_ch"].get<int64_t>();
    if (j.contains("blocks")) s.blocks = j["blocks"].get<int64_t>();
    return s;
}

VitPlan vit_from_json(const json& j, const std::string& where) {
    check_keys(j, where, {"dim", "depth", "patch"});
    VitPlan v;
    if (j.contains("dim")) v.dim = j["dim"].get<int64_t>();
    if (j.contains("depth")) v.depth = j["depth"].get<int64_t>();
    if (j.contains("patch")) v.patch = j["patch"].get<int64_t>();
    return v;
}

json stage_to_json(const StagePlan& s) { return json{{"out_ch", s.out_ch}, {"blocks", s.blocks}}; }
json vit_to_json(const VitPlan& v) {
    return json{{"dim", v.dim}, {"depth", v.depth}, {"patch", v.patch}};
}

} // namespace

std::string config_to_json(const ModelConfig& c) {
    json j;
    j["input_size"] = {c.input_h, c.input_w};
    j["num_classes"] = c.num_classes;
    j["head"] = c.head == HeadMode::Multiclass ? "multiclass" : "multilabel";
    j["stem_ch"] = c.stem_ch;
    j["stage1"] = stage_to_json(c.stage1);
    j["stage2"] = stage_to_json(c.stage2);
    j["ds"] = json{{"out_ch", c.ds_out_ch},
                   {"branch_ch", c.dsc_branch_ch},
                   {"kernel_points", c.dsc_kernel_points}};
    j["stage3"] = vit_to_json(c.stage3);
    j["stage4"] = vit_to_json(c.stage4);
    j["heads"] = c.heads;
    j["ffn_ratio"] = c.ffn_ratio;
    j["expansion"] = c.expansion;
    j["voff_stage3"] = stage_to_json(c.voff_stage3);
    j["voff_stage4"] = stage_to_json(c.voff_stage4);
    j["flags"] = json{{"dsc", c.dsc_enabled}, {"vit", c.vit_enabled}};
    j["pretrained_init"] = c.pretrained_init;
    j["seed"] = c.seed;
    return j.dump(2);
}

ModelConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(Err::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
    }
    check_keys(j, "config",
               {"input_size", "num_classes", "head", "stem_ch", "stage1", "stage2", "ds", "stage3",
                "stage4", "heads", "ffn_ratio", "expansion", "voff_stage3", "voff_stage4", "flags",
                "pretrained_init", "seed"});
    ModelConfig c = ModelConfig::default_224();
    try {
        if (j.contains("input_size")) {
            auto v = j["input_size"];
            require(v.is_array() && v.size() == 2, Err::InvalidConfig,
                    "input_size must be [H, W]");
            c.input_h = v[0].get<int64_t>();
            c.input_w = v[1].get<int64_t>();
        }
        if (j.contains("num_classes")) c.num_classes = j["num_classes"].get<int64_t>();
        if (j.contains("head")) {
            std::string h = j["head"].get<std::string>();
            require(h == "multiclass" || h == "multilabel", Err::InvalidConfig,
                    "head must be 'multiclass' or 'multilabel'");
            c.head = h == "multiclass" ? HeadMode::Multiclass : HeadMode::Multilabel;
        }
        if (j.contains("stem_ch")) c.stem_ch = j["stem_ch"].get<int64_t>();
        if (j.contains("stage1")) c.stage1 = stage_from_json(j["stage1"], "stage1");
        if (j.contains("stage2")) c.stage2 = stage_from_json(j["stage2"], "stage2");
        if (j.contains("ds")) {
            check_keys(j["ds"], "ds", {"out_ch", "branch_ch", "kernel_points"});
            if (j["ds"].contains("out_ch")) c.ds_out_ch = j["ds"]["out_ch"].get<int64_t>();
            if (j["ds"].contains("branch_ch"))
                c.dsc_branch_ch = j["ds"]["branch_ch"].get<int64_t>();
            if (j["ds"].contains("kernel_points"))
                c.dsc_kernel_points = j["ds"]["kernel_points"].get<int64_t>();
        }
        if (j.contains("stage3")) c.stage3 = vit_from_json(j["stage3"], "stage3");
        if (j.contains("stage4")) c.stage4 = vit_from_json(j["stage4"], "stage4");
        if (j.contains("heads")) c.heads = j["heads"].get<int64_t>();
        if (j.contains("ffn_ratio")) c.ffn_ratio = j["ffn_ratio"].get<double>();
        if (j.contains("expansion")) c.expansion = j["expansion"].get<double>();
        if (j.contains("voff_stage3"))
            c.voff_stage3 = stage_from_json(j["voff_stage3"], "voff_stage3");
        if (j.contains("voff_stage4"))
            c.voff_stage4 = stage_from_json(j["voff_stage4"], "voff_stage4");
        if (j.contains("flags")) {
            check_keys(j["flags"], "flags", {"dsc", "vit"});
            if (j["flags"].contains("dsc")) c.dsc_enabled = j["flags"]["dsc"].get<bool>();
            if (j["flags"].contains("vit")) c.vit_enabled = j["flags"]["vit"].get<bool>();
        }
        if (j.contains("pretrained_init"))
            c.pretrained_init = j["pretrained_init"].get<std::string>();
        if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    } catch (const json::exception& e) {
        fail(Err::InvalidConfig, std::string("config field has wrong type: ") + e.what());
    }
    c.validate();
    return c;
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);

    auto add = [&](std::string name, std::unique_ptr<Layer> l) {
        layers_.emplace_back(std::move(name), std::move(l));
    };

    add("stem",
        std::make_unique<ConvBnAct>(3, cfg_.stem_ch, 3, 3, Conv2dSpec{2, 2, 1, 1, 1}, true, true,
                                    rng));
    int64_t ch = cfg_.stem_ch;
    int64_t h = (cfg_.input_h + 1) / 2, w = (cfg_.input_w + 1) / 2;

    for (int64_t b = 0; b < cfg_.stage1.blocks; ++b) {
        int64_t stride = b == 0 ? 2 : 1;
        add("stage1." + std::to_string(b),
            std::make_unique<IrlbBlock>(ch, cfg_.stage1.out_ch, stride, cfg_.expansion, rng));
        ch = cfg_.stage1.out_ch;
    }
    h = (h + 1) / 2;
    w = (w + 1) / 2;

    for (int64_t b = 0; b < cfg_.stage2.blocks; ++b) {
        add("stage2." + std::to_string(b),
            std::make_unique<IrlbBlock>(ch, cfg_.stage2.out_ch, 1, cfg_.expansion, rng));
        ch = cfg_.stage2.out_ch;
    }

    // stage-2 downsampling: the snake-conv block (flag S), or its IRLB stand-in
    if (cfg_.dsc_enabled)
        add("ds2", std::make_unique<DscBlock>(ch, cfg_.ds_out_ch, cfg_.dsc_branch_ch,
                                              cfg_.dsc_kernel_points, rng));
    else
        add("ds2", std::make_unique<IrlbBlock>(ch, cfg_.ds_out_ch, 2, cfg_.expansion, rng));
    ch = cfg_.ds_out_ch;
    h = (h + 1) / 2;
    w = (w + 1) / 2;

    if (cfg_.vit_enabled) {
        add("stage3.0",
            std::make_unique<HybridBlock>(ch, cfg_.stage3.dim, cfg_.stage3.depth, cfg_.heads,
                                          cfg_.ffn_hidden(cfg_.stage3.dim), cfg_.stage3.patch,
                                          cfg_.stage3.patch, h, w, rng));
        ch = cfg_.stage3.dim;
        h = (h + 1) / 2;
        w = (w + 1) / 2;
        add("stage4.0",
            std::make_unique<HybridBlock>(ch, cfg_.stage4.dim, cfg_.stage4.depth, cfg_.heads,
                                          cfg_.ffn_hidden(cfg_.stage4.dim), cfg_.stage4.patch,
                                          cfg_.stage4.patch, h, w, rng));
        ch = cfg_.stage4.dim;
    } else {
        for (int64_t b = 0; b < cfg_.voff_stage3.blocks; ++b) {
            add("stage3." + std::to_string(b),
                std::make_unique<IrlbBlock>(ch, cfg_.voff_stage3.out_ch, b == 0 ? 2 : 1,
                                            cfg_.expansion, rng));
            ch = cfg_.voff_stage3.out_ch;
        }
        for (int64_t b = 0; b < cfg_.voff_stage4.blocks; ++b) {
            add("stage4." + std::to_string(b),
                std::make_unique<IrlbBlock>(ch, cfg_.voff_stage4.out_ch, b == 0 ? 2 : 1,
                                            cfg_.expansion, rng));
            ch = cfg_.voff_stage4.out_ch;
        }
    }

    feature_ch_ = ch;
    head_w = kaiming_uniform({ch, cfg_.num_classes}, ch, rng);
    head_b = Tensor::zeros({cfg_.num_classes}, true);
}

Tensor Model::features(const Tensor& x, bool training, NamedTensors* taps) {
    require(x.rank() == 4 && x.dim(1) == 3, Err::ShapeMismatch,
            "model: input must be [N,3,H,W], got " + shape_str(x.shape()));
    require(x.dim(2) % 32 == 0 && x.dim(3) % 32 == 0, Err::IndivisibleInput,
            "model: input spatial dims must be divisible by 32");
    Tensor h = x;
    for (auto& [name, layer] : layers_) {
        h = layer->forward(h, training);
        if (taps) taps->emplace_back(name, h);
    }
    return h;
}

Tensor Model::forward(const Tensor& x, bool training, NamedTensors* taps) {
    Tensor f = features(x, training, taps);
    Tensor pooled = global_avg_pool2d(f);
    if (taps) taps->emplace_back("pool", pooled);
    return linear(pooled, head_w, head_b);
}

NamedTensors Model::params() const {
    NamedTensors p, b;
    for (const auto& [name, layer] : layers_) layer->collect(name, p, b);
    p.emplace_back("head.weight", head_w);
    p.emplace_back("head.bias", head_b);
    std::set<std::string> seen;
    for (const auto& [name, t] : p)
        require(seen.insert(name).second, Err::InvalidConfig, "duplicate parameter name " + name);
    return p;
}

NamedTensors Model::buffers() const {
    NamedTensors p, b;
    for (const auto& [name, layer] : layers_) layer->collect(name, p, b);
    return b;
}

std::vector<std::string> Model::layer_names() const {
    std::vector<std::string> names;
    for (const auto& [name, layer] : layers_) names.push_back(name);
    return names;
}

std::vector<CostRow> Model::cost_rows(int64_t input_h, int64_t input_w) const {
    std::vector<CostRow> rows;
    std::vector<int64_t> shape = {3, input_h, input_w};
    for (const auto& [name, layer] : layers_) layer->cost(name, rows, shape);
    rows.push_back({"head", feature_ch_ * cfg_.num_classes + cfg_.num_classes,
                    feature_ch_ * cfg_.num_classes, {cfg_.num_classes}});
    return rows;
}

namespace {

Tensor string_to_tensor(const std::string& s) {
    std::vector<double> data(s.size());
    for (size_t i = 0; i < s.size(); ++i) data[i] = static_cast<double>(static_cast<unsigned char>(s[i]));
    return Tensor::create({static_cast<int64_t>(s.size())}, std::move(data));
}

std::string tensor_to_string(const Tensor& t) {
    std::string s(static_cast<size_t>(t.numel()), '\0');
    for (size_t i = 0; i < s.size(); ++i) s[i] = static_cast<char>(static_cast<unsigned char>(t.data()[i]));
    return s;
}

constexpr const char* kConfigEntry = "__config__";

} // namespace

void save_checkpoint(const Model& m, const std::string& path, const NamedTensors& extra) {
    NamedTensors entries;
    entries.emplace_back(kConfigEntry, string_to_tensor(config_to_json(m.config())));
    for (auto& e : m.params()) entries.push_back(e);
    for (auto& e : m.buffers()) entries.push_back(e);
    for (auto& e : extra) entries.push_back(e);
    write_stkc(path, entries);
}

Model load_checkpoint(const std::string& path) {
    NamedTensors entries = read_stkc(path);
    const Tensor* cfg_tensor = nullptr;
    for (auto& [name, t] : entries)
        if (name == kConfigEntry) cfg_tensor = &t;
    require(cfg_tensor != nullptr, Err::CorruptCheckpoint, "checkpoint has no config entry");
    ModelConfig cfg;
    try {
        cfg = config_from_json(tensor_to_string(*cfg_tensor));
    } catch (const Error&) {
        fail(Err::CorruptCheckpoint, "checkpoint config entry is invalid");
    }
    Model m(cfg);
    NamedTensors own = m.params();
    for (auto& e : m.buffers()) own.push_back(e);
    for (auto& [name, t] : own) {
        bool found = false;
        for (auto& [ename, et] : entries)
            if (ename == name) {
                require(et.shape() == t.shape(), Err::CorruptCheckpoint,
                        "checkpoint entry " + name + " has wrong shape");
                t.mutable_data() = et.data();
                found = true;
                break;
            }
        require(found, Err::CorruptCheckpoint, "checkpoint is missing entry " + name);
    }
    return m;
}

LoadReport load_into(Model& m, const std::string& path) {
    NamedTensors entries = read_stkc(path);
    LoadReport report;
    NamedTensors own = m.params();
    for (auto& e : m.buffers()) own.push_back(e);
    std::set<std::string> used;
    for (auto& [name, t] : own) {
        bool found = false;
        for (auto& [ename, et] : entries)
            if (ename == name && et.shape() == t.shape()) {
                t.mutable_data() = et.data();
                found = true;
                used.insert(ename);
                break;
            }
        (found ? report.matched : report.missing).push_back(name);
    }
    for (auto& [ename, et] : entries)
        if (ename != kConfigEntry && !used.count(ename)) report.unexpected.push_back(ename);
    return report;
}

NamedTensors checkpoint_extras(const std::string& path, const std::string& prefix) {
    NamedTensors entries = read_stkc(path);
    NamedTensors out;
    for (auto& [name, t] : entries)
        if (name.rfind(prefix, 0) == 0) out.emplace_back(name, t);
    return out;
}

} // namespace stk
