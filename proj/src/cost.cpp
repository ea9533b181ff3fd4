#include "stk/cost.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace stk {

CostReport analyze_model(const Model& m, int64_t input_h, int64_t input_w) {
    CostReport r;
    r.rows = m.cost_rows(input_h, input_w);
    for (const auto& row : r.rows) {
        r.total_params += row.params;
        r.total_macs += row.macs;
    }
    return r;
}

std::string CostReport::text_table() const {
    size_t name_w = 5;
    for (const auto& row : rows) name_w = std::max(name_w, row.name.size());
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s %12s %14s  %s\n", static_cast<int>(name_w), "layer",
                  "params", "MACs", "output");
    os << buf;
    for (const auto& row : rows) {
        std::string shape = shape_str(row.out_shape);
        std::snprintf(buf, sizeof buf, "%-*s %12lld %14lld  %s\n", static_cast<int>(name_w),
                      row.name.c_str(), static_cast<long long>(row.params),
                      static_cast<long long>(row.macs), shape.c_str());
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "%-*s %12lld %14lld\n", static_cast<int>(name_w), "total",
                  static_cast<long long>(total_params), static_cast<long long>(total_macs));
    os << buf;
    std::snprintf(buf, sizeof buf, "%.3f M params, %.3f GMac\n", params_m(), gmacs());
    os << buf;
    return os.str();
}

std::string CostReport::to_json() const {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto& row : rows)
        j["rows"].push_back({{"name", row.name},
                             {"params", row.params},
                             {"macs", row.macs},
                             {"out_shape", row.out_shape}});
    j["total_params"] = total_params;
    j["total_macs"] = total_macs;
    j["params_m"] = params_m();
    j["gmacs"] = gmacs();
    return j.dump(2);
}

uint64_t instrumented_macs(Model& m, int64_t input_h, int64_t input_w) {
    Rng rng(12345);
    Tensor x = Tensor::rand_uniform({1, 3, input_h, input_w}, rng, 0, 1);
    NoGradGuard no_grad;
    MacCountGuard counter;
    m.forward(x, /*training=*/false);
    return MacCounter::count;
}

} // namespace stk
