#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stk/layer.hpp"
#include "stk/model.hpp"

namespace stk {

// Reference cost targets for the committed default configuration; the
// `analyze --check-reference` gate accepts a ±10% window around these.
namespace reference {
inline constexpr double kDefaultParamsM = 2.1;
inline constexpr double kDefaultGmacs = 2.538;
inline constexpr double kNoDscParamsM = 1.933;
inline constexpr double kNoDscGmacs = 0.603;
inline constexpr double kCnnOnlyParamsM = 3.522; // V and S both off
inline constexpr double kTolerance = 0.10;
} // namespace reference

struct CostReport {
    std::vector<CostRow> rows;
    int64_t total_params = 0;
    int64_t total_macs = 0;

    double params_m() const { return static_cast<double>(total_params) / 1e6; }
    double gmacs() const { return static_cast<double>(total_macs) / 1e9; }
    std::string text_table() const;
    std::string to_json() const;
};

// Static per-layer accounting at the given input size (batch 1). Parameter
// counts come from the stored tensors and do not depend on input size.
CostReport analyze_model(const Model& m, int64_t input_h, int64_t input_w);

// Executes a real batch-1 forward pass in counting mode; by construction
// this must equal the static total exactly.
uint64_t instrumented_macs(Model& m, int64_t input_h, int64_t input_w);

} // namespace stk
