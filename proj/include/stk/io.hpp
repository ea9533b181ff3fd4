#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "stk/tensor.hpp"

namespace stk {

// "STK1" tensor file: magic, u32 rank, rank x u64 dims, f64 little-endian
// payload in row-major order.
void write_stk1(std::ostream& os, const Tensor& t);
Tensor read_stk1(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// "STKC" container: magic, u32 entry count, then per entry a u16 name
// length, the name bytes, and an STK1 tensor.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_stkc(const std::string& path, const NamedTensors& entries);
NamedTensors read_stkc(const std::string& path);

} // namespace stk
