#include "stk/common.hpp"

#include <cmath>

namespace stk {

const char* err_name(Err e) {
    switch (e) {
        case Err::ShapeMismatch: return "ShapeMismatch";
        case Err::NonFiniteInput: return "NonFiniteInput";
        case Err::NotScalar: return "NotScalar";
        case Err::EvenK: return "EvenK";
        case Err::IndivisibleSpatialDims: return "IndivisibleSpatialDims";
        case Err::IndivisibleInput: return "IndivisibleInput";
        case Err::HeadsDontDivide: return "HeadsDontDivide";
        case Err::EmptyOutput: return "EmptyOutput";
        case Err::InvalidConfig: return "InvalidConfig";
        case Err::CorruptCheckpoint: return "CorruptCheckpoint";
        case Err::NameMismatch: return "NameMismatch";
        case Err::DegenerateGrid: return "DegenerateGrid";
        case Err::EmptyMask: return "EmptyMask";
        case Err::LabelOutOfRange: return "LabelOutOfRange";
        case Err::EmptyDataset: return "EmptyDataset";
        case Err::SingleClass: return "SingleClass";
        case Err::NoPositives: return "NoPositives";
        case Err::LengthMismatch: return "LengthMismatch";
        case Err::UnknownLayer: return "UnknownLayer";
        case Err::ClassOutOfRange: return "ClassOutOfRange";
        case Err::IoError: return "IoError";
        case Err::CorruptManifest: return "CorruptManifest";
    }
    return "UnknownError";
}

Error::Error(Err kind, const std::string& msg)
    : std::runtime_error(std::string(err_name(kind)) + ": " + msg), kind_(kind) {}

void fail(Err kind, const std::string& msg) { throw Error(kind, msg); }

void require(bool cond, Err kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

double Rng::normal() {
    // Box-Muller; u clamped away from 0 so log stays finite.
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    double v = uniform();
    return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * 3.14159265358979323846 * v);
}

int64_t Rng::below(int64_t n) {
    // Lemire's multiply-shift; bias is negligible for n << 2^64.
    return static_cast<int64_t>((static_cast<__uint128_t>(next()) * static_cast<uint64_t>(n)) >> 64);
}

bool MacCounter::enabled = false;
uint64_t MacCounter::count = 0;

bool& debug_checks() {
    static bool v = false;
    return v;
}

bool& grad_enabled() {
    static thread_local bool v = true;
    return v;
}

} // namespace stk
