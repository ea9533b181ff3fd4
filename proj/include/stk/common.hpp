#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace stk {

// Error kinds used across the kit. Exceptions carry one of these so tests
// and the CLI can react to the category rather than parse messages.
enum class Err {
    ShapeMismatch,
    NonFiniteInput,
    NotScalar,
    EvenK,
    IndivisibleSpatialDims,
    IndivisibleInput,
    HeadsDontDivide,
    EmptyOutput,
    InvalidConfig,
    CorruptCheckpoint,
    NameMismatch,
    DegenerateGrid,
    EmptyMask,
    LabelOutOfRange,
    EmptyDataset,
    SingleClass,
    NoPositives,
    LengthMismatch,
    UnknownLayer,
    ClassOutOfRange,
    IoError,
    CorruptManifest,
};

const char* err_name(Err e);

class Error : public std::runtime_error {
public:
    Error(Err kind, const std::string& msg);
    Err kind() const { return kind_; }

private:
    Err kind_;
};

[[noreturn]] void fail(Err kind, const std::string& msg);

void require(bool cond, Err kind, const std::string& msg);

// Deterministic RNG (splitmix64). All randomness in the kit flows through
// this so that a seed pins every artifact byte-for-byte; the C++ standard
// distributions are implementation-defined and must not be used.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed) : state(seed) {}

    uint64_t next() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal, Box-Muller (no caching: keeps the stream position a
    // pure function of how many values were drawn)
    double normal();

    // integer in [0, n)
    int64_t below(int64_t n);

    // derive an independent stream
    Rng fork(uint64_t salt) { return Rng(next() ^ (0xd1342543de82ef95ULL * (salt + 1))); }
};

// Multiply-accumulate instrumentation. Ops that perform multiplies by
// convention (conv, matmul, bilinear sampling) bump this counter when
// enabled; the static cost analyzer must agree with it exactly.
struct MacCounter {
    static bool enabled;
    static uint64_t count;
    static void reset() { count = 0; }
};

inline void count_macs(uint64_t n) {
    if (MacCounter::enabled) MacCounter::count += n;
}

struct MacCountGuard {
    MacCountGuard() {
        MacCounter::enabled = true;
        MacCounter::count = 0;
    }
    ~MacCountGuard() { MacCounter::enabled = false; }
};

// Debug-mode NaN/Inf screening after ops (off by default: it is O(n) per op).
bool& debug_checks();

// Thread-local autograd mode. When off, ops do not record tape nodes.
bool& grad_enabled();

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
};

} // namespace stk
