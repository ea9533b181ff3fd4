#include "stk/io.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace stk {

namespace {

void put_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_u16(std::ostream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    put_bytes(os, b, 2);
}

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    put_bytes(os, b, 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    put_bytes(os, b, 8);
}

void put_f64(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

bool get_bytes(std::istream& is, void* p, size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    return static_cast<size_t>(is.gcount()) == n;
}

uint16_t get_u16(std::istream& is, Err on_fail) {
    unsigned char b[2];
    require(get_bytes(is, b, 2), on_fail, "truncated file");
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& is, Err on_fail) {
    unsigned char b[4];
    require(get_bytes(is, b, 4), on_fail, "truncated file");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t get_u64(std::istream& is, Err on_fail) {
    unsigned char b[8];
    require(get_bytes(is, b, 8), on_fail, "truncated file");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

double get_f64(std::istream& is, Err on_fail) {
    uint64_t bits = get_u64(is, on_fail);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

Tensor read_stk1_impl(std::istream& is, Err on_fail) {
    char magic[4];
    require(get_bytes(is, magic, 4), on_fail, "missing STK1 magic");
    require(std::memcmp(magic, "STK1", 4) == 0, on_fail, "bad STK1 magic");
    uint32_t rank = get_u32(is, on_fail);
    require(rank <= 8, on_fail, "implausible tensor rank");
    std::vector<int64_t> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        uint64_t d = get_u64(is, on_fail);
        require(d >= 1 && d <= (1ULL << 32), on_fail, "implausible dimension");
        shape[i] = static_cast<int64_t>(d);
    }
    int64_t n = shape_numel(shape);
    std::vector<double> data(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i)] = get_f64(is, on_fail);
    return Tensor::create(std::move(shape), std::move(data));
}

} // namespace

void write_stk1(std::ostream& os, const Tensor& t) {
    put_bytes(os, "STK1", 4);
    put_u32(os, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) put_u64(os, static_cast<uint64_t>(d));
    for (double v : t.data()) put_f64(os, v);
}

Tensor read_stk1(std::istream& is) { return read_stk1_impl(is, Err::IoError); }

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), Err::IoError, "cannot open for write: " + path);
    write_stk1(os, t);
    require(os.good(), Err::IoError, "write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), Err::IoError, "cannot open: " + path);
    return read_stk1(is);
}

void write_stkc(const std::string& path, const NamedTensors& entries) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), Err::IoError, "cannot open for write: " + path);
    put_bytes(os, "STKC", 4);
    put_u32(os, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, tensor] : entries) {
        require(name.size() <= 0xffff, Err::InvalidConfig, "entry name too long: " + name);
        put_u16(os, static_cast<uint16_t>(name.size()));
        put_bytes(os, name.data(), name.size());
        write_stk1(os, tensor);
    }
    require(os.good(), Err::IoError, "write failed: " + path);
}

NamedTensors read_stkc(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), Err::IoError, "cannot open: " + path);
    char magic[4];
    require(get_bytes(is, magic, 4), Err::CorruptCheckpoint, "missing STKC magic");
    require(std::memcmp(magic, "STKC", 4) == 0, Err::CorruptCheckpoint, "bad STKC magic");
    uint32_t count = get_u32(is, Err::CorruptCheckpoint);
    NamedTensors entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t len = get_u16(is, Err::CorruptCheckpoint);
        std::string name(len, '\0');
        require(get_bytes(is, name.data(), len), Err::CorruptCheckpoint, "truncated entry name");
        Tensor t = read_stk1_impl(is, Err::CorruptCheckpoint);
        entries.emplace_back(std::move(name), std::move(t));
    }
    return entries;
}

} // namespace stk
