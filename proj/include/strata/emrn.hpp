#pragma once

#include <string>

#include "strata/tensor.hpp"

namespace strata::emrn {

// EMRN tensor container, the on-disk format used repo-wide.
// Layout: magic "EMRN" | u32 version=1 | u8 dtype | u8 ndim | u16 reserved=0
//         | ndim x u64 extents | row-major little-endian payload.
enum class Dtype : std::uint8_t { f32 = 0, f64 = 1, u8 = 2, i64 = 3 };

inline size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::f32: return 4;
        case Dtype::f64: return 8;
        case Dtype::u8: return 1;
        case Dtype::i64: return 8;
    }
    fail("bad dtype");
}

// Raw container record; `bytes` is the payload exactly as stored.
struct Record {
    Dtype dtype = Dtype::f64;
    Shape shape;
    std::vector<unsigned char> bytes;

    i64 count() const { return numel(shape); }
};

void write(const std::string& path, const Record& rec);
Record read(const std::string& path);

// Typed helpers. Writing a Tensor as f32 narrows; reading widens back to f64.
void write_tensor(const std::string& path, const Tensor& t, Dtype as = Dtype::f64);
Tensor read_tensor(const std::string& path);

void write_u8(const std::string& path, const std::vector<std::uint8_t>& v, Shape shape);
std::vector<std::uint8_t> read_u8(const std::string& path, Shape* shape = nullptr);

void write_i64(const std::string& path, const std::vector<i64>& v, Shape shape);
std::vector<i64> read_i64(const std::string& path, Shape* shape = nullptr);

}  // namespace strata::emrn
