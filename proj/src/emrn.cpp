#include "strata/emrn.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace strata::emrn {

static_assert(std::endian::native == std::endian::little,
              "EMRN i/o assumes a little-endian host");

namespace {

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    require(static_cast<bool>(is), "EMRN: truncated header in ", path);
    return v;
}

}  // namespace

void write(const std::string& path, const Record& rec) {
    require(rec.bytes.size() == static_cast<size_t>(rec.count()) * dtype_size(rec.dtype),
            "EMRN write: payload size mismatch for ", path);
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), "EMRN: cannot open ", path, " for writing");
    os.write("EMRN", 4);
    put<u32>(os, 1);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(rec.dtype));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(rec.shape.size()));
    put<std::uint16_t>(os, 0);
    for (i64 d : rec.shape) put<u64>(os, static_cast<u64>(d));
    os.write(reinterpret_cast<const char*>(rec.bytes.data()),
             static_cast<std::streamsize>(rec.bytes.size()));
    require(static_cast<bool>(os), "EMRN: short write to ", path);
}

Record read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "EMRN: cannot open ", path);
    char magic[4];
    is.read(magic, 4);
    require(static_cast<bool>(is) && std::memcmp(magic, "EMRN", 4) == 0,
            "EMRN: bad magic in ", path);
    u32 version = get<u32>(is, path);
    require(version == 1, "EMRN: unsupported version ", version, " in ", path);
    auto dtype_raw = get<std::uint8_t>(is, path);
    require(dtype_raw <= 3, "EMRN: unknown dtype ", int(dtype_raw), " in ", path);
    Record rec;
    rec.dtype = static_cast<Dtype>(dtype_raw);
    auto ndim = get<std::uint8_t>(is, path);
    auto reserved = get<std::uint16_t>(is, path);
    require(reserved == 0, "EMRN: nonzero reserved field in ", path);
    for (int i = 0; i < ndim; ++i) rec.shape.push_back(static_cast<i64>(get<u64>(is, path)));
    size_t payload = static_cast<size_t>(rec.count()) * dtype_size(rec.dtype);
    rec.bytes.resize(payload);
    is.read(reinterpret_cast<char*>(rec.bytes.data()), static_cast<std::streamsize>(payload));
    require(static_cast<bool>(is) || payload == 0, "EMRN: truncated payload in ", path);
    return rec;
}

void write_tensor(const std::string& path, const Tensor& t, Dtype as) {
    require(t.defined(), "EMRN write_tensor: undefined tensor for ", path);
    Record rec;
    rec.dtype = as;
    rec.shape = t.shape;
    i64 n = t.size();
    rec.bytes.resize(static_cast<size_t>(n) * dtype_size(as));
    if (as == Dtype::f64) {
        std::memcpy(rec.bytes.data(), t.data(), static_cast<size_t>(n) * 8);
    } else if (as == Dtype::f32) {
        auto* out = reinterpret_cast<float*>(rec.bytes.data());
        for (i64 i = 0; i < n; ++i) out[i] = static_cast<float>(t.at(i));
    } else {
        fail("EMRN write_tensor: tensors store as f32 or f64 only");
    }
    write(path, rec);
}

Tensor read_tensor(const std::string& path) {
    Record rec = read(path);
    Tensor t = Tensor::zeros(rec.shape);
    i64 n = t.size();
    if (rec.dtype == Dtype::f64) {
        std::memcpy(t.data(), rec.bytes.data(), static_cast<size_t>(n) * 8);
    } else if (rec.dtype == Dtype::f32) {
        auto* in = reinterpret_cast<const float*>(rec.bytes.data());
        for (i64 i = 0; i < n; ++i) t.data()[i] = static_cast<double>(in[i]);
    } else {
        fail("EMRN read_tensor: ", path, " holds integer data, not a float tensor");
    }
    return t;
}

void write_u8(const std::string& path, const std::vector<std::uint8_t>& v, Shape shape) {
    Record rec;
    rec.dtype = Dtype::u8;
    rec.shape = std::move(shape);
    rec.bytes.assign(v.begin(), v.end());
    write(path, rec);
}

std::vector<std::uint8_t> read_u8(const std::string& path, Shape* shape) {
    Record rec = read(path);
    require(rec.dtype == Dtype::u8, "EMRN: ", path, " is not u8");
    if (shape) *shape = rec.shape;
    return std::vector<std::uint8_t>(rec.bytes.begin(), rec.bytes.end());
}

void write_i64(const std::string& path, const std::vector<i64>& v, Shape shape) {
    Record rec;
    rec.dtype = Dtype::i64;
    rec.shape = std::move(shape);
    rec.bytes.resize(v.size() * 8);
    std::memcpy(rec.bytes.data(), v.data(), rec.bytes.size());
    write(path, rec);
}

std::vector<i64> read_i64(const std::string& path, Shape* shape) {
    Record rec = read(path);
    require(rec.dtype == Dtype::i64, "EMRN: ", path, " is not i64");
    if (shape) *shape = rec.shape;
    std::vector<i64> v(static_cast<size_t>(rec.count()));
    std::memcpy(v.data(), rec.bytes.data(), rec.bytes.size());
    return v;
}

}  // namespace strata::emrn
