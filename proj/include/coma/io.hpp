#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "coma/common.hpp"
#include "coma/tensor.hpp"

namespace coma {

// Tensor file format "CMT1": magic bytes, little-endian u32 dtype tag
// (0 = f32, 1 = f64), u32 rank, rank x u64 extents, raw LE values row-major.
// This code assumes a little-endian host.

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw io_error(std::string("truncated file while reading ") + what);
    return v;
}
inline std::uint64_t read_u64(std::istream& is, const char* what) {
    std::uint64_t v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw io_error(std::string("truncated file while reading ") + what);
    return v;
}

template <typename T>
constexpr std::uint32_t dtype_tag() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "tensors are float32 or float64");
    return std::is_same_v<T, float> ? 0u : 1u;
}

}  // namespace io

template <typename T>
void write_tensor_stream(std::ostream& os, const Tensor<T>& t) {
    os.write("CMT1", 4);
    io::write_u32(os, io::dtype_tag<T>());
    io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) io::write_u64(os, static_cast<std::uint64_t>(e));
    os.write(reinterpret_cast<const char*>(t.values().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(T)));
    if (!os) throw io_error("failed writing tensor data");
}

// Reads a CMT1 record; converts f32 <-> f64 when the file dtype differs from T.
template <typename T>
Tensor<T> read_tensor_stream(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4)) throw io_error("truncated file while reading tensor magic");
    if (std::memcmp(magic, "CMT1", 4) != 0) throw io_error("tensor magic mismatch");
    const std::uint32_t tag = io::read_u32(is, "dtype tag");
    if (tag > 1) throw io_error("unknown dtype tag " + std::to_string(tag));
    const std::uint32_t rank = io::read_u32(is, "rank");
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<std::size_t>(io::read_u64(is, "extent"));
        count *= shape[i];
    }
    std::vector<T> values(count);
    if (tag == io::dtype_tag<T>()) {
        if (!is.read(reinterpret_cast<char*>(values.data()),
                     static_cast<std::streamsize>(count * sizeof(T))))
            throw io_error("truncated tensor data");
    } else if (tag == 0) {
        std::vector<float> raw(count);
        if (!is.read(reinterpret_cast<char*>(raw.data()),
                     static_cast<std::streamsize>(count * sizeof(float))))
            throw io_error("truncated tensor data");
        for (std::size_t i = 0; i < count; ++i) values[i] = static_cast<T>(raw[i]);
    } else {
        std::vector<double> raw(count);
        if (!is.read(reinterpret_cast<char*>(raw.data()),
                     static_cast<std::streamsize>(count * sizeof(double))))
            throw io_error("truncated tensor data");
        for (std::size_t i = 0; i < count; ++i) values[i] = static_cast<T>(raw[i]);
    }
    return from_values<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    write_tensor_stream(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open for reading: " + path);
    return read_tensor_stream<T>(is);
}

// FNV-1a, used for dataset manifest checksums
inline std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open for checksum: " + path);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        const std::streamsize got = is.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001B3ULL;
        }
        if (got < static_cast<std::streamsize>(sizeof(buf))) break;
    }
    return h;
}

}  // namespace coma
