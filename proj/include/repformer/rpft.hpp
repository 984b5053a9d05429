#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "repformer/errors.hpp"
#include "repformer/tensor.hpp"

namespace repformer {

// Raw tensor container:
//   "RPFT" | u32 version | u32 dtype | u32 rank | u32 dims[rank] | payload
// All integers and payload values little-endian.
namespace rpft {

inline constexpr std::array<char, 4> kMagic{'R', 'P', 'F', 'T'};
inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint32_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                       static_cast<char>(v >> 24)};
    os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("unexpected end of stream");
    return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 |
           std::uint32_t{b[3]} << 24;
}

inline std::uint64_t get_u64(std::istream& is) {
    const std::uint64_t lo = get_u32(is);
    const std::uint64_t hi = get_u32(is);
    return lo | hi << 32;
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

inline void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
    const std::uint32_t n = get_u32(is);
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n)) throw IoError("unexpected end of stream");
    return s;
}

/// Untyped payload as read from disk.
struct Blob {
    DType dtype = DType::f32;
    Shape shape;
    std::vector<double> values;
};

template <typename T>
void write(std::ostream& os, const Shape& shape, std::span<const T> values) {
    os.write(kMagic.data(), 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(dtype_of<T>()));
    put_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_u32(os, static_cast<std::uint32_t>(d));
    for (T v : values) {
        if constexpr (std::is_same_v<T, float>) put_u32(os, std::bit_cast<std::uint32_t>(v));
        else put_u64(os, std::bit_cast<std::uint64_t>(v));
    }
    if (!os) throw IoError("failed writing tensor container");
}

template <typename T>
void write(std::ostream& os, const Tensor<T>& t) {
    write<T>(os, t.shape(), t.data());
}

inline Blob read_blob(std::istream& is) {
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), 4) || magic != kMagic) throw IoError("not an RPFT container (bad magic)");
    const std::uint32_t version = get_u32(is);
    if (version != kVersion) throw IoError("unsupported RPFT version " + std::to_string(version));
    Blob b;
    const std::uint32_t tag = get_u32(is);
    if (tag != 1 && tag != 2) throw IoError("unknown RPFT dtype tag " + std::to_string(tag));
    b.dtype = static_cast<DType>(tag);
    const std::uint32_t rank = get_u32(is);
    if (rank > 16) throw IoError("implausible RPFT rank " + std::to_string(rank));
    for (std::uint32_t i = 0; i < rank; ++i) b.shape.push_back(get_u32(is));
    const std::size_t n = numel(b.shape);
    b.values.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        b.values[i] = b.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(get_u32(is)))
                                            : std::bit_cast<double>(get_u64(is));
    return b;
}

/// Reads a tensor, converting the stored dtype to T if necessary.
template <typename T>
Tensor<T> read(std::istream& is) {
    Blob b = read_blob(is);
    std::vector<T> v(b.values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(b.values[i]);
    return Tensor<T>(std::move(b.shape), std::move(v));
}

template <typename T>
void save(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write(os, t);
}

template <typename T>
Tensor<T> load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    return read<T>(is);
}

}  // namespace rpft
}  // namespace repformer
