#pragma once

// Little-endian container for named float64 arrays.
//
//   magic   "DVCE" (4 bytes)
//   u32     format version (1)
//   u32     array count
//   per array:
//     u32   name length, then the name bytes (no terminator)
//     u32   rank, then rank x u64 dims
//     f64   product(dims) values, row-major

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "docvce/tensor.hpp"

namespace docvce {

inline constexpr char kContainerMagic[4] = {'D', 'V', 'C', 'E'};
inline constexpr std::uint32_t kContainerVersion = 1;

class ModelFileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NamedArray {
    std::string name;
    Tensor tensor;
};

using ArrayBundle = std::vector<NamedArray>;

inline const Tensor& find_array(const ArrayBundle& bundle, const std::string& name) {
    for (const auto& a : bundle) {
        if (a.name == name) return a.tensor;
    }
    throw ModelFileError("container: missing array '" + name + "'");
}

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw ModelFileError("container: truncated file");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void write_container(std::ostream& os, const ArrayBundle& bundle) {
    os.write(kContainerMagic, 4);
    detail::put_le<std::uint32_t>(os, kContainerVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(bundle.size()));
    for (const auto& [name, tensor] : bundle) {
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.rank()));
        for (std::size_t d : tensor.shape()) detail::put_le<std::uint64_t>(os, d);
        for (double v : tensor.values()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
    if (!os) throw ModelFileError("container: write failed");
}

inline ArrayBundle read_container(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != std::string(kContainerMagic, 4)) {
        throw ModelFileError("container: bad magic");
    }
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kContainerVersion) {
        throw ModelFileError("container: unsupported version " + std::to_string(version));
    }
    const auto count = detail::get_le<std::uint32_t>(is);
    ArrayBundle bundle;
    for (std::uint32_t a = 0; a < count; ++a) {
        const auto len = detail::get_le<std::uint32_t>(is);
        if (len > (1u << 16)) throw ModelFileError("container: implausible name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw ModelFileError("container: truncated name");
        const auto rank = detail::get_le<std::uint32_t>(is);
        if (rank > 16) throw ModelFileError("container: implausible rank");
        Shape shape(rank);
        for (auto& d : shape) d = detail::get_le<std::uint64_t>(is);
        const std::size_t n = shape_size(shape);
        if (n > (std::size_t{1} << 32)) throw ModelFileError("container: implausible array size");
        std::vector<double> data(n);
        for (auto& v : data) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
        bundle.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    return bundle;
}

inline void save_container(const std::filesystem::path& path, const ArrayBundle& bundle) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ModelFileError("container: cannot open " + path.string() + " for writing");
    write_container(os, bundle);
}

inline ArrayBundle load_container(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ModelFileError("container: cannot open " + path.string());
    return read_container(is);
}

}  // namespace docvce
