#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "kiunet/errors.hpp"
#include "kiunet/tensor.hpp"

// Binary records, all integers little-endian:
//
//   KIUT tensor:     "KIUT" u32 version=1, u32 ndim, ndim x u32 dims, f32 payload (row-major)
//   KIUC checkpoint: "KIUC" u32 version=1, u32 count, count x (u16 name length, UTF-8 name, KIUT)

namespace kiunet::io {

inline constexpr std::array<char, 4> kTensorMagic{'K', 'I', 'U', 'T'};
inline constexpr std::array<char, 4> kCheckpointMagic{'K', 'I', 'U', 'C'};
inline constexpr std::uint32_t kFormatVersion = 1;

namespace detail {

template <typename U>
void put_le(std::ostream& out, U value) {
    static_assert(std::is_unsigned_v<U>);
    char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        bytes[i] = static_cast<char>((value >> (8 * i)) & 0xffu);
    }
    out.write(bytes, sizeof(U));
}

inline void read_exact(std::istream& in, char* dst, std::size_t n, const char* what) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw TruncatedFileError(std::string("truncated record while reading ") + what);
    }
}

template <typename U>
U get_le(std::istream& in, const char* what) {
    unsigned char bytes[sizeof(U)];
    read_exact(in, reinterpret_cast<char*>(bytes), sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        value |= static_cast<U>(static_cast<U>(bytes[i]) << (8 * i));
    }
    return value;
}

inline void expect_magic(std::istream& in, const std::array<char, 4>& magic) {
    std::array<char, 4> got{};
    read_exact(in, got.data(), got.size(), "magic");
    if (got != magic) {
        throw BadMagicError("bad magic: expected \"" + std::string(magic.data(), 4) + "\", got \"" +
                            std::string(got.data(), 4) + "\"");
    }
}

inline void expect_version(std::istream& in) {
    const auto version = get_le<std::uint32_t>(in, "version");
    if (version != kFormatVersion) {
        throw UnsupportedVersionError("unsupported format version " + std::to_string(version));
    }
}

}  // namespace detail

/// Writes a KIUT record. Values are stored as 32-bit floats, so double tensors
/// round to single precision.
template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
    out.write(kTensorMagic.data(), kTensorMagic.size());
    detail::put_le<std::uint32_t>(out, kFormatVersion);
    detail::put_le<std::uint32_t>(out, 4);
    const Shape& s = t.shape();
    for (std::size_t d : {s.n, s.c, s.h, s.w}) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    for (T v : t.values()) {
        detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
}

/// Reads a KIUT record; records with fewer than four dims are left-padded with 1.
template <typename T>
Tensor<T> read_tensor(std::istream& in) {
    detail::expect_magic(in, kTensorMagic);
    detail::expect_version(in);
    const auto ndim = detail::get_le<std::uint32_t>(in, "ndim");
    if (ndim == 0 || ndim > 4) {
        throw FormatError("KIUT ndim must be in [1, 4], got " + std::to_string(ndim));
    }
    std::array<std::size_t, 4> dims{1, 1, 1, 1};
    for (std::uint32_t i = 0; i < ndim; ++i) {
        const auto d = detail::get_le<std::uint32_t>(in, "dims");
        if (d == 0) {
            throw FormatError("KIUT dimension of size 0");
        }
        dims[4 - ndim + i] = d;
    }
    const Shape shape{dims[0], dims[1], dims[2], dims[3]};
    // A corrupted header can claim an enormous payload; on seekable streams,
    // report truncation before trying to allocate it.
    if (const auto here = in.tellg(); here != std::streampos(-1)) {
        in.seekg(0, std::ios::end);
        const auto end = in.tellg();
        in.seekg(here);
        if (end != std::streampos(-1) &&
            static_cast<unsigned long long>(end - here) < static_cast<unsigned long long>(shape.numel()) * 4ull) {
            throw TruncatedFileError("truncated record while reading tensor payload (" + shape.str() + ")");
        }
    }
    std::vector<char> raw(shape.numel() * 4);
    detail::read_exact(in, raw.data(), raw.size(), "tensor payload");
    std::vector<T> values(shape.numel());
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint32_t bits = 0;
        for (std::size_t b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * i + b])) << (8 * b);
        }
        values[i] = static_cast<T>(std::bit_cast<float>(bits));
    }
    return Tensor<T>(shape, std::move(values));
}

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
void write_checkpoint(std::ostream& out, const std::vector<NamedTensor<T>>& entries) {
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    detail::put_le<std::uint32_t>(out, kFormatVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (e.name.size() > 0xffff) {
            throw FormatError("parameter name too long: " + e.name.substr(0, 32) + "...");
        }
        detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_tensor(out, e.tensor);
    }
}

template <typename T>
std::vector<NamedTensor<T>> read_checkpoint(std::istream& in) {
    detail::expect_magic(in, kCheckpointMagic);
    detail::expect_version(in);
    const auto count = detail::get_le<std::uint32_t>(in, "entry count");
    std::vector<NamedTensor<T>> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = detail::get_le<std::uint16_t>(in, "name length");
        std::string name(len, '\0');
        detail::read_exact(in, name.data(), len, "parameter name");
        entries.push_back({std::move(name), read_tensor<T>(in)});
    }
    return entries;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open for writing: " + path.string());
    }
    return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open for reading: " + path.string());
    }
    return in;
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
    auto out = open_out(path);
    write_tensor(out, t);
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
    auto in = open_in(path);
    return read_tensor<T>(in);
}

template <typename T>
void save_checkpoint_file(const std::filesystem::path& path, const std::vector<NamedTensor<T>>& entries) {
    auto out = open_out(path);
    write_checkpoint(out, entries);
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

template <typename T>
std::vector<NamedTensor<T>> load_checkpoint_file(const std::filesystem::path& path) {
    auto in = open_in(path);
    return read_checkpoint<T>(in);
}

}  // namespace kiunet::io
