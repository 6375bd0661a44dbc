#pragma once

// Little-endian encoding helpers shared by the binary file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

namespace simclip::io {

template <typename U>
void put_le(std::vector<unsigned char>& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>(value >> (8 * i)));
}

template <typename U>
U get_le(const unsigned char* bytes) {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
    return value;
}

inline void put_f32(std::vector<unsigned char>& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::vector<unsigned char>& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }
inline float get_f32(const unsigned char* b) { return std::bit_cast<float>(get_le<std::uint32_t>(b)); }
inline double get_f64(const unsigned char* b) { return std::bit_cast<double>(get_le<std::uint64_t>(b)); }

inline void put_bytes(std::vector<unsigned char>& out, const void* src, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(src);
    out.insert(out.end(), p, p + n);
}

/// Writes `bytes` to a temp file next to `path`, fsyncs, then renames it into
/// place so readers never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& bytes);

std::vector<unsigned char> read_file(const std::filesystem::path& path);

}  // namespace simclip::io
