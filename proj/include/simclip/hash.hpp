#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>

namespace simclip {

/// Incremental SHA-256 producing lowercase hex digests.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(const void* data, std::size_t n);
    Sha256& update(std::span<const unsigned char> bytes) { return update(bytes.data(), bytes.size()); }
    std::string hex();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace simclip
