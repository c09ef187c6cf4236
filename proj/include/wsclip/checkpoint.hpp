#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "wsclip/config.hpp"
#include "wsclip/tensor.hpp"

namespace wsclip {

// Versioned binary container: magic, format version, a canonical-text
// config record, then per tensor (name, dtype tag, dims, little-endian
// float64 payload, FNV-1a checksum). Round-trips are bit-exact.
struct Checkpoint {
    KeyValueConfig config;
    std::map<std::string, Tensor> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// FNV-1a 64-bit over a byte range; also used for whole-file hashes in
// lineage records.
std::uint64_t fnv1a64(const void* data, std::size_t n,
                      std::uint64_t seed = 14695981039346656037ull);
std::uint64_t file_hash(const std::string& path);

}  // namespace wsclip
