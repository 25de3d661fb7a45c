#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cascade/tensor.hpp"

namespace cascade {

inline constexpr char kCheckpointMagic[8] = {'C', 'S', 'C', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct Checkpoint {
    std::vector<std::pair<std::string, AnyTensor>> tensors;
    std::string metadata;  // JSON text

    void put(std::string name, Tensor<float> t) { tensors.emplace_back(std::move(name), std::move(t)); }
    void put(std::string name, Tensor<double> t) { tensors.emplace_back(std::move(name), std::move(t)); }
    bool has(const std::string& name) const;
    /// Throws CheckpointError when absent or of another dtype.
    template <typename T>
    const Tensor<T>& get(const std::string& name) const;
};

/// Layout (little-endian): magic[8], u32 version, u32 entry count, entries of
/// {u32 name length, name, u8 dtype, u32 rank, u64 extents[rank], values},
/// then u64 metadata length and the metadata bytes.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes to a sibling temp file, then renames over `path`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cascade
