#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "optlab/trainer_state.hpp"

namespace optlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    ModelConfig model;
    TrainerState state;
};

// Canonical one-line rendering of the model config; hashed into the header.
std::string model_config_key(const ModelConfig& config);
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

/// Container layout (all integers little-endian):
///   "OPTLABCK" | u32 version | u64 config digest | u64 payload bytes |
///   u64 payload FNV-1a | payload
/// The payload is a u32 entry count followed by named entries
///   u16 name length | name | u8 kind | u32 rank | u64 dims[rank] | data
/// with kind 0 = f64 tensor, 1 = u64 array, 2 = raw bytes.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);

/// Throws CheckpointError on bad magic, unknown version, truncation or
/// checksum mismatch, and ConfigError when `expected` is given and differs
/// from the stored model config.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const ModelConfig* expected = nullptr);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

// Reads just the header fields without validating the payload.
std::uint32_t peek_checkpoint_version(const std::filesystem::path& path);

} // namespace optlab
