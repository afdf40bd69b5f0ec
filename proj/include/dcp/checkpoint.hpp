#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dcp/config.hpp"
#include "dcp/encoder.hpp"
#include "dcp/gradcheck.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

inline constexpr char kCheckpointMagic[8] = {'U', 'D', 'C', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<CheckpointTensor> tensors;

  /// nullptr when absent.
  const CheckpointTensor* find(const std::string& name) const;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);

/// Little-endian layout: magic, u32 version, u64 count, then per tensor
/// u16 name length, name bytes, u8 rank, u64 extents, f64 payload; a
/// trailing FNV-1a of everything before it.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws IntegrityError on a bad magic, checksum, version or truncation.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Throws IoError when the file cannot be written or read.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Config geometry ("meta.config"), every parameter, and both pools' usage
/// counters ("pool.<modality>.usage", "pool.<modality>.calls").
Checkpoint capture_state(const ModelConfig& config, const ParameterList& params, const UnifiedEncoder& encoder);

/// Inverse of capture_state. Throws ConfigError naming the first geometry
/// field that disagrees with `config`, IntegrityError when a parameter is
/// missing or has the wrong shape. Parameters listed in `optional` may be
/// absent (they keep their current values).
void restore_state(const Checkpoint& ckpt, const ModelConfig& config, const ParameterList& params,
                   UnifiedEncoder& encoder, const ParameterList& optional = {});

}  // namespace dcp
