#pragma once

// Versioned binary checkpoint format (little-endian):
//
//   magic      8 bytes  "FDCKPT\0\1"
//   version    u32      currently 1
//   hash       u64      FNV-1a of the embedded config text
//   cfg_len    u32      followed by cfg_len bytes of config text
//   count      u32      number of tensors, then per tensor:
//     name_len u32, name bytes, rank u32, rank x u64 dims, prod(dims) x f64 values

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flipdistill/models.hpp"

namespace flipdistill {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_hash = 0;
  std::string config_text;
  std::vector<StoredTensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& params,
                     const std::string& config_text);
// Throws ParseError on a truncated or corrupt file, std::runtime_error if missing.
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies stored values into `params` by name. Throws ConfigError if the
// checkpoint's hash differs from expected_hash or a tensor is missing or
// has a different shape.
void load_into(const Checkpoint& ckpt, const std::vector<NamedTensor>& params, std::uint64_t expected_hash);

// In-memory snapshots of parameter values.
std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor>& params);
void restore(const std::vector<NamedTensor>& params, const std::vector<std::vector<double>>& values);

}  // namespace flipdistill
