#pragma once

// Checkpoint layout, all integers and floats little-endian:
//
//   "DMTDCKPT"                      8-byte magic
//   u32 version                     kCheckpointVersion
//   u32 n, n bytes                  RunConfig as INI text
//   u64 train_step
//   u32 tensor_count
//   tensor_count x {
//     u32 n, n bytes                name
//     u32 rank, rank x u64          shape
//     numel x f32                   data
//   }
//   u32 crc32                       over every preceding byte
//
// Tensors appear in Model::named_parameters order, followed by
// "optim.m.<name>" and "optim.v.<name>" for every parameter when optimizer
// state is saved.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dmtd/config.hpp"
#include "dmtd/model.hpp"
#include "dmtd/optim.hpp"

namespace dmtd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct SavedTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;
};

struct LoadedCheckpoint {
  RunConfig config;
  Model<float> model;
  std::int64_t step = 0;
  std::vector<SavedTensor> first_moments;   // empty when no optimizer state was saved
  std::vector<SavedTensor> second_moments;

  bool has_optimizer_state() const { return !first_moments.empty(); }
};

// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::filesystem::path& file, const RunConfig& config, const Model<float>& model,
                     const AdamW<float>* optimizer, std::int64_t step);

// DataError for truncated or malformed files, ChecksumError when the trailer
// does not match, ConfigError when the embedded config is invalid.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& file);

// Copies saved moments and the step count into `optimizer`.
void restore_optimizer(const LoadedCheckpoint& checkpoint, AdamW<float>& optimizer);

}  // namespace dmtd
