#pragma once

#include <map>
#include <string>

#include "efi/model.hpp"
#include "efi/tensor.hpp"

namespace efi {

// Checkpoint file layout (all integers little-endian):
//   magic "EFI1"
//   u32 format version (1)
//   u32 json length, then that many bytes of metadata JSON
//     (architecture config, view, epoch, last loss values)
//   u32 tensor count
//   per tensor: u16 name length, name bytes, u8 rank, u32 dims[rank]
//   payload: for each tensor in header order, raw float32 values
//
// Views: "full" carries everything, "edge" carries encoder + codebook,
// "cloud" carries decoder + classifier + codebook.

struct CheckpointMeta {
  int epoch = 0;
  double loss_r = 0.0;
  double loss_c = 0.0;
  double loss_e = 0.0;
  std::string view = "full";
};

enum class CheckpointView { full, edge, cloud };

std::string to_string(CheckpointView view);

struct LoadedCheckpoint {
  ArchitectureConfig config;
  CheckpointMeta meta;
  std::map<std::string, Tensor> tensors;

  Model to_model() const { return Model(config, tensors); }
};

// Atomic write (temp file + rename). The view selects which parameter
// groups are serialized.
void save_checkpoint(const Model& model, const std::string& path, const CheckpointMeta& meta,
                     CheckpointView view = CheckpointView::full);

LoadedCheckpoint load_checkpoint(const std::string& path);

// Architecture config <-> JSON text (also embedded in dataset manifests).
std::string arch_to_json(const ArchitectureConfig& cfg);
ArchitectureConfig arch_from_json(const std::string& text);

}  // namespace efi
