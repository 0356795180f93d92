#pragma once

// Checkpoint container, bit-exact:
//   magic "RTDP" | version u32 | u64 block_len + key-sorted text block |
//   u64 param_count | per parameter: u16 name_len + name, u8 rank,
//   u64 dims..., raw f32 data | trailing u64 FNV-1a checksum.
// All integers little-endian. Training checkpoints carry the optimizer
// moments as extra "optim.m/..." and "optim.v/..." tensors and the run state
// as extra text-block keys; the exported model carries neither.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rtdp/config.hpp"
#include "rtdp/lamb.hpp"
#include "rtdp/model.hpp"

namespace rtdp {

struct TrainerRunState {
  int32_t phase_index = 0;   // 0-based
  int64_t step = 0;          // completed steps within the phase
  int64_t opt_step = 0;      // shared LAMB step counter
  uint64_t tokens_seen = 0;
  uint64_t base_seed = 0;
  uint64_t data_doc_cursor = 0;
  uint64_t data_batch_counter = 0;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct LoadedCheckpoint {
  ModelConfig config;
  bool has_run_state = false;
  TrainerRunState run;
  std::vector<NamedTensor> tensors;  // file order

  const NamedTensor* find(const std::string& name) const;
};

// Atomic write (temp file + rename).
void save_checkpoint(const std::string& path, const ModelT<float>& model,
                     const LambStateT<float>* optimizer, const TrainerRunState* run);

LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies tensors into an already constructed model (and optimizer state when
// present); throws config_error when the checkpoint was written by a
// different ModelConfig.
void apply_checkpoint(const LoadedCheckpoint& ckpt, ModelT<float>& model,
                      LambStateT<float>* optimizer);

// Discriminator-only export: E_D = E_G + E_Delta plus every "disc." tensor.
void export_final(const std::string& path, const ModelT<float>& model);

uint64_t fnv1a64(const void* data, size_t size, uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace rtdp
