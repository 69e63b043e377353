#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "aggsum/training.hpp"

namespace aggsum {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  TrainState state;
  std::uint64_t vocab_hash = 0;
  ParameterSet<float> params;
  bool has_optimizer = false;
  AdamState<float> adam;
};

// Little-endian binary layout: "AGTF", u32 version, u64 header length and
// a JSON header, u64 tensor count, then per tensor a u16 name length, the
// name, u8 rank, u64 dims and float32 data. Optimizer moments follow the
// parameters as "<name>.m" and "<name>.v".
std::string serialize_checkpoint(const Checkpoint& ckpt);
// Throws LoadError naming the offending field.
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Snapshot of a training run.
Checkpoint make_checkpoint(const Model<float>& model, const Trainer<float>& trainer, std::uint64_t vocab_hash);
// Parameters only, for inference.
Checkpoint make_checkpoint(const Model<float>& model, const TrainConfig& train, std::uint64_t vocab_hash);

}  // namespace aggsum
