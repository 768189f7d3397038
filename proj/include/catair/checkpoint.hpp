#pragma once

#include <string>

#include "catair/backbone.hpp"

namespace catair {

// Checkpoint directory layout:
//   manifest.json  - ordered list of {name, shape, dtype:"f32", byte_offset}
//   weights.bin    - raw little-endian float32, concatenated in manifest order
//   config.json    - ModelConfig fields plus the task name list
// Weights are stored in f32; save(load(dir)) reproduces weights.bin byte for
// byte because the f32 -> f64 -> f32 round trip is exact.

void save_checkpoint(const CatAIRModel& model, const std::string& dir);

// Reads config.json only.
void read_checkpoint_config(const std::string& dir, ModelConfig& cfg,
                            std::vector<std::string>& tasks);

// Copies manifest weights into same-named parameters. With allow_missing the
// model may hold parameters absent from the manifest (task extension); without
// it any mismatch in either direction is an error. Manifest entries unknown to
// the model always error.
void load_weights(CatAIRModel& model, const std::string& dir, bool allow_missing = false);

// Construct-and-load convenience.
CatAIRModel load_checkpoint(const std::string& dir);

// JSON (de)serialization of the config block, shared with the CLI.
std::string model_config_to_json(const ModelConfig& cfg, const std::vector<std::string>& tasks);

}  // namespace catair
