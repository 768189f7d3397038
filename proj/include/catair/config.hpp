#pragma once

#include <string>
#include <utility>
#include <vector>

#include "catair/backbone.hpp"
#include "catair/degrade.hpp"
#include "catair/training.hpp"

namespace catair {

// Everything a run needs, gathered from one ini-style file: `key = value`
// lines under [model], [tasks], [train], [dataset] headers. `#` starts a
// comment. Unknown sections or keys are rejected with their line number.
struct RunConfig {
    ModelConfig model;
    std::vector<std::string> tasks = {"denoise", "derain", "dehaze"};
    TrainConfig train;
    DatasetRequest dataset;
};

RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config_file(const std::string& path);

// The effective settings serialized back into the same grammar, so output
// directories can carry an exact record of what produced them.
std::string run_config_to_ini(const RunConfig& rc);

// Spatial sublayers in forward traversal order as (name, level) pairs:
// encoder levels 1..4, then decoder levels 3..1. Matches the order routing
// decisions accumulate in a forward pass.
std::vector<std::pair<std::string, int>> spatial_block_layout(const ModelConfig& cfg);

}  // namespace catair
