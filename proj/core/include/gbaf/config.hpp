#pragma once

#include <string>

#include "gbaf/channel.hpp"
#include "gbaf/model.hpp"
#include "gbaf/training.hpp"

namespace gbaf {

struct OutputPaths {
    std::string checkpoint;
    std::string loss_csv;
    std::string results;
};

/// Everything one run needs: architecture, training, channel, evaluation and
/// output paths. Serialized as flat key=value text with section prefixes
/// (model., train., channel., eval., out.).
struct RunConfig {
    GbafConfig model;
    TrainConfig train;
    EvalConfig eval;
    ChannelSpec channel;
    OutputPaths out;
};

RunConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
RunConfig parse_config_file(const std::string& path);

/// Canonical serialization: fixed key order, full double precision. Identical
/// configs always produce identical text.
std::string config_to_text(const RunConfig& rc);

/// Whole-config validation; throws ConfigError naming the offending field.
void validate_run_config(const RunConfig& rc);

/// GBAF_SEED, when set, overrides the train/eval/channel seeds.
void apply_env_seed_override(RunConfig& rc);

/// Overrides all three seeds (used by --seed and GBAF_SEED).
void set_all_seeds(RunConfig& rc, std::uint64_t seed);

} // namespace gbaf
