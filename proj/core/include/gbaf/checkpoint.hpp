#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gbaf/config.hpp"

namespace gbaf {

/// Portable, bit-exact model snapshot: magic "GBAF", version, canonical
/// config text, named-parameter manifest, little-endian IEEE-754 payload,
/// power-normalizer running stats, trailing checksum.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::uint32_t version = kVersion;
    std::uint64_t trained_batches = 0;
    std::string config_text;

    struct ParamEntry {
        std::string name;
        Shape shape;
        std::uint64_t offset = 0; // in doubles, into payload
    };
    std::vector<ParamEntry> manifest;
    std::vector<double> payload;

    std::vector<double> norm_mean;
    std::vector<double> norm_var;
};

Checkpoint checkpoint_from_model(const GbafModel& model, const RunConfig& rc,
                                 std::uint64_t trained_batches);

/// save -> load -> save produces byte-identical files.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

/// Verifies magic, version and checksum; any corruption fails loudly.
Checkpoint load_checkpoint(const std::string& path);

/// Rebuilds the model from the stored config and validates the manifest
/// (names and shapes) against it before copying the payload.
GbafModel model_from_checkpoint(const Checkpoint& ckpt, RunConfig* out_config = nullptr);

} // namespace gbaf
