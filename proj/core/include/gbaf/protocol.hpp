#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gbaf/channel.hpp"
#include "gbaf/model.hpp"

namespace gbaf {

/// Row i is the m-bit big-endian representation of i; the decoder classifies
/// into block indices and this table converts back to bits.
struct LookupTable {
    std::size_t m = 0;
    std::vector<std::uint8_t> table; // [2^m, m] row-major

    static LookupTable make(std::size_t m);
    std::span<const std::uint8_t> row(std::size_t i) const {
        return {table.data() + i * m, m};
    }
    std::size_t size() const { return table.size() / m; }
};

/// Big-endian integer value of an m-bit block (y = x^T [2^{m-1},...,1]).
std::size_t bits_to_label(std::span<const std::uint8_t> block);

/// Per-block labels of a [B,K] bit tensor, row-major over (episode, block).
std::vector<std::size_t> labels_from_bits(const Tensor& bits, std::size_t m);

struct EpisodeResult {
    std::vector<std::uint8_t> decoded_bits; // K
    std::size_t block_errors = 0;
    bool block_error_flag = false;
    bool aborted = false;
    std::size_t forward_uses = 0;
    std::size_t feedback_uses = 0;
    std::vector<std::vector<double>> symbol_log; // optional, T rounds x l symbols
};

/// Exact reduced rational m/T.
struct RateInfo {
    std::size_t num = 0;
    std::size_t den = 1;
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};
RateInfo rate_of(const GbafConfig& cfg);

/// Communication rounds used by this design (= T, independent of K).
std::size_t interaction_count(const GbafConfig& cfg);

/// Rounds a sequence-to-one design with N_tau symbols per round needs at the
/// same rate: K/N_tau * (1/R - 1) + 1, rounded up.
std::size_t sequence_to_one_interactions(std::size_t K, std::size_t n_tau, std::size_t m,
                                         std::size_t T);

/// One round-gain source for a batch of episodes (fading only).
class ChannelContext {
public:
    ChannelContext(const ChannelSpec& spec, std::size_t l);

    const ChannelSpec& spec() const { return spec_; }
    bool fading() const { return spec_.kind == ChannelKind::fading; }
    const FadingTrajectory& forward_trajectory() const { return traj_; }
    const FadingTrajectory& feedback_trajectory() const {
        return spec_.reciprocal ? traj_ : traj_fb_;
    }

private:
    ChannelSpec spec_;
    FadingTrajectory traj_;    // forward (and feedback when reciprocal)
    FadingTrajectory traj_fb_; // independent feedback gains when non-reciprocal
};

struct EpisodeRunOptions {
    std::uint64_t first_episode = 0; // absolute index of batch row 0 (keys noise streams)
    bool training_norm = false;      // batch-statistics power normalization
    bool redraw_degenerate = false;  // resample fading windows instead of aborting
    bool log_symbols = false;
};

struct EpisodeBatchResult {
    Tensor logits;               // [B, l, 2^m]
    std::vector<Tensor> symbols; // T x [B, l] transmitted parity symbols
    std::vector<std::uint8_t> aborted;
    std::size_t forward_uses_per_episode = 0;
    std::size_t feedback_uses_per_episode = 0;
};

/// The full differentiable interaction: UIPSE rounds across the channel, then
/// the decoder forward. Episode e of the batch draws its noise from streams
/// keyed by (channel seed, first_episode + e, direction, round), so results
/// are independent of how episodes are grouped into batches.
EpisodeBatchResult run_episode_batch(Tape& tape, GbafModel& model, const ChannelContext& ctx,
                                     const Tensor& bits, const EpisodeRunOptions& opts);

/// Single-episode wrapper: draws K random bits from `bits_rng`, runs the
/// episode with noise keyed by episode_index, decodes and scores.
EpisodeResult run_episode(GbafModel& model, const ChannelContext& ctx, RandomStream& bits_rng,
                          std::uint64_t episode_index, bool log_symbols = false);

/// JPSD scoring: argmax per block (lowest index wins ties), bits via the
/// lookup table, block i in error iff its row differs from the true block.
struct DecodeScore {
    std::vector<std::uint8_t> bits;              // [B*K]
    std::vector<std::size_t> block_errors;       // per episode
};
DecodeScore decode_and_score(const Tensor& logits, const Tensor& true_bits, const LookupTable& table);

} // namespace gbaf
