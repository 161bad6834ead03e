#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gbaf/nn.hpp"
#include "gbaf/transformer.hpp"

namespace gbaf {

enum class PreprocessMode { feedback_only, noise_only, disentangle, raw };
PreprocessMode preprocess_mode_from_string(const std::string& s);
std::string to_string(PreprocessMode m);

/// Architecture and protocol hyperparameters.
struct GbafConfig {
    std::size_t K = 51;      // information bits
    std::size_t m = 3;       // block size
    std::size_t T = 9;       // communication rounds
    std::size_t d_model = 32;
    std::size_t n_heads = 1;
    std::size_t delta = 4;   // ffn scaling factor
    std::size_t n_parity = 2;
    std::size_t n_belief = 2;
    std::size_t n_decoder = 3;
    bool belief_enabled = false;
    PreprocessMode preprocess_mode = PreprocessMode::disentangle;
    FxDesign extractor_design = FxDesign::C;
    Activation activation = Activation::relu;
    bool positional_encoding = false;

    std::size_t l() const { return K / m; }
    std::size_t alphabet() const { return std::size_t{1} << m; }
    double rate() const { return static_cast<double>(m) / static_cast<double>(T); }

    /// Width of the parity knowledge vector (round-independent; future-round
    /// slots are zero-filled).
    std::size_t d_in_parity() const;
    std::size_t d_in_belief() const { return T - 1; }
    std::size_t d_in_decoder() const { return T; }
    /// Number of history slots per direction kept in the parity vector.
    std::size_t history_slots() const { return T - 1; }

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

/// Per-round batch standardization of parity symbols with running statistics,
/// enforcing the unit average power constraint. Frozen mode (evaluation)
/// applies the stored running statistics.
class PowerNormalizer {
public:
    PowerNormalizer() = default;
    PowerNormalizer(std::size_t rounds, double momentum = 0.1, double eps = 1e-6);

    /// x: [batch, l]; tau in [1, T]. Training mode standardizes with batch
    /// statistics over all batch*l entries and updates the running stats;
    /// it requires batch >= 2.
    Tensor normalize(Tape& tape, const Tensor& x, std::size_t tau, bool training);

    std::size_t rounds() const { return mean_.size(); }
    std::span<const double> running_mean() const { return mean_; }
    std::span<const double> running_var() const { return var_; }
    void set_running_stats(std::span<const double> mean, std::span<const double> var);
    double momentum() const { return momentum_; }
    double eps() const { return eps_; }

private:
    std::vector<double> mean_;
    std::vector<double> var_;
    double momentum_ = 0.1;
    double eps_ = 1e-6;
};

enum class HeadKind { parity, belief, decoder };

/// H_map . H_s2s . H_extract with the head-specific output mapping.
struct EncoderUnit {
    FeatureExtractor extract;
    EncoderStack s2s;
    LinearLayer map;
    HeadKind head = HeadKind::parity;
    std::size_t m = 0;

    static EncoderUnit init(HeadKind head, const GbafConfig& cfg, RandomStream& rng);

    /// parity: [B,l,1] raw symbols (power normalization is the caller's).
    /// belief: [B,l,2m] per-bit probability pairs, each pair sums to 1.
    /// decoder: [B,l,2^m] raw logits.
    Tensor forward(Tape& tape, const Tensor& q) const;

    void append_params(const std::string& prefix, std::vector<NamedParam>& out) const;
};

/// Transmitter-side episode memory (batched over episodes).
struct KnowledgeState {
    Tensor bits;       // [B,K], 0/1
    Tensor mod_blocks; // [B,l,m], BPSK 2b-1
    std::vector<Tensor> symbols;  // per round, [B,l]
    std::vector<Tensor> feedback; // per round, [B,l]

    std::size_t rounds_sent() const { return symbols.size(); }
};

/// Receiver-side episode memory.
struct ReceiverState {
    std::vector<Tensor> received; // per round, [B,l]
};

/// [B,K] bits -> [B,l,m] BPSK-modulated blocks (2b-1).
Tensor bpsk_blocks(const Tensor& bits, std::size_t m);

/// Builds the parity network input for round tau (1-based). Layout for the
/// default disentangle mode per block:
///   [ bbar (m) | belief (2m, optional) | c^(1..tau-1) pad | ytilde-c pad ]
/// feedback_only / noise_only drop the symbol region; raw keeps ytilde
/// unsubtracted. Future-round slots are zero so the width never changes.
Tensor preprocess_parity(Tape& tape, const GbafConfig& cfg, const KnowledgeState& state,
                         const Tensor* belief, std::size_t tau);

/// Feedback symbols only, zero-padded to T-1 slots.
Tensor preprocess_belief(Tape& tape, const GbafConfig& cfg, const KnowledgeState& state,
                         std::size_t tau);

/// The T received forward-channel symbols per block.
Tensor preprocess_decoder(Tape& tape, const GbafConfig& cfg, const ReceiverState& state);

/// The parity / (optional) belief / decoder triple plus the power normalizer.
class GbafModel {
public:
    static GbafModel init(const GbafConfig& cfg, std::uint64_t param_seed);

    const GbafConfig& config() const { return cfg_; }

    Tensor parity_forward(Tape& tape, const Tensor& q, std::size_t tau, bool training);
    Tensor belief_forward(Tape& tape, const Tensor& q_tilde) const;
    Tensor decoder_forward(Tape& tape, const Tensor& q_hat) const;

    EncoderUnit& parity_unit() { return parity_; }
    EncoderUnit& decoder_unit() { return decoder_; }
    EncoderUnit& belief_unit();
    PowerNormalizer& normalizer() { return norm_; }
    const PowerNormalizer& normalizer() const { return norm_; }

    bool has_belief() const { return belief_.has_value(); }

    /// Stable-ordered parameter registry (parity, belief, decoder).
    std::vector<NamedParam> named_parameters() const;
    std::vector<Tensor> parameters() const;
    std::size_t param_count() const;
    void zero_grads();

private:
    GbafConfig cfg_;
    EncoderUnit parity_;
    std::optional<EncoderUnit> belief_;
    EncoderUnit decoder_;
    PowerNormalizer norm_;
};

/// Per-block argmax of decoder logits; ties resolve to the lowest index.
std::vector<std::size_t> argmax_blocks(const Tensor& logits);

} // namespace gbaf
