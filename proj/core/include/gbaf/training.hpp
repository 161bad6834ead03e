#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gbaf/protocol.hpp"

namespace gbaf {

struct TrainConfig {
    std::size_t batch_size = 512;
    std::size_t total_batches = 20000;
    double lr0 = 1e-3;
    double weight_decay = 0.01;
    double clip_threshold = 0.5;
    double schedule_power = 1.0; // polynomial decay exponent
    double lr_final = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    std::size_t log_every = 100;
    bool desk_scale = true; // informational; --paper-scale selects 8192 x 100k

    void validate() const;
    void apply_paper_scale() {
        batch_size = 8192;
        total_batches = 100000;
        desk_scale = false;
    }
};

struct EvalConfig {
    std::size_t max_episodes = 10000;
    std::size_t min_block_errors = 0; // 0 disables the early-stop rule
    std::uint64_t seed = 2;
    std::size_t chunk = 256;

    void validate() const;
};

/// Mean over the batch of the per-sequence summed -log softmax(logits)[label].
/// logits: [B,l,C] (or [l,C] for a single sequence); labels row-major (b,i).
Tensor cross_entropy_loss(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels);

/// lr_final + (lr0 - lr_final) * (1 - step/total)^power
double lr_schedule(std::size_t step, std::size_t total, double lr0, double power, double lr_final);

/// Global L2-norm clipping over all parameter gradients; scales in place when
/// the norm exceeds the threshold. Returns the pre-clip norm.
double clip_gradients(std::span<Tensor> params, double threshold);

/// Adam with decoupled weight decay:
///   theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + lambda * theta)
class AdamW {
public:
    AdamW(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
          double weight_decay = 0.0);

    void step(double lr);
    std::size_t step_count() const { return step_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::size_t step_ = 0;
};

struct LossTraceRow {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

void write_loss_csv(const std::string& path, std::span<const LossTraceRow> trace);

/// Thrown when the training loss goes non-finite; carries the diagnostic
/// snapshot for the abort report.
class TrainDiverged : public std::runtime_error {
public:
    TrainDiverged(std::size_t step, double lr, double loss, double grad_norm);
    std::size_t step;
    double lr, loss, grad_norm;
};

struct TrainResult {
    std::vector<LossTraceRow> trace;
    std::size_t batches_run = 0;
};

/// Called after each optimizer step with (completed batches, that batch's
/// loss); return false to stop early.
using BatchCallback = std::function<bool(std::size_t completed_batches, double loss)>;

/// End-to-end training: per batch, sample fresh bit streams and channel noise,
/// run the differentiable episode, cross-entropy backward, clip, AdamW step,
/// polynomial lr decay. `start_batch` resumes the schedule mid-run.
TrainResult train_loop(GbafModel& model, const TrainConfig& tc, const ChannelSpec& channel,
                       std::size_t start_batch = 0, const BatchCallback& after_batch = nullptr);

struct BlerResult {
    double bler = 0.0;
    std::size_t episodes = 0;      // attempted (aborted included)
    std::size_t block_errors = 0;  // over decoded episodes
    std::size_t decoded_blocks = 0;
    std::size_t aborted = 0;
};

/// Monte-Carlo block error rate; stops at min_block_errors (when set) or
/// max_episodes. Aborted fading episodes are excluded from the rate.
BlerResult evaluate_bler(GbafModel& model, const EvalConfig& ec, const ChannelSpec& channel);

double q_function(double x);

/// Analytic block error of uncoded BPSK over AWGN: 1 - (1-Q(1/sigma))^K.
double uncoded_bpsk_bler(std::size_t K, double snr_ff_db);

} // namespace gbaf
