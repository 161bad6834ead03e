#include "gbaf/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

namespace gbaf {

namespace {

constexpr std::uint64_t kTagBits = 0x6269u; // 'bi'

Tensor draw_bits(std::uint64_t seed, std::uint64_t first_episode, std::size_t B, std::size_t K) {
    Tensor bits = Tensor::uninit({B, K});
    std::span<double> data = bits.data();
    for (std::size_t e = 0; e < B; ++e) {
        RandomStream rs(seed, {first_episode + e, kTagBits});
        for (std::size_t j = 0; j < K; ++j) data[e * K + j] = rs.uniform_below(2) ? 1.0 : 0.0;
    }
    return bits;
}

} // namespace

void TrainConfig::validate() const {
    if (batch_size < 2) throw ConfigError("train.batch_size: must be >= 2 (power normalizer)");
    if (total_batches == 0) throw ConfigError("train.total_batches: must be >= 1");
    if (lr0 <= 0.0) throw ConfigError("train.lr0: must be positive");
    if (clip_threshold <= 0.0) throw ConfigError("train.clip_threshold: must be positive");
    if (log_every == 0) throw ConfigError("train.log_every: must be >= 1");
}

void EvalConfig::validate() const {
    if (max_episodes < 1) throw ConfigError("eval.max_episodes: must be >= 1");
    if (chunk < 1) throw ConfigError("eval.chunk: must be >= 1");
}

Tensor cross_entropy_loss(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2 && logits.rank() != 3)
        throw DimensionError("cross_entropy_loss: expected [B,l,C] or [l,C], got " +
                             shape_to_string(logits.shape()));
    const std::size_t C = logits.shape().back();
    const std::size_t rows = logits.size() / C;
    const std::size_t batch = logits.rank() == 3 ? logits.extent(0) : 1;
    if (labels.size() != rows)
        throw ContractError("cross_entropy_loss: " + std::to_string(labels.size()) +
                            " labels for " + std::to_string(rows) + " blocks");
    for (std::size_t r = 0; r < rows; ++r)
        if (labels[r] >= C)
            throw ContractError("cross_entropy_loss: label " + std::to_string(labels[r]) +
                                " out of range [0," + std::to_string(C) + ")");

    const double* px = logits.data().data();
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * C;
        double mx = row[0];
        for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < C; ++j) z += std::exp(row[j] - mx);
        total += mx + std::log(z) - row[labels[r]];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));

    if (tape.recording() && logits.requires_grad()) {
        out.set_requires_grad(true);
        Tensor lv = logits, ov = out;
        std::vector<std::size_t> labs(labels.begin(), labels.end());
        tape.record({logits, out}, [lv, ov, labs = std::move(labs), rows, C, batch]() {
            const double d = ov.grad()[0] / static_cast<double>(batch);
            const double* px2 = lv.data().data();
            double* g = lv.grad().data();
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
                const double* row = px2 + r * static_cast<std::ptrdiff_t>(C);
                double* grow = g + r * static_cast<std::ptrdiff_t>(C);
                double mx = row[0];
                for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
                double z = 0.0;
                for (std::size_t j = 0; j < C; ++j) z += std::exp(row[j] - mx);
                const double invz = 1.0 / z;
                for (std::size_t j = 0; j < C; ++j)
                    grow[j] += d * std::exp(row[j] - mx) * invz;
                grow[labs[r]] -= d;
            }
        });
    }
    return out;
}

double lr_schedule(std::size_t step, std::size_t total, double lr0, double power, double lr_final) {
    if (total == 0 || step >= total) return lr_final;
    const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total);
    return lr_final + (lr0 - lr_final) * std::pow(frac, power);
}

double clip_gradients(std::span<Tensor> params, double threshold) {
    if (threshold <= 0.0) throw ContractError("clip_gradients: threshold must be positive");
    double sq = 0.0;
    for (const Tensor& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > threshold) {
        const double s = threshold / norm;
        for (Tensor& p : params) {
            if (!p.has_grad()) continue;
            for (double& g : p.grad()) g *= s;
        }
    }
    return norm;
}

AdamW::AdamW(std::vector<Tensor> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps),
      weight_decay_(weight_decay) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void AdamW::step(double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;
        std::span<const double> g = p.grad();
        std::span<double> x = p.data();
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        for (std::size_t j = 0; j < x.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            x[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * x[j]);
        }
    }
}

void write_loss_csv(const std::string& path, std::span<const LossTraceRow> trace) {
    std::ofstream out(path);
    if (!out) throw ParseError("loss csv: cannot write '" + path + "'");
    out << "step,lr,loss,grad_norm\n" << std::setprecision(17);
    for (const auto& row : trace)
        out << row.step << ',' << row.lr << ',' << row.loss << ',' << row.grad_norm << '\n';
}

TrainDiverged::TrainDiverged(std::size_t step_, double lr_, double loss_, double grad_norm_)
    : std::runtime_error("training loss went non-finite at batch " + std::to_string(step_)),
      step(step_), lr(lr_), loss(loss_), grad_norm(grad_norm_) {}

TrainResult train_loop(GbafModel& model, const TrainConfig& tc, const ChannelSpec& channel,
                       std::size_t start_batch, const BatchCallback& after_batch) {
    tc.validate();
    const GbafConfig& cfg = model.config();
    ChannelContext ctx(channel, cfg.l());
    std::vector<Tensor> params = model.parameters();
    AdamW opt(params, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);

    TrainResult result;
    double last_grad_norm = 0.0;
    for (std::size_t step = start_batch; step < tc.total_batches; ++step) {
        const std::uint64_t first_episode =
            static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(tc.batch_size);
        Tensor bits = draw_bits(tc.seed, first_episode, tc.batch_size, cfg.K);
        std::vector<std::size_t> labels = labels_from_bits(bits, cfg.m);

        Tape tape;
        EpisodeRunOptions opts;
        opts.first_episode = first_episode;
        opts.training_norm = true;
        opts.redraw_degenerate = true;
        EpisodeBatchResult batch = run_episode_batch(tape, model, ctx, bits, opts);
        Tensor loss = cross_entropy_loss(tape, batch.logits, labels);
        const double lr = lr_schedule(step, tc.total_batches, tc.lr0, tc.schedule_power, tc.lr_final);
        const double loss_val = loss.item();
        if (!std::isfinite(loss_val)) throw TrainDiverged(step, lr, loss_val, last_grad_norm);

        model.zero_grads();
        tape.backward(loss);
        const double grad_norm = clip_gradients(params, tc.clip_threshold);
        last_grad_norm = grad_norm;
        opt.step(lr);

        if (step % tc.log_every == 0)
            result.trace.push_back({step, lr, loss_val, grad_norm});
        ++result.batches_run;
        if (after_batch && !after_batch(step + 1, loss_val)) break;
    }
    return result;
}

BlerResult evaluate_bler(GbafModel& model, const EvalConfig& ec, const ChannelSpec& channel) {
    ec.validate();
    const GbafConfig& cfg = model.config();
    ChannelContext ctx(channel, cfg.l());
    const LookupTable table = LookupTable::make(cfg.m);

    BlerResult res;
    while (res.episodes < ec.max_episodes &&
           (ec.min_block_errors == 0 || res.block_errors < ec.min_block_errors)) {
        const std::size_t B = std::min(ec.chunk, ec.max_episodes - res.episodes);
        Tensor bits = draw_bits(ec.seed, res.episodes, B, cfg.K);
        Tape tape;
        tape.set_recording(false);
        EpisodeRunOptions opts;
        opts.first_episode = res.episodes;
        opts.training_norm = false;
        EpisodeBatchResult batch = run_episode_batch(tape, model, ctx, bits, opts);
        DecodeScore score = decode_and_score(batch.logits, bits, table);
        for (std::size_t e = 0; e < B; ++e) {
            if (batch.aborted[e]) {
                ++res.aborted;
                continue;
            }
            res.block_errors += score.block_errors[e];
            res.decoded_blocks += cfg.l();
        }
        res.episodes += B;
    }
    res.bler = res.decoded_blocks == 0
                   ? 0.0
                   : static_cast<double>(res.block_errors) / static_cast<double>(res.decoded_blocks);
    return res;
}

double q_function(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

double uncoded_bpsk_bler(std::size_t K, double snr_ff_db) {
    const double sigma = snr_to_sigma(snr_ff_db);
    const double p = sigma == 0.0 ? 0.0 : q_function(1.0 / sigma);
    return 1.0 - std::pow(1.0 - p, static_cast<double>(K));
}

} // namespace gbaf
