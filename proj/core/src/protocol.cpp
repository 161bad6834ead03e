#include "gbaf/protocol.hpp"

#include <numeric>

namespace gbaf {

namespace {

// stream key tags
constexpr std::uint64_t kTagForward = 0x66;  // 'f'
constexpr std::uint64_t kTagFeedback = 0x62; // 'b'
constexpr std::uint64_t kTagWindow = 0x77;   // 'w'
constexpr std::uint64_t kTagTrajectory = 0x74;
constexpr std::uint64_t kTagTrajectoryFb = 0x75;

} // namespace

LookupTable LookupTable::make(std::size_t m) {
    if (m == 0 || m > 20) throw ContractError("lookup table: m must be in [1,20]");
    LookupTable t;
    t.m = m;
    const std::size_t n = std::size_t{1} << m;
    t.table.resize(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            t.table[i * m + j] = static_cast<std::uint8_t>((i >> (m - 1 - j)) & 1u);
    return t;
}

std::size_t bits_to_label(std::span<const std::uint8_t> block) {
    std::size_t v = 0;
    for (std::uint8_t b : block) v = (v << 1) | (b & 1u);
    return v;
}

std::vector<std::size_t> labels_from_bits(const Tensor& bits, std::size_t m) {
    const std::size_t B = bits.extent(0);
    const std::size_t K = bits.extent(1);
    const std::size_t l = K / m;
    std::vector<std::size_t> labels(B * l);
    const double* p = bits.data().data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < l; ++i) {
            std::size_t v = 0;
            for (std::size_t j = 0; j < m; ++j)
                v = (v << 1) | (p[b * K + i * m + j] > 0.5 ? 1u : 0u);
            labels[b * l + i] = v;
        }
    return labels;
}

RateInfo rate_of(const GbafConfig& cfg) {
    if (cfg.T < 1) throw ContractError("rate_of: T must be >= 1");
    const std::size_t g = std::gcd(cfg.m, cfg.T);
    return {cfg.m / g, cfg.T / g};
}

std::size_t interaction_count(const GbafConfig& cfg) { return cfg.T; }

std::size_t sequence_to_one_interactions(std::size_t K, std::size_t n_tau, std::size_t m,
                                         std::size_t T) {
    // K/N_tau * (1/R - 1) + 1 with R = m/T, rounded up to whole rounds
    const std::size_t num = K * (T - m);
    const std::size_t den = n_tau * m;
    return (num + den - 1) / den + 1;
}

// --- ChannelContext -------------------------------------------------------------

ChannelContext::ChannelContext(const ChannelSpec& spec, std::size_t l) : spec_(spec) {
    if (spec_.kind != ChannelKind::fading) return;
    const std::size_t sc = subcarriers_for(l);
    if (spec_.trajectory_source == TrajectorySource::file) {
        if (!spec_.reciprocal)
            throw ConfigError("channel.reciprocal=false needs an independent feedback gain "
                              "process; a single trajectory file cannot provide one");
        traj_ = load_trajectory(spec_.trajectory_path);
        if (traj_.subcarriers != sc)
            throw ConfigError("trajectory '" + spec_.trajectory_path + "' has " +
                              std::to_string(traj_.subcarriers) + " subcarriers, config needs " +
                              std::to_string(sc));
    } else {
        RandomStream rng(spec_.seed, {kTagTrajectory});
        traj_ = synth_rayleigh_trajectory(spec_.synth_slots, sc, spec_.rayleigh_sigma, spec_.ar_rho,
                                          rng);
        if (!spec_.reciprocal) {
            RandomStream rng_fb(spec_.seed, {kTagTrajectoryFb});
            traj_fb_ = synth_rayleigh_trajectory(spec_.synth_slots, sc, spec_.rayleigh_sigma,
                                                 spec_.ar_rho, rng_fb);
        }
    }
}

// --- episode runner --------------------------------------------------------------

namespace {

// Per-episode noise rows, keyed by absolute episode index so batching cannot
// change any draw.
Tensor episode_noise(std::uint64_t seed, std::uint64_t first_episode, std::uint64_t tag,
                     std::size_t round, std::size_t B, std::size_t l, double sigma) {
    Tensor n = Tensor::zeros({B, l});
    std::span<double> data = n.data();
    for (std::size_t e = 0; e < B; ++e) {
        RandomStream rs(seed, {first_episode + e, tag, round});
        rs.fill_gaussian(data.subspan(e * l, l), sigma);
    }
    return n;
}

struct EpisodeGains {
    std::vector<GainGrid> forward;  // per round [B, sc]
    std::vector<GainGrid> feedback; // per round [B, sc]
    std::vector<std::uint8_t> aborted;
};

bool window_clear(const FadingTrajectory& tr, std::size_t start, std::size_t T) {
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t s = 0; s < tr.subcarriers; ++s)
            if (std::abs(tr.at(start + t, s)) < kGainFloor) return false;
    return true;
}

EpisodeGains draw_gains(const ChannelContext& ctx, std::uint64_t first_episode, std::size_t B,
                        std::size_t T, std::size_t sc, bool redraw_degenerate) {
    const FadingTrajectory& fwd = ctx.forward_trajectory();
    const FadingTrajectory& fbk = ctx.feedback_trajectory();
    EpisodeGains g;
    g.forward.assign(T, GainGrid::unit(B, sc));
    g.feedback.assign(T, GainGrid::unit(B, sc));
    g.aborted.assign(B, 0);
    for (std::size_t e = 0; e < B; ++e) {
        RandomStream rs(ctx.spec().seed, {first_episode + e, kTagWindow});
        std::size_t start = trajectory_window_start(fwd, T, rs);
        if (redraw_degenerate) {
            int tries = 0;
            while (!(window_clear(fwd, start, T) && window_clear(fbk, start, T))) {
                if (++tries > 100)
                    throw DegenerateGainError("fading: no usable window after 100 redraws");
                start = trajectory_window_start(fwd, T, rs);
            }
        } else if (!(window_clear(fwd, start, T) && window_clear(fbk, start, T))) {
            g.aborted[e] = 1; // keep unit gains so the math stays finite
            continue;
        }
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t s = 0; s < sc; ++s) {
                g.forward[t].at(e, s) = fwd.at(start + t, s);
                g.feedback[t].at(e, s) = fbk.at(start + t, s);
            }
    }
    return g;
}

} // namespace

EpisodeBatchResult run_episode_batch(Tape& tape, GbafModel& model, const ChannelContext& ctx,
                                     const Tensor& bits, const EpisodeRunOptions& opts) {
    const GbafConfig& cfg = model.config();
    if (bits.rank() != 2 || bits.extent(1) != cfg.K)
        throw DimensionError("run_episode_batch: bits must be [B," + std::to_string(cfg.K) +
                             "], got " + shape_to_string(bits.shape()));
    const ChannelSpec& ch = ctx.spec();
    const std::size_t B = bits.extent(0);
    const std::size_t l = cfg.l();
    const std::size_t T = cfg.T;
    const double sigma_ff = ch.sigma_ff();
    const double sigma_fb = ch.sigma_fb();

    EpisodeBatchResult out;
    out.aborted.assign(B, 0);

    EpisodeGains gains;
    if (ctx.fading()) {
        gains = draw_gains(ctx, opts.first_episode, B, T, subcarriers_for(l), opts.redraw_degenerate);
        out.aborted = gains.aborted;
    }

    KnowledgeState tx;
    tx.bits = bits;
    tx.mod_blocks = bpsk_blocks(bits, cfg.m);
    ReceiverState rx;

    for (std::size_t tau = 1; tau <= T; ++tau) {
        Tensor belief;
        if (cfg.belief_enabled)
            belief = model.belief_forward(tape, preprocess_belief(tape, cfg, tx, tau));
        Tensor q = preprocess_parity(tape, cfg, tx, cfg.belief_enabled ? &belief : nullptr, tau);
        Tensor c = model.parity_forward(tape, q, tau, opts.training_norm);
        tx.symbols.push_back(c);
        out.forward_uses_per_episode += l;

        Tensor y;          // receiver-side (equalized under fading)
        Tensor y_raw_pack; // what physically arrived (packed), echoed back
        if (!ctx.fading()) {
            Tensor n = episode_noise(ch.seed, opts.first_episode, kTagForward, tau, B, l, sigma_ff);
            y = sigma_ff == 0.0 ? c : add(tape, c, n);
        } else {
            const GainGrid& h = gains.forward[tau - 1];
            y_raw_pack = complex_gain_packed(tape, pack_subcarriers(tape, c), h);
            if (sigma_ff != 0.0) {
                Tensor n = episode_noise(ch.seed, opts.first_episode, kTagForward, tau, B, l, sigma_ff);
                y_raw_pack = add(tape, y_raw_pack, pack_subcarriers(tape, n));
            }
            y = unpack_subcarriers(
                tape, complex_gain_packed(tape, y_raw_pack, h.reciprocal_inverse()), l);
        }
        rx.received.push_back(y);

        if (tau < T) {
            Tensor ytilde;
            if (!ctx.fading()) {
                if (sigma_fb == 0.0) {
                    ytilde = y;
                } else {
                    Tensor nt = episode_noise(ch.seed, opts.first_episode, kTagFeedback, tau, B, l,
                                              sigma_fb);
                    ytilde = add(tape, y, nt);
                }
            } else {
                const GainGrid& ht = gains.feedback[tau - 1];
                Tensor fb_pack = complex_gain_packed(tape, y_raw_pack, ht);
                if (sigma_fb != 0.0) {
                    Tensor nt = episode_noise(ch.seed, opts.first_episode, kTagFeedback, tau, B, l,
                                              sigma_fb);
                    fb_pack = add(tape, fb_pack, pack_subcarriers(tape, nt));
                }
                Tensor eq = complex_gain_packed(tape, fb_pack, ht.reciprocal_inverse());
                ytilde = unpack_subcarriers(
                    tape,
                    complex_gain_packed(tape, eq, gains.forward[tau - 1].reciprocal_inverse()), l);
            }
            tx.feedback.push_back(ytilde);
            out.feedback_uses_per_episode += l;
        }
    }

    out.logits = model.decoder_forward(tape, preprocess_decoder(tape, cfg, rx));
    out.symbols = tx.symbols;
    return out;
}

EpisodeResult run_episode(GbafModel& model, const ChannelContext& ctx, RandomStream& bits_rng,
                          std::uint64_t episode_index, bool log_symbols) {
    const GbafConfig& cfg = model.config();
    Tensor bits = Tensor::zeros({1, cfg.K});
    for (double& b : bits.data()) b = bits_rng.uniform_below(2) ? 1.0 : 0.0;

    Tape tape;
    tape.set_recording(false);
    EpisodeRunOptions opts;
    opts.first_episode = episode_index;
    opts.training_norm = false;
    opts.log_symbols = log_symbols;
    EpisodeBatchResult batch = run_episode_batch(tape, model, ctx, bits, opts);

    EpisodeResult res;
    res.forward_uses = batch.forward_uses_per_episode;
    res.feedback_uses = batch.feedback_uses_per_episode;
    res.aborted = batch.aborted[0] != 0;

    const LookupTable table = LookupTable::make(cfg.m);
    DecodeScore score = decode_and_score(batch.logits, bits, table);
    res.decoded_bits = std::move(score.bits);
    res.block_errors = score.block_errors[0];
    res.block_error_flag = res.block_errors > 0;
    if (log_symbols) {
        for (const Tensor& s : batch.symbols)
            res.symbol_log.emplace_back(s.data().begin(), s.data().end());
    }
    return res;
}

DecodeScore decode_and_score(const Tensor& logits, const Tensor& true_bits, const LookupTable& table) {
    const std::size_t B = logits.extent(0);
    const std::size_t l = logits.extent(1);
    const std::size_t m = table.m;
    const std::size_t K = l * m;
    if (true_bits.extent(0) != B || true_bits.extent(1) != K)
        throw DimensionError("decode_and_score: bits " + shape_to_string(true_bits.shape()) +
                             " do not match logits " + shape_to_string(logits.shape()));
    const std::vector<std::size_t> picks = argmax_blocks(logits);
    DecodeScore out;
    out.bits.resize(B * K);
    out.block_errors.assign(B, 0);
    const double* tb = true_bits.data().data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < l; ++i) {
            const auto row = table.row(picks[b * l + i]);
            bool wrong = false;
            for (std::size_t j = 0; j < m; ++j) {
                out.bits[b * K + i * m + j] = row[j];
                const std::uint8_t truth = tb[b * K + i * m + j] > 0.5 ? 1 : 0;
                wrong = wrong || (row[j] != truth);
            }
            if (wrong) ++out.block_errors[b];
        }
    }
    return out;
}

} // namespace gbaf
