#include "gbaf/model.hpp"

#include <cmath>

namespace gbaf {

PreprocessMode preprocess_mode_from_string(const std::string& s) {
    if (s == "feedback_only") return PreprocessMode::feedback_only;
    if (s == "noise_only") return PreprocessMode::noise_only;
    if (s == "disentangle") return PreprocessMode::disentangle;
    if (s == "raw") return PreprocessMode::raw;
    throw ConfigError("unknown preprocess mode '" + s +
                      "' (expected feedback_only|noise_only|disentangle|raw)");
}

std::string to_string(PreprocessMode m) {
    switch (m) {
        case PreprocessMode::feedback_only: return "feedback_only";
        case PreprocessMode::noise_only: return "noise_only";
        case PreprocessMode::disentangle: return "disentangle";
        case PreprocessMode::raw: return "raw";
    }
    return "?";
}

std::size_t GbafConfig::d_in_parity() const {
    std::size_t d = m + (belief_enabled ? 2 * m : 0);
    switch (preprocess_mode) {
        case PreprocessMode::feedback_only:
        case PreprocessMode::noise_only:
            d += T - 1;
            break;
        case PreprocessMode::disentangle:
        case PreprocessMode::raw:
            d += 2 * (T - 1);
            break;
    }
    return d;
}

void GbafConfig::validate() const {
    if (m == 0) throw ConfigError("model.m: block size must be positive");
    if (m > 20) throw ConfigError("model.m: block size " + std::to_string(m) + " is unreasonably large (2^m decoder head)");
    if (K == 0 || K % m != 0)
        throw ConfigError("model.K: " + std::to_string(m) + " must divide K=" + std::to_string(K));
    if (T < m)
        throw ConfigError("model.T: rate m/T = " + std::to_string(m) + "/" + std::to_string(T) +
                          " exceeds 1");
    if (d_model == 0) throw ConfigError("model.d_model: must be positive");
    if (n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("model.n_heads: d_model=" + std::to_string(d_model) +
                          " not divisible by n_heads=" + std::to_string(n_heads));
    if (delta == 0) throw ConfigError("model.delta: must be positive");
    if (belief_enabled && n_belief == 0)
        throw ConfigError("model.n_belief: belief network enabled with zero encoder layers");
    if (T < 2)
        throw ConfigError("model.T: at least 2 rounds required (feedback needs T-1 >= 1)");
}

// --- PowerNormalizer ------------------------------------------------------------

PowerNormalizer::PowerNormalizer(std::size_t rounds, double momentum, double eps)
    : mean_(rounds, 0.0), var_(rounds, 1.0), momentum_(momentum), eps_(eps) {}

void PowerNormalizer::set_running_stats(std::span<const double> mean, std::span<const double> var) {
    if (mean.size() != mean_.size() || var.size() != var_.size())
        throw ContractError("power normalizer: running stats length mismatch");
    std::copy(mean.begin(), mean.end(), mean_.begin());
    std::copy(var.begin(), var.end(), var_.begin());
}

Tensor PowerNormalizer::normalize(Tape& tape, const Tensor& x, std::size_t tau, bool training) {
    if (tau < 1 || tau > mean_.size())
        throw ContractError("power_normalize: round " + std::to_string(tau) + " outside [1," +
                            std::to_string(mean_.size()) + "]");
    if (x.rank() != 2)
        throw DimensionError("power_normalize: expected [batch,l], got " + shape_to_string(x.shape()));
    const std::size_t idx = tau - 1;
    if (training) {
        if (x.extent(0) < 2)
            throw ContractError("power_normalize: training mode needs batch >= 2");
        BatchStats stats;
        Tensor out = standardize_batch(tape, x, eps_, &stats);
        mean_[idx] = (1.0 - momentum_) * mean_[idx] + momentum_ * stats.mean;
        var_[idx] = (1.0 - momentum_) * var_[idx] + momentum_ * stats.var;
        return out;
    }
    const double inv_std = 1.0 / std::sqrt(var_[idx] + eps_);
    return affine(tape, x, inv_std, -mean_[idx] * inv_std);
}

// --- EncoderUnit ------------------------------------------------------------------

EncoderUnit EncoderUnit::init(HeadKind head, const GbafConfig& cfg, RandomStream& rng) {
    EncoderUnit unit;
    unit.head = head;
    unit.m = cfg.m;

    FeatureExtractorConfig fxc;
    fxc.design = cfg.extractor_design;
    fxc.act = cfg.activation;
    fxc.d_model = cfg.d_model;
    std::size_t n_layers = 0;
    std::size_t d_out = 0;
    switch (head) {
        case HeadKind::parity:
            fxc.d_in = cfg.d_in_parity();
            // noise/feedback history fills the trailing T-1 slots in every mode
            fxc.noise_start = fxc.d_in - cfg.history_slots();
            fxc.noise_len = cfg.history_slots();
            n_layers = cfg.n_parity;
            d_out = 1;
            break;
        case HeadKind::belief:
            fxc.d_in = cfg.d_in_belief();
            fxc.noise_start = 0;
            fxc.noise_len = fxc.d_in; // the whole input is received feedback
            n_layers = cfg.n_belief;
            d_out = 2 * cfg.m;
            break;
        case HeadKind::decoder:
            fxc.d_in = cfg.d_in_decoder();
            fxc.noise_start = 0;
            fxc.noise_len = fxc.d_in;
            n_layers = cfg.n_decoder;
            d_out = cfg.alphabet();
            break;
    }
    unit.extract = FeatureExtractor::init(fxc, rng);
    unit.s2s = EncoderStack::init(n_layers, cfg.d_model, cfg.n_heads, cfg.delta, cfg.activation,
                                  cfg.positional_encoding, cfg.l(), rng);
    unit.map = LinearLayer::init(cfg.d_model, d_out, rng);
    return unit;
}

Tensor EncoderUnit::forward(Tape& tape, const Tensor& q) const {
    Tensor u = map.forward(tape, s2s.forward(tape, extract.forward(tape, q)));
    if (head != HeadKind::belief) return u;
    // 1x2m -> mx2 reshape, softmax per bit, back
    Shape paired = u.shape();
    paired.back() = 2;
    paired.insert(paired.end() - 1, m);
    Tensor pairs = softmax(tape, reshape(tape, u, paired), paired.size() - 1);
    return reshape(tape, pairs, u.shape());
}

void EncoderUnit::append_params(const std::string& prefix, std::vector<NamedParam>& out) const {
    extract.append_params(prefix + ".extract", out);
    s2s.append_params(prefix + ".s2s", out);
    map.append_params(prefix + ".map", out);
}

// --- preprocessing ------------------------------------------------------------------

Tensor bpsk_blocks(const Tensor& bits, std::size_t m) {
    if (bits.rank() != 2)
        throw DimensionError("bpsk_blocks: expected [B,K], got " + shape_to_string(bits.shape()));
    const std::size_t B = bits.extent(0);
    const std::size_t K = bits.extent(1);
    if (K % m != 0) throw ContractError("bpsk_blocks: m does not divide K");
    Tensor out = Tensor::uninit({B, K / m, m});
    const double* pb = bits.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < B * K; ++i) po[i] = 2.0 * pb[i] - 1.0;
    return out;
}

namespace {

Tensor unsqueeze_last(Tape& tape, const Tensor& x) {
    Shape s = x.shape();
    s.push_back(1);
    return reshape(tape, x, std::move(s));
}

} // namespace

Tensor preprocess_parity(Tape& tape, const GbafConfig& cfg, const KnowledgeState& state,
                         const Tensor* belief, std::size_t tau) {
    if (tau < 1 || tau > cfg.T)
        throw ContractError("preprocess_parity: round " + std::to_string(tau) + " outside [1," +
                            std::to_string(cfg.T) + "]");
    if (cfg.belief_enabled != (belief != nullptr))
        throw ContractError("preprocess_parity: belief tensor presence must match config");
    const std::size_t B = state.mod_blocks.extent(0);
    const std::size_t l = cfg.l();
    const std::size_t hist = state.symbols.size(); // tau-1 rounds of history
    if (hist + 1 != tau)
        throw ContractError("preprocess_parity: state has " + std::to_string(hist) +
                            " rounds of history, expected " + std::to_string(tau - 1));

    std::vector<Tensor> parts;
    parts.reserve(2 * cfg.T + 2);
    parts.push_back(state.mod_blocks);
    if (belief) parts.push_back(*belief);

    const std::size_t pad = cfg.history_slots() - hist;
    Tensor zeros_pad = pad > 0 ? Tensor::zeros({B, l, pad}) : Tensor();

    const bool keep_symbols = cfg.preprocess_mode == PreprocessMode::disentangle ||
                              cfg.preprocess_mode == PreprocessMode::raw;
    if (keep_symbols) {
        for (std::size_t j = 0; j < hist; ++j)
            parts.push_back(unsqueeze_last(tape, state.symbols[j]));
        if (pad > 0) parts.push_back(zeros_pad);
    }
    const bool subtract = cfg.preprocess_mode == PreprocessMode::noise_only ||
                          cfg.preprocess_mode == PreprocessMode::disentangle;
    for (std::size_t j = 0; j < hist; ++j) {
        Tensor term = subtract ? sub(tape, state.feedback[j], state.symbols[j]) : state.feedback[j];
        parts.push_back(unsqueeze_last(tape, term));
    }
    if (pad > 0) parts.push_back(zeros_pad);

    Tensor q = concat_last(tape, parts);
    if (q.shape().back() != cfg.d_in_parity())
        throw ContractError("preprocess_parity: built width " + std::to_string(q.shape().back()) +
                            " != d_in " + std::to_string(cfg.d_in_parity()));
    return q;
}

Tensor preprocess_belief(Tape& tape, const GbafConfig& cfg, const KnowledgeState& state,
                         std::size_t tau) {
    if (!cfg.belief_enabled) throw ContractError("preprocess_belief: belief network disabled");
    if (tau < 1) throw ContractError("preprocess_belief: round must be >= 1");
    const std::size_t B = state.mod_blocks.extent(0);
    const std::size_t l = cfg.l();
    const std::size_t hist = std::min(state.feedback.size(), tau - 1);
    std::vector<Tensor> parts;
    for (std::size_t j = 0; j < hist; ++j) parts.push_back(unsqueeze_last(tape, state.feedback[j]));
    const std::size_t pad = cfg.history_slots() - hist;
    if (pad > 0) parts.push_back(Tensor::zeros({B, l, pad}));
    return concat_last(tape, parts);
}

Tensor preprocess_decoder(Tape& tape, const GbafConfig& cfg, const ReceiverState& state) {
    if (state.received.size() != cfg.T)
        throw ContractError("preprocess_decoder: episode incomplete, have " +
                            std::to_string(state.received.size()) + "/" + std::to_string(cfg.T) +
                            " rounds");
    std::vector<Tensor> parts;
    parts.reserve(cfg.T);
    for (const Tensor& y : state.received) parts.push_back(unsqueeze_last(tape, y));
    return concat_last(tape, parts);
}

// --- GbafModel -------------------------------------------------------------------------

GbafModel GbafModel::init(const GbafConfig& cfg, std::uint64_t param_seed) {
    cfg.validate();
    GbafModel model;
    model.cfg_ = cfg;
    RandomStream rng(param_seed, {0x70617261u}); // parameter stream
    model.parity_ = EncoderUnit::init(HeadKind::parity, cfg, rng);
    if (cfg.belief_enabled) model.belief_ = EncoderUnit::init(HeadKind::belief, cfg, rng);
    model.decoder_ = EncoderUnit::init(HeadKind::decoder, cfg, rng);
    model.norm_ = PowerNormalizer(cfg.T);
    return model;
}

EncoderUnit& GbafModel::belief_unit() {
    if (!belief_) throw ContractError("belief network is disabled in this config");
    return *belief_;
}

Tensor GbafModel::parity_forward(Tape& tape, const Tensor& q, std::size_t tau, bool training) {
    Tensor u = parity_.forward(tape, q); // [B,l,1]
    Shape flat{u.extent(0), u.extent(1)};
    return norm_.normalize(tape, reshape(tape, u, flat), tau, training);
}

Tensor GbafModel::belief_forward(Tape& tape, const Tensor& q_tilde) const {
    if (!belief_) throw ContractError("belief network is disabled in this config");
    return belief_->forward(tape, q_tilde);
}

Tensor GbafModel::decoder_forward(Tape& tape, const Tensor& q_hat) const {
    return decoder_.forward(tape, q_hat);
}

std::vector<NamedParam> GbafModel::named_parameters() const {
    std::vector<NamedParam> out;
    parity_.append_params("parity", out);
    if (belief_) belief_->append_params("belief", out);
    decoder_.append_params("decoder", out);
    return out;
}

std::vector<Tensor> GbafModel::parameters() const {
    std::vector<Tensor> out;
    for (auto& np : named_parameters()) out.push_back(np.tensor);
    return out;
}

std::size_t GbafModel::param_count() const {
    std::size_t n = 0;
    for (const auto& np : named_parameters()) n += np.tensor.size();
    return n;
}

void GbafModel::zero_grads() {
    for (auto& p : parameters()) p.zero_grad();
}

std::vector<std::size_t> argmax_blocks(const Tensor& logits) {
    const std::size_t c = logits.shape().back();
    const std::size_t rows = logits.size() / c;
    std::vector<std::size_t> out(rows);
    const double* p = logits.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = p + r * c;
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (row[j] > row[best]) best = j;
        out[r] = best;
    }
    return out;
}

} // namespace gbaf
