#include "gbaf/nn.hpp"

#include <cassert>
#include <cmath>

namespace gbaf {

// --- LinearLayer -------------------------------------------------------------

LinearLayer LinearLayer::init(std::size_t d_in, std::size_t d_out, RandomStream& rng) {
    LinearLayer layer = init_no_bias(d_in, d_out, rng);
    layer.bias = Tensor::zeros({d_out}, true);
    return layer;
}

LinearLayer LinearLayer::init_no_bias(std::size_t d_in, std::size_t d_out, RandomStream& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(d_in));
    LinearLayer layer;
    layer.weight = Tensor::uniform({d_in, d_out}, -bound, bound, rng, true);
    return layer;
}

Tensor LinearLayer::forward(Tape& tape, const Tensor& x) const {
    if (x.shape().back() != d_in())
        throw DimensionError("linear_forward: input extent " + std::to_string(x.shape().back()) +
                             " != d_in " + std::to_string(d_in()));
    return linear(tape, x, weight, bias);
}

void LinearLayer::append_params(const std::string& prefix, std::vector<NamedParam>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

// --- LayerNorm ----------------------------------------------------------------

LayerNorm LayerNorm::init(std::size_t d, double eps) {
    LayerNorm ln;
    ln.gain = Tensor::full({d}, 1.0, true);
    ln.bias = Tensor::zeros({d}, true);
    ln.eps = eps;
    return ln;
}

Tensor LayerNorm::forward(Tape& tape, const Tensor& x) const {
    const std::size_t d = gain.size();
    if (x.shape().back() != d)
        throw DimensionError("layernorm_forward: input extent " + std::to_string(x.shape().back()) +
                             " != " + std::to_string(d));
    const std::size_t rows = x.size() / d;
    Tensor out = Tensor::uninit(x.shape());
    auto stats = std::make_shared<std::vector<double>>(rows * 2); // mean, inv_std per row

    const double* px = x.data().data();
    const double* pg = gain.data().data();
    const double* pb = bias.data().data();
    double* po = out.data().data();
    double* ps = stats->data();
    const double e = eps;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
        const double* row = px + r * static_cast<std::ptrdiff_t>(d);
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv_std = 1.0 / std::sqrt(var + e);
        ps[2 * r] = mean;
        ps[2 * r + 1] = inv_std;
        double* orow = po + r * static_cast<std::ptrdiff_t>(d);
        for (std::size_t j = 0; j < d; ++j) orow[j] = (row[j] - mean) * inv_std * pg[j] + pb[j];
    }

    const bool rec = tape.recording() && (x.requires_grad() || gain.requires_grad() || bias.requires_grad());
    if (rec) {
        out.set_requires_grad(true);
        Tensor xv = x, gv = gain, bv = bias, ov = out;
        tape.record({x, gain, bias, out}, [xv, gv, bv, ov, stats, rows, d]() {
            const double* dy = ov.grad().data();
            const double* px2 = xv.data().data();
            const double* pg2 = gv.data().data();
            const double* ps2 = stats->data();
            double* gx = xv.requires_grad() ? xv.grad().data() : nullptr;
            double* gg = gv.requires_grad() ? gv.grad().data() : nullptr;
            double* gb = bv.requires_grad() ? bv.grad().data() : nullptr;
            if (gx) {
#pragma omp parallel for schedule(static)
                for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
                    const double mean = ps2[2 * r];
                    const double inv_std = ps2[2 * r + 1];
                    const double* row = px2 + r * static_cast<std::ptrdiff_t>(d);
                    const double* drow = dy + r * static_cast<std::ptrdiff_t>(d);
                    double* grow = gx + r * static_cast<std::ptrdiff_t>(d);
                    double mdx = 0.0, mdxx = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double xhat = (row[j] - mean) * inv_std;
                        const double dxhat = drow[j] * pg2[j];
                        mdx += dxhat;
                        mdxx += dxhat * xhat;
                    }
                    mdx /= static_cast<double>(d);
                    mdxx /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double xhat = (row[j] - mean) * inv_std;
                        const double dxhat = drow[j] * pg2[j];
                        grow[j] += (dxhat - mdx - xhat * mdxx) * inv_std;
                    }
                }
            }
            if (gg || gb) {
                for (std::size_t r = 0; r < rows; ++r) {
                    const double mean = ps2[2 * r];
                    const double inv_std = ps2[2 * r + 1];
                    const double* row = px2 + r * d;
                    const double* drow = dy + r * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        if (gg) gg[j] += drow[j] * (row[j] - mean) * inv_std;
                        if (gb) gb[j] += drow[j];
                    }
                }
            }
        });
    }
    return out;
}

void LayerNorm::append_params(const std::string& prefix, std::vector<NamedParam>& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
}

// --- FeatureExtractor -----------------------------------------------------------

FxDesign fx_design_from_string(const std::string& s) {
    if (s.size() == 1 && s[0] >= 'A' && s[0] <= 'G') return static_cast<FxDesign>(s[0] - 'A');
    if (s.size() == 1 && s[0] >= 'a' && s[0] <= 'g') return static_cast<FxDesign>(s[0] - 'a');
    throw ConfigError("unknown feature extractor design '" + s + "' (expected A..G)");
}

std::string to_string(FxDesign d) {
    return std::string(1, static_cast<char>('A' + static_cast<int>(d)));
}

namespace {

std::size_t linear_params(std::size_t a, std::size_t b) { return a * b + b; }

} // namespace

std::size_t FeatureExtractor::expected_param_count(const FeatureExtractorConfig& cfg) {
    const std::size_t d = cfg.d_model;
    const std::size_t pass = cfg.d_in - cfg.noise_len;
    switch (cfg.design) {
        case FxDesign::A: return linear_params(cfg.d_in, d);
        case FxDesign::B: return linear_params(cfg.d_in, d) + linear_params(d, d);
        case FxDesign::C:
            return linear_params(cfg.d_in, d) + 2 * linear_params(d, d);
        case FxDesign::D:
            return linear_params(cfg.d_in, d) + 2 * linear_params(d, d) + linear_params(2 * d, d);
        case FxDesign::E:
            return linear_params(cfg.d_in, d) + linear_params(d, d) + linear_params(2 * d, d);
        case FxDesign::F:
            return linear_params(cfg.noise_len, d) + linear_params(d, d) + linear_params(d, d - pass);
        case FxDesign::G:
            return linear_params(cfg.noise_len, d) + 2 * linear_params(d, d) +
                   linear_params(pass + d, d);
    }
    throw ConfigError("unknown feature extractor design");
}

FeatureExtractor FeatureExtractor::init(const FeatureExtractorConfig& cfg, RandomStream& rng) {
    FeatureExtractor fx;
    fx.cfg_ = cfg;
    const std::size_t d = cfg.d_model;
    if (cfg.d_in == 0 || d == 0) throw ConfigError("feature extractor: d_in and d_model must be positive");
    const bool needs_noise_slice = cfg.design == FxDesign::D || cfg.design == FxDesign::E ||
                                   cfg.design == FxDesign::F || cfg.design == FxDesign::G;
    if (needs_noise_slice) {
        if (cfg.noise_len == 0 || cfg.noise_start + cfg.noise_len > cfg.d_in)
            throw ConfigError("feature extractor design " + to_string(cfg.design) +
                              " needs a valid noise channel slice");
    }
    const std::size_t pass = cfg.d_in - cfg.noise_len;
    switch (cfg.design) {
        case FxDesign::A:
            fx.layers_.push_back(LinearLayer::init(cfg.d_in, d, rng));
            break;
        case FxDesign::B:
            fx.layers_.push_back(LinearLayer::init(cfg.d_in, d, rng));
            fx.layers_.push_back(LinearLayer::init(d, d, rng));
            break;
        case FxDesign::C:
            fx.layers_.push_back(LinearLayer::init(cfg.d_in, d, rng));
            fx.layers_.push_back(LinearLayer::init(d, d, rng));
            fx.layers_.push_back(LinearLayer::init(d, d, rng));
            break;
        case FxDesign::D:
            fx.layers_.push_back(LinearLayer::init(cfg.d_in, d, rng));
            fx.layers_.push_back(LinearLayer::init(d, d, rng));
            fx.layers_.push_back(LinearLayer::init(d, d, rng));
            fx.aggregate_ = LinearLayer::init(2 * d, d, rng);
            fx.has_aggregate_ = true;
            break;
        case FxDesign::E:
            fx.layers_.push_back(LinearLayer::init(cfg.d_in, d, rng));
            fx.layers_.push_back(LinearLayer::init(d, d, rng));
            fx.aggregate_ = LinearLayer::init(2 * d, d, rng);
            fx.has_aggregate_ = true;
            break;
        case FxDesign::F:
            if (pass >= d)
                throw ConfigError("design F: passthrough width " + std::to_string(pass) +
                                  " leaves no room in d_model " + std::to_string(d));
            fx.layers_.push_back(LinearLayer::init(cfg.noise_len, d, rng));
            fx.layers_.push_back(LinearLayer::init(d, d, rng));
            fx.layers_.push_back(LinearLayer::init(d, d - pass, rng));
            break;
        case FxDesign::G:
            fx.layers_.push_back(LinearLayer::init(cfg.noise_len, d, rng));
            fx.layers_.push_back(LinearLayer::init(d, d, rng));
            fx.layers_.push_back(LinearLayer::init(d, d, rng));
            fx.aggregate_ = LinearLayer::init(pass + d, d, rng);
            fx.has_aggregate_ = true;
            break;
    }
    assert(fx.param_count() == expected_param_count(cfg));
    return fx;
}

std::size_t FeatureExtractor::param_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers_) n += layer.param_count();
    if (has_aggregate_) n += aggregate_.param_count();
    return n;
}

Tensor FeatureExtractor::flow(Tape& tape, const Tensor& x) const {
    Tensor h = layers_[0].forward(tape, x);
    for (std::size_t i = 1; i < layers_.size(); ++i) {
        h = activation(tape, cfg_.act, h);
        h = layers_[i].forward(tape, h);
    }
    return h;
}

Tensor FeatureExtractor::negate_noise(Tape& tape, const Tensor& q) const {
    std::vector<Tensor> parts;
    if (cfg_.noise_start > 0) parts.push_back(slice_last(tape, q, 0, cfg_.noise_start));
    parts.push_back(negate(tape, slice_last(tape, q, cfg_.noise_start, cfg_.noise_len)));
    const std::size_t tail = cfg_.d_in - cfg_.noise_start - cfg_.noise_len;
    if (tail > 0) parts.push_back(slice_last(tape, q, cfg_.noise_start + cfg_.noise_len, tail));
    return concat_last(tape, parts);
}

Tensor FeatureExtractor::passthrough(Tape& tape, const Tensor& q) const {
    std::vector<Tensor> parts;
    if (cfg_.noise_start > 0) parts.push_back(slice_last(tape, q, 0, cfg_.noise_start));
    const std::size_t tail = cfg_.d_in - cfg_.noise_start - cfg_.noise_len;
    if (tail > 0) parts.push_back(slice_last(tape, q, cfg_.noise_start + cfg_.noise_len, tail));
    if (parts.size() == 1) return parts[0];
    return concat_last(tape, parts);
}

std::pair<Tensor, Tensor> FeatureExtractor::forward_flows(Tape& tape, const Tensor& q) const {
    if (cfg_.design != FxDesign::D && cfg_.design != FxDesign::E)
        throw ContractError("forward_flows: only designs D/E have parallel flows");
    return {flow(tape, q), flow(tape, negate_noise(tape, q))};
}

Tensor FeatureExtractor::forward(Tape& tape, const Tensor& q) const {
    if (q.shape().back() != cfg_.d_in)
        throw DimensionError("feature_extract: input extent " + std::to_string(q.shape().back()) +
                             " != d_in " + std::to_string(cfg_.d_in));
    switch (cfg_.design) {
        case FxDesign::A:
        case FxDesign::B:
        case FxDesign::C:
            return flow(tape, q);
        case FxDesign::D:
        case FxDesign::E: {
            auto [f1, f2] = forward_flows(tape, q);
            std::vector<Tensor> parts{f1, f2};
            return aggregate_.forward(tape, concat_last(tape, parts));
        }
        case FxDesign::F: {
            Tensor feat = flow(tape, slice_last(tape, q, cfg_.noise_start, cfg_.noise_len));
            if (cfg_.noise_len == cfg_.d_in) return feat;
            std::vector<Tensor> parts{passthrough(tape, q), feat};
            return concat_last(tape, parts);
        }
        case FxDesign::G: {
            Tensor feat = flow(tape, slice_last(tape, q, cfg_.noise_start, cfg_.noise_len));
            if (cfg_.noise_len == cfg_.d_in) return aggregate_.forward(tape, feat);
            std::vector<Tensor> parts{passthrough(tape, q), feat};
            return aggregate_.forward(tape, concat_last(tape, parts));
        }
    }
    throw ConfigError("unknown feature extractor design");
}

void FeatureExtractor::append_params(const std::string& prefix, std::vector<NamedParam>& out) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
        layers_[i].append_params(prefix + ".l" + std::to_string(i), out);
    if (has_aggregate_) aggregate_.append_params(prefix + ".agg", out);
}

} // namespace gbaf
