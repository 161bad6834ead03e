#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "gbaf/tensor.hpp"

namespace gbaf {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

struct LinearLayer {
    Tensor weight; // [d_in, d_out]
    Tensor bias;   // [d_out]; undefined for bias-free layers

    /// Weights uniform in +-sqrt(1/d_in), bias zero.
    static LinearLayer init(std::size_t d_in, std::size_t d_out, RandomStream& rng);
    /// Weight-only layer (the key projection: a key bias shifts every
    /// attention score in a row equally, which softmax cancels exactly).
    static LinearLayer init_no_bias(std::size_t d_in, std::size_t d_out, RandomStream& rng);

    Tensor forward(Tape& tape, const Tensor& x) const;

    std::size_t d_in() const { return weight.extent(0); }
    std::size_t d_out() const { return weight.extent(1); }
    std::size_t param_count() const { return weight.size() + (bias.defined() ? bias.size() : 0); }
    void append_params(const std::string& prefix, std::vector<NamedParam>& out) const;
};

struct LayerNorm {
    Tensor gain; // [d], init 1
    Tensor bias; // [d], init 0
    double eps = 1e-6;

    static LayerNorm init(std::size_t d, double eps = 1e-6);

    /// Standardizes over the last axis (biased variance), then applies the
    /// affine gain/bias.
    Tensor forward(Tape& tape, const Tensor& x) const;

    std::size_t param_count() const { return gain.size() + bias.size(); }
    void append_params(const std::string& prefix, std::vector<NamedParam>& out) const;
};

enum class FxDesign { A, B, C, D, E, F, G };
FxDesign fx_design_from_string(const std::string& s);
std::string to_string(FxDesign d);

struct FeatureExtractorConfig {
    FxDesign design = FxDesign::C;
    Activation act = Activation::relu;
    std::size_t d_in = 0;
    std::size_t d_model = 0;
    // input columns holding the noise realizations (designs D..G)
    std::size_t noise_start = 0;
    std::size_t noise_len = 0;
};

/// The MLP front of every encoder unit. Designs A..C process the whole
/// knowledge vector; D/E run two weight-shared flows with the noise channels
/// negated in the second; F/G run the flow on the noise channels only and
/// merge with the untouched bit/symbol channels.
class FeatureExtractor {
public:
    static FeatureExtractor init(const FeatureExtractorConfig& cfg, RandomStream& rng);

    Tensor forward(Tape& tape, const Tensor& q) const;

    /// The two weight-shared flow outputs of designs D/E (pre-aggregation).
    std::pair<Tensor, Tensor> forward_flows(Tape& tape, const Tensor& q) const;

    const FeatureExtractorConfig& config() const { return cfg_; }
    std::size_t param_count() const;
    /// Closed-form parameter count from the design's layer inventory.
    static std::size_t expected_param_count(const FeatureExtractorConfig& cfg);
    void append_params(const std::string& prefix, std::vector<NamedParam>& out) const;

private:
    Tensor flow(Tape& tape, const Tensor& x) const;
    Tensor negate_noise(Tape& tape, const Tensor& q) const;
    Tensor passthrough(Tape& tape, const Tensor& q) const;

    FeatureExtractorConfig cfg_;
    std::vector<LinearLayer> layers_; // the (shared) flow
    LinearLayer aggregate_;           // D/E/G merge layer
    bool has_aggregate_ = false;
};

} // namespace gbaf
