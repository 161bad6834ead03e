#pragma once

#include <cstddef>
#include <vector>

#include "gbaf/nn.hpp"

namespace gbaf {

/// softmax(Q K^T / sqrt(d_k)) V. Q: [..,n,d_k], K: [..,kk,d_k], V: [..,kk,d_v];
/// leading dims of K/V must match Q's (or all three rank 2).
Tensor scaled_dot_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v);

/// Pre-layer-norm encoder layer:
///   h = x + MHA(LN1(x));  out = h + FFN(LN2(h))
struct EncoderLayer {
    LayerNorm ln1, ln2;
    LinearLayer wq, wk, wv, wo;   // [d_model, d_model], heads partition the columns
    LinearLayer ffn1, ffn2;       // d_model -> delta*d_model -> d_model
    std::size_t n_heads = 1;
    Activation act = Activation::relu;

    static EncoderLayer init(std::size_t d_model, std::size_t n_heads, std::size_t delta,
                             Activation act, RandomStream& rng);

    Tensor forward(Tape& tape, const Tensor& x) const;

    std::size_t d_model() const { return wq.d_in(); }
    void append_params(const std::string& prefix, std::vector<NamedParam>& out) const;
};

/// N encoder layers followed by a final LayerNorm. A learned positional
/// embedding is added to the input when enabled (off by default; the
/// per-position knowledge vectors already identify their block).
struct EncoderStack {
    std::vector<EncoderLayer> layers;
    LayerNorm final_norm;
    Tensor pos_embedding; // [seq_len, d_model] when enabled, otherwise undefined

    static EncoderStack init(std::size_t n_layers, std::size_t d_model, std::size_t n_heads,
                             std::size_t delta, Activation act, bool positional,
                             std::size_t seq_len, RandomStream& rng);

    Tensor forward(Tape& tape, const Tensor& x) const;

    void append_params(const std::string& prefix, std::vector<NamedParam>& out) const;
};

} // namespace gbaf
