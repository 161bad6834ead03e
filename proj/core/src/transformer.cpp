#include "gbaf/transformer.hpp"

#include <cmath>

namespace gbaf {

Tensor scaled_dot_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.shape().back() != k.shape().back())
        throw DimensionError("scaled_dot_attention: Q/K key widths disagree, " +
                             shape_to_string(q.shape()) + " vs " + shape_to_string(k.shape()));
    if (k.shape()[k.rank() - 2] != v.shape()[v.rank() - 2])
        throw DimensionError("scaled_dot_attention: K/V counts disagree, " +
                             shape_to_string(k.shape()) + " vs " + shape_to_string(v.shape()));
    const double d_k = static_cast<double>(q.shape().back());
    Tensor scores = scale(tape, matmul(tape, q, k, /*transpose_b=*/true), 1.0 / std::sqrt(d_k));
    Tensor weights = softmax(tape, scores, scores.rank() - 1);
    return matmul(tape, weights, v);
}

EncoderLayer EncoderLayer::init(std::size_t d_model, std::size_t n_heads, std::size_t delta,
                                Activation act, RandomStream& rng) {
    if (n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("encoder layer: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
    EncoderLayer layer;
    layer.ln1 = LayerNorm::init(d_model);
    layer.ln2 = LayerNorm::init(d_model);
    layer.wq = LinearLayer::init(d_model, d_model, rng);
    layer.wk = LinearLayer::init_no_bias(d_model, d_model, rng);
    layer.wv = LinearLayer::init(d_model, d_model, rng);
    layer.wo = LinearLayer::init(d_model, d_model, rng);
    layer.ffn1 = LinearLayer::init(d_model, delta * d_model, rng);
    layer.ffn2 = LinearLayer::init(delta * d_model, d_model, rng);
    layer.n_heads = n_heads;
    layer.act = act;
    return layer;
}

Tensor EncoderLayer::forward(Tape& tape, const Tensor& x) const {
    if (x.shape().back() != d_model())
        throw DimensionError("encoder_layer_forward: input extent " +
                             std::to_string(x.shape().back()) + " != d_model " +
                             std::to_string(d_model()));
    Tensor xn = ln1.forward(tape, x);
    Tensor q = wq.forward(tape, xn);
    Tensor k = wk.forward(tape, xn);
    Tensor v = wv.forward(tape, xn);
    Tensor attn;
    if (n_heads == 1) {
        attn = scaled_dot_attention(tape, q, k, v);
    } else {
        const std::size_t d_k = d_model() / n_heads;
        std::vector<Tensor> heads;
        heads.reserve(n_heads);
        for (std::size_t h = 0; h < n_heads; ++h) {
            Tensor qh = slice_last(tape, q, h * d_k, d_k);
            Tensor kh = slice_last(tape, k, h * d_k, d_k);
            Tensor vh = slice_last(tape, v, h * d_k, d_k);
            heads.push_back(scaled_dot_attention(tape, qh, kh, vh));
        }
        attn = concat_last(tape, heads);
    }
    Tensor h = add(tape, x, wo.forward(tape, attn));
    Tensor hn = ln2.forward(tape, h);
    Tensor f = ffn2.forward(tape, activation(tape, act, ffn1.forward(tape, hn)));
    return add(tape, h, f);
}

void EncoderLayer::append_params(const std::string& prefix, std::vector<NamedParam>& out) const {
    ln1.append_params(prefix + ".ln1", out);
    ln2.append_params(prefix + ".ln2", out);
    wq.append_params(prefix + ".wq", out);
    wk.append_params(prefix + ".wk", out);
    wv.append_params(prefix + ".wv", out);
    wo.append_params(prefix + ".wo", out);
    ffn1.append_params(prefix + ".ffn1", out);
    ffn2.append_params(prefix + ".ffn2", out);
}

EncoderStack EncoderStack::init(std::size_t n_layers, std::size_t d_model, std::size_t n_heads,
                                std::size_t delta, Activation act, bool positional,
                                std::size_t seq_len, RandomStream& rng) {
    EncoderStack stack;
    stack.layers.reserve(n_layers);
    for (std::size_t i = 0; i < n_layers; ++i)
        stack.layers.push_back(EncoderLayer::init(d_model, n_heads, delta, act, rng));
    stack.final_norm = LayerNorm::init(d_model);
    if (positional) {
        const double bound = std::sqrt(1.0 / static_cast<double>(d_model));
        stack.pos_embedding = Tensor::uniform({seq_len, d_model}, -bound, bound, rng, true);
    }
    return stack;
}

Tensor EncoderStack::forward(Tape& tape, const Tensor& x) const {
    Tensor h = x;
    if (pos_embedding.defined()) h = add_broadcast(tape, h, pos_embedding);
    for (const auto& layer : layers) h = layer.forward(tape, h);
    return final_norm.forward(tape, h);
}

void EncoderStack::append_params(const std::string& prefix, std::vector<NamedParam>& out) const {
    if (pos_embedding.defined()) out.push_back({prefix + ".pos_embedding", pos_embedding});
    for (std::size_t i = 0; i < layers.size(); ++i)
        layers[i].append_params(prefix + ".layer" + std::to_string(i), out);
    final_norm.append_params(prefix + ".final_norm", out);
}

} // namespace gbaf
