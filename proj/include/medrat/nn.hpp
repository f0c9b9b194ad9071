#pragma once

// Transformer building blocks on top of the autograd ops. Layers are
// pre-norm: x + f(LayerNorm(x)).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "medrat/ops.hpp"
#include "medrat/rng.hpp"

namespace medrat::nn {

template <typename T>
using Var = ag::Var<T>;
template <typename T>
using ParamRefs = std::vector<ag::Parameter<T>*>;

template <typename T>
struct Linear {
  ag::Parameter<T> weight;  // in x out
  ag::Parameter<T> bias;    // 1 x out

  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng)
      : weight(name + ".weight", random_normal<T>(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
        bias(name + ".bias", Matrix<T>::Zero(1, out)) {}

  Var<T> operator()(const Var<T>& x) {
    auto& t = *x.tape();
    return ag::add_row(ag::matmul(x, t.parameter(weight)), t.parameter(bias));
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename T>
struct LayerNorm {
  ag::Parameter<T> gain;
  ag::Parameter<T> bias;

  LayerNorm() = default;
  LayerNorm(const std::string& name, Eigen::Index width)
      : gain(name + ".gain", Matrix<T>::Ones(1, width)), bias(name + ".bias", Matrix<T>::Zero(1, width)) {}

  Var<T> operator()(const Var<T>& x) {
    auto& t = *x.tape();
    return ag::layer_norm(x, t.parameter(gain), t.parameter(bias));
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }
};

template <typename T>
struct MultiHeadAttention {
  Linear<T> query, key, value, output;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, Eigen::Index width, int num_heads, Rng& rng)
      : query(name + ".query", width, width, rng),
        key(name + ".key", width, width, rng),
        value(name + ".value", width, width, rng),
        output(name + ".output", width, width, rng),
        heads(num_heads) {}

  Var<T> operator()(const Var<T>& xq, const Var<T>& xkv, const ag::AttentionLayout& layout, bool causal = false,
                    const std::vector<std::uint8_t>* key_mask = nullptr,
                    ag::AttentionWeights<T>* weights = nullptr) {
    auto a = ag::attention(query(xq), key(xkv), value(xkv), layout, heads, causal, key_mask, weights);
    return output(a);
  }

  void collect(ParamRefs<T>& out) {
    query.collect(out);
    key.collect(out);
    value.collect(out);
    output.collect(out);
  }
};

template <typename T>
struct FeedForward {
  Linear<T> in, out;

  FeedForward() = default;
  FeedForward(const std::string& name, Eigen::Index width, Eigen::Index hidden, Rng& rng)
      : in(name + ".in", width, hidden, rng), out(name + ".out", hidden, width, rng) {}

  Var<T> operator()(const Var<T>& x) { return out(ag::relu(in(x))); }

  void collect(ParamRefs<T>& refs) {
    in.collect(refs);
    out.collect(refs);
  }
};

/// Self-attention block followed by a position-wise feed-forward block.
template <typename T>
struct EncoderLayer {
  LayerNorm<T> norm1, norm2;
  MultiHeadAttention<T> attn;
  FeedForward<T> ff;

  EncoderLayer() = default;
  EncoderLayer(const std::string& name, Eigen::Index width, int heads, Eigen::Index hidden, Rng& rng)
      : norm1(name + ".norm1", width),
        norm2(name + ".norm2", width),
        attn(name + ".attn", width, heads, rng),
        ff(name + ".ff", width, hidden, rng) {}

  Var<T> operator()(const Var<T>& x, const Segments& segs, const std::vector<std::uint8_t>* key_mask = nullptr,
                    ag::AttentionWeights<T>* weights = nullptr) {
    const ag::AttentionLayout layout{segs, segs};
    auto h = norm1(x);
    auto y = ag::add(x, attn(h, h, layout, false, key_mask, weights));
    return ag::add(y, ff(norm2(y)));
  }

  void collect(ParamRefs<T>& out) {
    norm1.collect(out);
    attn.collect(out);
    norm2.collect(out);
    ff.collect(out);
  }
};

/// Causal self-attention, cross-attention over a conditioning memory, then
/// feed-forward.
template <typename T>
struct DecoderLayer {
  LayerNorm<T> norm1, norm2, norm3;
  MultiHeadAttention<T> self_attn, cross_attn;
  FeedForward<T> ff;

  DecoderLayer() = default;
  DecoderLayer(const std::string& name, Eigen::Index width, int heads, Eigen::Index hidden, Rng& rng)
      : norm1(name + ".norm1", width),
        norm2(name + ".norm2", width),
        norm3(name + ".norm3", width),
        self_attn(name + ".self_attn", width, heads, rng),
        cross_attn(name + ".cross_attn", width, heads, rng),
        ff(name + ".ff", width, hidden, rng) {}

  Var<T> operator()(const Var<T>& x, const Segments& token_segs, const Var<T>& memory, const Segments& memory_segs,
                    ag::AttentionWeights<T>* cross_weights = nullptr) {
    auto h = norm1(x);
    auto y = ag::add(x, self_attn(h, h, ag::AttentionLayout{token_segs, token_segs}, true));
    auto c = cross_attn(norm2(y), memory, ag::AttentionLayout{token_segs, memory_segs}, false, nullptr, cross_weights);
    y = ag::add(y, c);
    return ag::add(y, ff(norm3(y)));
  }

  void collect(ParamRefs<T>& out) {
    norm1.collect(out);
    self_attn.collect(out);
    norm2.collect(out);
    cross_attn.collect(out);
    norm3.collect(out);
    ff.collect(out);
  }
};

/// Standard sinusoidal position table, rows = positions.
template <typename T>
Matrix<T> sinusoidal_positions(Eigen::Index length, Eigen::Index width) {
  Matrix<T> pe(length, width);
  for (Eigen::Index pos = 0; pos < length; ++pos)
    for (Eigen::Index i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * rate;
      pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

}  // namespace medrat::nn
