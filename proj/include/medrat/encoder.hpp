#pragma once

// Feature extractors, modality-specific and shared transformer encoders, and
// the attention pooling that turns local representations into one global
// vector per sequence.

#include <cstdint>
#include <string>
#include <vector>

#include "medrat/nn.hpp"
#include "medrat/synth.hpp"

namespace medrat {

enum class Modality { Report, Image };

/// Several sequences packed row-wise. mask[i] == 0 marks padding rows.
template <typename T>
struct FeatureSeq {
  ag::Var<T> x;
  Segments segs;
  std::vector<std::uint8_t> mask;
  Modality modality = Modality::Report;
};

/// Shared-space output of the encoder stack.
template <typename T>
struct LocalReps {
  ag::Var<T> z;  // total x d
  Segments segs;
  std::vector<std::uint8_t> mask;
};

template <typename T>
struct GlobalRep {
  ag::Var<T> z;          // sequences x d
  ag::Var<T> attention;  // total x 1, sums to one within each segment
};

/// A patch grid as seen by the image extractor: the rows present and the
/// grid position of each (crop and jitter change both).
struct ImageView {
  synth::Grid patches;
  std::vector<int> positions;
};

inline ImageView full_view(const synth::Grid& g) {
  ImageView v{g, std::vector<int>(static_cast<std::size_t>(g.rows()))};
  for (std::size_t i = 0; i < v.positions.size(); ++i) v.positions[i] = static_cast<int>(i);
  return v;
}

/// Token embedding plus sinusoidal position code.
template <typename T>
struct ReportFeatures {
  ag::Parameter<T> embedding;  // V x d
  Matrix<T> positions;         // L_max x d

  ReportFeatures() = default;
  ReportFeatures(const std::string& name, int vocab_size, int max_len, Eigen::Index width, Rng& rng)
      : embedding(name + ".embedding", random_normal<T>(vocab_size, width, 1.0, rng)),
        positions(nn::sinusoidal_positions<T>(max_len, width)) {}

  FeatureSeq<T> operator()(ag::Tape<T>& t, const std::vector<const synth::Tokens*>& batch) {
    std::vector<Eigen::Index> index, lengths;
    FeatureSeq<T> fs;
    fs.modality = Modality::Report;
    Eigen::Index total = 0;
    for (const auto* toks : batch) {
      if (toks->empty()) throw InputError("report features: empty token sequence");
      if (static_cast<Eigen::Index>(toks->size()) > positions.rows())
        throw InputError("report features: sequence longer than max_len");
      lengths.push_back(static_cast<Eigen::Index>(toks->size()));
      total += lengths.back();
      for (int tok : *toks) {
        if (tok < 0 || tok >= embedding.value.rows()) throw InputError("report features: token id outside vocabulary");
        index.push_back(tok);
        fs.mask.push_back(tok == synth::kPad ? 0 : 1);
      }
    }
    Matrix<T> pe(total, positions.cols());
    Eigen::Index row = 0;
    for (auto n : lengths) {
      pe.middleRows(row, n) = positions.topRows(n);
      row += n;
    }
    fs.x = ag::add(ag::gather_rows(t.parameter(embedding), std::move(index)), t.constant(std::move(pe)));
    fs.segs = make_segments(lengths);
    return fs;
  }

  void collect(nn::ParamRefs<T>& out) { out.push_back(&embedding); }
};

/// Per-patch affine map plus a learned position table.
template <typename T>
struct ImageFeatures {
  nn::Linear<T> proj;
  ag::Parameter<T> positions;  // n_p x d

  ImageFeatures() = default;
  ImageFeatures(const std::string& name, int num_patches, int patch_dim, Eigen::Index width, Rng& rng)
      : proj(name + ".proj", patch_dim, width, rng),
        positions(name + ".positions", random_normal<T>(num_patches, width, 0.1, rng)) {}

  FeatureSeq<T> operator()(ag::Tape<T>& t, const std::vector<const ImageView*>& batch) {
    const Eigen::Index d_raw = proj.weight.value.rows();
    Eigen::Index total = 0;
    for (const auto* v : batch) {
      if (v->patches.cols() != d_raw) throw InputError("image features: wrong patch dimension");
      if (v->patches.rows() == 0 || static_cast<Eigen::Index>(v->positions.size()) != v->patches.rows())
        throw InputError("image features: patch/position count mismatch");
      total += v->patches.rows();
    }
    Matrix<T> raw(total, d_raw);
    std::vector<Eigen::Index> pos, lengths;
    Eigen::Index row = 0;
    for (const auto* v : batch) {
      raw.middleRows(row, v->patches.rows()) = v->patches.template cast<T>();
      row += v->patches.rows();
      lengths.push_back(v->patches.rows());
      for (int p : v->positions) {
        if (p < 0 || p >= positions.value.rows()) throw InputError("image features: patch position out of range");
        pos.push_back(p);
      }
    }
    FeatureSeq<T> fs;
    fs.modality = Modality::Image;
    fs.x = ag::add(proj(t.constant(std::move(raw))), ag::gather_rows(t.parameter(positions), std::move(pos)));
    fs.segs = make_segments(lengths);
    fs.mask.assign(static_cast<std::size_t>(total), 1);
    return fs;
  }

  void collect(nn::ParamRefs<T>& out) {
    proj.collect(out);
    out.push_back(&positions);
  }
};

/// A stack of self-attention layers; optionally closed by a LayerNorm.
template <typename T>
struct EncoderStack {
  std::vector<nn::EncoderLayer<T>> layers;
  nn::LayerNorm<T> final_norm;
  bool normalize_output = false;

  EncoderStack() = default;
  EncoderStack(const std::string& name, int depth, Eigen::Index width, int heads, Eigen::Index hidden,
               bool final_norm_enabled, Rng& rng)
      : final_norm(name + ".norm", width), normalize_output(final_norm_enabled) {
    for (int l = 0; l < depth; ++l)
      layers.emplace_back(name + ".layer" + std::to_string(l), width, heads, hidden, rng);
  }

  ag::Var<T> operator()(ag::Var<T> x, const Segments& segs, const std::vector<std::uint8_t>& mask,
                        std::vector<ag::AttentionWeights<T>>* weights = nullptr) {
    if (weights != nullptr) weights->assign(layers.size(), {});
    for (std::size_t l = 0; l < layers.size(); ++l)
      x = layers[l](x, segs, &mask, weights != nullptr ? &(*weights)[l] : nullptr);
    return normalize_output ? final_norm(x) : x;
  }

  void collect(nn::ParamRefs<T>& out) {
    for (auto& l : layers) l.collect(out);
    if (normalize_output) final_norm.collect(out);
  }
};

/// A = softmax over positions of tanh(Z W1) w2, z_global = A^T Z, per
/// sequence. Padding rows are excluded from the softmax.
template <typename T>
struct AttentionPool {
  ag::Parameter<T> w1;  // d x d
  ag::Parameter<T> w2;  // d x 1

  AttentionPool() = default;
  AttentionPool(const std::string& name, Eigen::Index width, Rng& rng)
      : w1(name + ".w1", random_normal<T>(width, width, 1.0 / std::sqrt(double(width)), rng)),
        w2(name + ".w2", random_normal<T>(width, 1, 1.0 / std::sqrt(double(width)), rng)) {}

  GlobalRep<T> operator()(const LocalReps<T>& local) {
    auto& t = *local.z.tape();
    auto scores = ag::matmul(ag::tanh(ag::matmul(local.z, t.parameter(w1))), t.parameter(w2));
    GlobalRep<T> g;
    g.attention = ag::segment_softmax(scores, local.segs, &local.mask);
    g.z = ag::segment_weighted_sum(g.attention, local.z, local.segs);
    return g;
  }

  void collect(nn::ParamRefs<T>& out) {
    out.push_back(&w1);
    out.push_back(&w2);
  }
};

}  // namespace medrat
