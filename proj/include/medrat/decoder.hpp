#pragma once

// Autoregressive report decoder conditioned on a cross-attention memory made
// of the global representation (position 0) followed by the surviving local
// representations. The same parameters decode report representations during
// training and image representations at inference.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "medrat/config.hpp"
#include "medrat/encoder.hpp"

namespace medrat {

struct AugmentationConfig {
  AugMode mode = AugMode::None;
  double p = 0.9;       // drop probability per local row
  double sigma = 5.0;   // additive noise std
};

template <typename T>
struct AugmentedLocals {
  ag::Var<T> z;
  std::vector<std::uint8_t> keep;  // 1 = row survives
};

/// Training-time corruption of local representations. Dropout removes each
/// row with probability p and, if a sequence loses every row, restores one
/// chosen uniformly. Noise adds N(0, sigma^2) to every entry. Padding rows
/// are never kept.
template <typename T>
AugmentedLocals<T> augment_locals(const LocalReps<T>& local, const AugmentationConfig& cfg, Rng& rng) {
  if (!(cfg.p >= 0.0 && cfg.p < 1.0) || cfg.sigma < 0.0) throw ConfigError("augmentation: p must lie in [0,1), sigma >= 0");
  AugmentedLocals<T> out;
  out.keep = local.mask;
  out.z = local.z;
  if (cfg.mode == AugMode::Dropout) {
    for (const auto& sg : local.segs) {
      std::vector<Eigen::Index> real;
      bool any = false;
      for (Eigen::Index i = sg.offset; i < sg.offset + sg.length; ++i) {
        if (!local.mask[static_cast<std::size_t>(i)]) continue;
        real.push_back(i);
        const bool kept = !bernoulli(rng, cfg.p);
        out.keep[static_cast<std::size_t>(i)] = kept ? 1 : 0;
        any = any || kept;
      }
      if (!any && !real.empty()) out.keep[static_cast<std::size_t>(real[rng() % real.size()])] = 1;
    }
  } else if (cfg.mode == AugMode::Noise) {
    auto& t = *local.z.tape();
    out.z = ag::add(local.z, t.constant(random_normal<T>(local.z.rows(), local.z.cols(), cfg.sigma, rng)));
  }
  return out;
}

/// Cross-attention memory for a batch of sequences.
template <typename T>
struct DecoderInput {
  ag::Var<T> memory;
  Segments segs;
  /// Row of the source local matrix behind each memory row, -1 for the global row.
  std::vector<Eigen::Index> source_rows;
  bool has_global = true;
};

/// Builds [z_global ; kept rows of Z_l] per sequence. Either part can be
/// switched off; at least one memory row per sequence is required.
template <typename T>
DecoderInput<T> make_decoder_input(const GlobalRep<T>& global, const LocalReps<T>& local,
                                   const std::vector<std::uint8_t>& keep, const ag::Var<T>& local_values,
                                   bool use_global = true, bool use_local = true) {
  const auto b = static_cast<Eigen::Index>(local.segs.size());
  if (global.z.rows() != b) throw InputError("decoder input: global/local batch mismatch");
  std::vector<Eigen::Index> index;
  std::vector<Eigen::Index> lengths;
  DecoderInput<T> in;
  in.has_global = use_global;
  for (Eigen::Index s = 0; s < b; ++s) {
    Eigen::Index n = 0;
    if (use_global) {
      index.push_back(s);
      in.source_rows.push_back(-1);
      ++n;
    }
    if (use_local) {
      const auto& sg = local.segs[static_cast<std::size_t>(s)];
      for (Eigen::Index i = sg.offset; i < sg.offset + sg.length; ++i) {
        if (!keep[static_cast<std::size_t>(i)]) continue;
        index.push_back(b + i);
        in.source_rows.push_back(i);
        ++n;
      }
    }
    if (n == 0) throw InputError("decoder input: a sequence has no memory rows");
    lengths.push_back(n);
  }
  in.memory = ag::gather_rows(ag::concat_rows<T>({global.z, local_values}), std::move(index));
  in.segs = make_segments(lengths);
  return in;
}

/// Mean token cross-entropy; PAD targets are skipped.
template <typename T>
ag::Var<T> language_loss(const ag::Var<T>& logits, const std::vector<int>& targets) {
  std::vector<int> t(targets);
  for (auto& v : t)
    if (v == synth::kPad) v = -1;
  return ag::softmax_cross_entropy(logits, t);
}

template <typename T>
struct Decoder {
  ag::Parameter<T> embedding;  // V x d
  Matrix<T> positions;         // L_max x d
  std::vector<nn::DecoderLayer<T>> layers;
  nn::LayerNorm<T> norm;
  nn::Linear<T> head;

  Decoder() = default;
  Decoder(const std::string& name, int vocab_size, int max_len, Eigen::Index width, int heads, Eigen::Index hidden,
          int depth, Rng& rng)
      : embedding(name + ".embedding", random_normal<T>(vocab_size, width, 1.0, rng)),
        positions(nn::sinusoidal_positions<T>(max_len, width)),
        norm(name + ".norm", width),
        head(name + ".head", width, vocab_size, rng) {
    for (int l = 0; l < depth; ++l) layers.emplace_back(name + ".layer" + std::to_string(l), width, heads, hidden, rng);
  }

  int vocab_size() const { return static_cast<int>(embedding.value.rows()); }
  int max_len() const { return static_cast<int>(positions.rows()); }

  /// Logits for every prefix position of every sequence (teacher forcing).
  /// Row i of sequence s predicts token i + 1. `cross_weights`, if given,
  /// receives the last layer's head-averaged cross-attention per sequence.
  ag::Var<T> logits(const DecoderInput<T>& input, const std::vector<std::vector<int>>& prefixes,
                    ag::AttentionWeights<T>* cross_weights = nullptr) {
    if (prefixes.size() != input.segs.size()) throw InputError("decoder: prefix/memory batch mismatch");
    auto& t = *input.memory.tape();
    std::vector<Eigen::Index> index, lengths;
    Eigen::Index total = 0;
    for (const auto& p : prefixes) {
      if (p.empty()) throw InputError("decoder: empty prefix");
      if (static_cast<int>(p.size()) > max_len()) throw InputError("decoder: prefix longer than max_len");
      for (int tok : p) {
        if (tok < 0 || tok >= vocab_size()) throw InputError("decoder: token id outside vocabulary");
        index.push_back(tok);
      }
      lengths.push_back(static_cast<Eigen::Index>(p.size()));
      total += lengths.back();
    }
    Matrix<T> pe(total, positions.cols());
    Eigen::Index row = 0;
    for (auto n : lengths) {
      pe.middleRows(row, n) = positions.topRows(n);
      row += n;
    }
    const Segments segs = make_segments(lengths);
    auto x = ag::add(ag::gather_rows(t.parameter(embedding), std::move(index)), t.constant(std::move(pe)));
    for (std::size_t l = 0; l < layers.size(); ++l)
      x = layers[l](x, segs, input.memory, input.segs, l + 1 == layers.size() ? cross_weights : nullptr);
    return head(norm(x));
  }

  /// Logits for the next token after `prefix` (single sequence).
  Eigen::Matrix<T, 1, Eigen::Dynamic> decode_step(const DecoderInput<T>& input, const std::vector<int>& prefix) {
    auto l = logits(input, {prefix});
    return l.value().row(l.rows() - 1);
  }

  void collect(nn::ParamRefs<T>& out) {
    out.push_back(&embedding);
    for (auto& l : layers) l.collect(out);
    norm.collect(out);
    head.collect(out);
  }
};

/// Teacher-forcing split of a report: inputs drop the last token, targets drop BOS.
inline std::pair<std::vector<int>, std::vector<int>> shift_for_teacher_forcing(const synth::Tokens& toks) {
  if (toks.size() < 2) throw InputError("teacher forcing: report needs at least two tokens");
  return {std::vector<int>(toks.begin(), toks.end() - 1), std::vector<int>(toks.begin() + 1, toks.end())};
}

/// Output of greedy decoding for one sequence.
template <typename T>
struct Generated {
  synth::Tokens tokens;
  /// For every generated token, the head-averaged last-layer cross-attention
  /// of the query that produced it over the memory rows.
  std::vector<std::vector<T>> cross_attention;
};

/// Greedy argmax decoding from BOS until EOS (ties to the lower id); a sequence that reaches
/// max_len - 1 tokens is closed with EOS. Runs the whole batch in lockstep.
template <typename T>
std::vector<Generated<T>> generate(Decoder<T>& dec, const DecoderInput<T>& input, int max_len,
                                   bool keep_attention = false) {
  if (max_len < 2 || max_len > dec.max_len()) throw InputError("generate: max_len out of range");
  const std::size_t b = input.segs.size();
  std::vector<Generated<T>> out(b);
  std::vector<std::vector<int>> prefixes(b, std::vector<int>{synth::kBos});
  std::vector<bool> done(b, false);
  for (int step = 1; step < max_len; ++step) {
    std::vector<std::size_t> active;
    for (std::size_t s = 0; s < b; ++s)
      if (!done[s]) active.push_back(s);
    if (active.empty()) break;
    // Restrict the memory to active sequences.
    std::vector<Eigen::Index> rows, lengths;
    std::vector<std::vector<int>> batch;
    for (auto s : active) {
      const auto& sg = input.segs[s];
      for (Eigen::Index i = 0; i < sg.length; ++i) rows.push_back(sg.offset + i);
      lengths.push_back(sg.length);
      batch.push_back(prefixes[s]);
    }
    DecoderInput<T> sub;
    sub.memory = ag::gather_rows(input.memory, std::move(rows));
    sub.segs = make_segments(lengths);
    sub.has_global = input.has_global;
    ag::AttentionWeights<T> cross;
    auto logits = dec.logits(sub, batch, keep_attention ? &cross : nullptr);
    const auto tok_segs = make_segments([&] {
      std::vector<Eigen::Index> l;
      for (const auto& p : batch) l.push_back(static_cast<Eigen::Index>(p.size()));
      return l;
    }());
    for (std::size_t a = 0; a < active.size(); ++a) {
      const auto s = active[a];
      const Eigen::Index last = tok_segs[a].offset + tok_segs[a].length - 1;
      // BOS and PAD are never emitted, so the output stays a valid sequence.
      auto row = logits.value().row(last);
      int tok = synth::kEos;
      for (int v = 0; v < static_cast<int>(row.size()); ++v) {
        if (v == synth::kBos || v == synth::kPad) continue;
        if (row(v) > row(tok)) tok = v;
      }
      if (step == max_len - 1) tok = synth::kEos;
      prefixes[s].push_back(tok);
      if (keep_attention) {
        const Matrix<T>& w = cross[a];
        out[s].cross_attention.emplace_back(w.row(w.rows() - 1).data(), w.row(w.rows() - 1).data() + w.cols());
      }
      if (tok == synth::kEos) done[s] = true;
    }
  }
  for (std::size_t s = 0; s < b; ++s) out[s].tokens = std::move(prefixes[s]);
  return out;
}

}  // namespace medrat
