#pragma once

// Independent reference implementations written directly from the formulas
// with plain loops, and a central-difference gradient checker. Shared by
// the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "medrat/evalkit.hpp"

namespace medrat::support {

using Md = Matrix<double>;

inline Md random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  return random_normal<double>(r, c, scale, rng);
}

inline synth::Labels random_labels(Rng& rng, double p = 0.3) {
  std::vector<double> prev(kNumClasses, p);
  return synth::sample_label_vector(prev, rng);
}

// ---------------------------------------------------------------------------
// Loss oracles

/// Double-loop evaluation of the multi-label supervised contrastive loss on
/// already-normalized rows.
inline double contrastive_oracle(const Md& z, const std::vector<synth::Labels>& labels, const std::vector<int>& view_of,
                                 double tau) {
  const auto b = static_cast<std::size_t>(z.rows());
  double total = 0.0;
  int anchors = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<std::size_t> pos;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      bool shared = view_of[i] == view_of[j];
      for (int c = 0; c < kNumClasses; ++c) shared = shared || (labels[i][c] == 1 && labels[j][c] == 1);
      if (shared) pos.push_back(j);
    }
    if (pos.empty()) continue;
    ++anchors;
    double denom = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      double dot = 0.0;
      for (Eigen::Index k = 0; k < z.cols(); ++k) dot += z(static_cast<Eigen::Index>(i), k) * z(static_cast<Eigen::Index>(j), k);
      denom += std::exp(dot / tau);
    }
    double acc = 0.0;
    for (auto p : pos) {
      double dot = 0.0;
      for (Eigen::Index k = 0; k < z.cols(); ++k) dot += z(static_cast<Eigen::Index>(i), k) * z(static_cast<Eigen::Index>(p), k);
      acc += std::log(std::exp(dot / tau) / denom);
    }
    total += -acc / static_cast<double>(pos.size());
  }
  return anchors > 0 ? total / anchors : 0.0;
}

inline Md normalize_rows(const Md& z) {
  Md u = z;
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    double n = 0.0;
    for (Eigen::Index k = 0; k < u.cols(); ++k) n += u(i, k) * u(i, k);
    n = std::max(std::sqrt(n), 1e-8);
    for (Eigen::Index k = 0; k < u.cols(); ++k) u(i, k) /= n;
  }
  return u;
}

/// Elementwise binary cross-entropy summed over classes, averaged over rows.
inline double classification_oracle(const Md& x, const std::vector<synth::Labels>& y) {
  const double eps = 1e-7;
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (int c = 0; c < kNumClasses; ++c) {
      const double v = std::min(std::max(x(i, c), eps), 1.0 - eps);
      const double t = y[static_cast<std::size_t>(i)][c];
      total += -(t * std::log(v) + (1.0 - t) * std::log(1.0 - v));
    }
  return total / static_cast<double>(x.rows());
}

/// Mean over non-PAD targets of -log softmax(logits)[target].
inline double language_oracle(const Md& logits, const std::vector<int>& targets) {
  double total = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t == synth::kPad) continue;
    double z = 0.0;
    for (Eigen::Index v = 0; v < logits.cols(); ++v) z += std::exp(logits(i, v));
    total += -(logits(i, t) - std::log(z));
    ++n;
  }
  return total / n;
}

// ---------------------------------------------------------------------------
// Forward oracles

/// Memory response for one vector: cosine scores, top-K (ties to the lower
/// index), softmax over the selected scores, weighted sum of projected slots.
struct MemoryOracle {
  std::vector<double> r;
  std::vector<int> selected;
  std::vector<double> scores;
};

inline MemoryOracle memory_oracle(const std::vector<double>& f, const Md& slots, const Md& w_f, const Md& w_in,
                                  const Md& w_out, int k) {
  const auto dq = static_cast<std::size_t>(w_f.cols());
  std::vector<double> fp(dq, 0.0);
  for (std::size_t q = 0; q < dq; ++q)
    for (std::size_t a = 0; a < f.size(); ++a) fp[q] += f[a] * w_f(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(q));
  double fn = 0.0;
  for (double v : fp) fn += v * v;
  fn = std::max(std::sqrt(fn), 1e-8);
  MemoryOracle o;
  for (Eigen::Index m = 0; m < slots.rows(); ++m) {
    std::vector<double> mp(dq, 0.0);
    for (std::size_t q = 0; q < dq; ++q)
      for (Eigen::Index a = 0; a < slots.cols(); ++a) mp[q] += slots(m, a) * w_in(a, static_cast<Eigen::Index>(q));
    double mn = 0.0, dot = 0.0;
    for (std::size_t q = 0; q < dq; ++q) {
      mn += mp[q] * mp[q];
      dot += mp[q] * fp[q];
    }
    o.scores.push_back(dot / (fn * std::max(std::sqrt(mn), 1e-8)));
  }
  std::vector<int> idx(static_cast<std::size_t>(slots.rows()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return o.scores[static_cast<std::size_t>(a)] > o.scores[static_cast<std::size_t>(b)]; });
  o.selected.assign(idx.begin(), idx.begin() + k);
  double z = 0.0;
  for (int s : o.selected) z += std::exp(o.scores[static_cast<std::size_t>(s)]);
  o.r.assign(static_cast<std::size_t>(w_out.cols()), 0.0);
  for (int s : o.selected) {
    const double w = std::exp(o.scores[static_cast<std::size_t>(s)]) / z;
    for (Eigen::Index c = 0; c < w_out.cols(); ++c) {
      double proj = 0.0;
      for (Eigen::Index a = 0; a < slots.cols(); ++a) proj += slots(s, a) * w_out(a, c);
      o.r[static_cast<std::size_t>(c)] += w * proj;
    }
  }
  return o;
}

/// A = softmax_i(w2 . tanh(W1^T z_i)), z = sum_i A_i z_i for one sequence.
inline std::pair<std::vector<double>, std::vector<double>> pool_oracle(const Md& z, const Md& w1, const Md& w2) {
  const Eigen::Index n = z.rows(), d = z.cols();
  std::vector<double> e(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = 0.0;
    for (Eigen::Index h = 0; h < w1.cols(); ++h) {
      double u = 0.0;
      for (Eigen::Index k = 0; k < d; ++k) u += z(i, k) * w1(k, h);
      s += std::tanh(u) * w2(h, 0);
    }
    e[static_cast<std::size_t>(i)] = s;
  }
  const double mx = *std::max_element(e.begin(), e.end());
  double tot = 0.0;
  for (auto& v : e) tot += (v = std::exp(v - mx));
  for (auto& v : e) v /= tot;
  std::vector<double> out(static_cast<std::size_t>(d), 0.0);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < d; ++k) out[static_cast<std::size_t>(k)] += e[static_cast<std::size_t>(i)] * z(i, k);
  return {e, out};
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Builds a scalar from the given leaves on a fresh tape.
using ScalarFn = std::function<ag::Var<double>(ag::Tape<double>&, const std::vector<ag::Var<double>>&)>;

/// ||analytic - numeric|| / (||analytic|| + ||numeric||) over all leaves,
/// using central differences with step h.
inline double gradient_error(std::vector<Md> inputs, const ScalarFn& f, double h = 1e-6) {
  std::vector<ag::Parameter<double>> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back("x" + std::to_string(i), inputs[i]);
  auto eval = [&](bool record) {
    ag::Tape<double> t(record);
    std::vector<ag::Var<double>> leaves;
    for (auto& p : params) leaves.push_back(t.parameter(p));
    auto y = f(t, leaves);
    if (record) t.backward(y);
    return y.item();
  };
  for (auto& p : params) p.zero_grad();
  eval(true);
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (auto& p : params) {
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      const double orig = p.value.data()[k];
      p.value.data()[k] = orig + h;
      const double up = eval(false);
      p.value.data()[k] = orig - h;
      const double dn = eval(false);
      p.value.data()[k] = orig;
      const double num = (up - dn) / (2.0 * h);
      const double an = p.grad.data()[k];
      diff += (an - num) * (an - num);
      na += an * an;
      nn += num * num;
    }
  }
  const double denom = std::sqrt(na) + std::sqrt(nn);
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

/// Same check against the parameters of a model; `loss` rebuilds the scalar
/// on a fresh tape (any randomness inside must be re-seeded by the caller).
/// At most `per_param` entries of each parameter are probed.
inline double parameter_gradient_error(const nn::ParamRefs<double>& params,
                                       const std::function<ag::Var<double>(ag::Tape<double>&)>& loss,
                                       int per_param = 6, double h = 1e-6, std::uint64_t seed = 3) {
  for (auto* p : params) p->zero_grad();
  {
    ag::Tape<double> t(true);
    t.backward(loss(t));
  }
  auto eval = [&] {
    ag::Tape<double> t(false);
    return loss(t).item();
  };
  Rng rng(seed);
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (auto* p : params) {
    for (int s = 0; s < per_param; ++s) {
      const auto k = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p->value.size()));
      const double orig = p->value.data()[k];
      p->value.data()[k] = orig + h;
      const double up = eval();
      p->value.data()[k] = orig - h;
      const double dn = eval();
      p->value.data()[k] = orig;
      const double num = (up - dn) / (2.0 * h);
      const double an = p->grad.data()[k];
      diff += (an - num) * (an - num);
      na += an * an;
      nn += num * num;
    }
  }
  const double denom = std::sqrt(na) + std::sqrt(nn);
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

// ---------------------------------------------------------------------------
// Text metric fixture

/// Ten candidate/reference pairs over letter tokens (a = 10, b = 11, ...).
/// Tallied by hand:
///   order   clipped matches / candidate n-grams
///     1          31 / 40
///     2          20 / 30
///     3          12 / 20
///     4           7 / 11
///   lengths: candidates 40, references 45, brevity penalty exp(1 - 45/40)
///   LCS F per pair: 1, 1/2, 2/3, 1/4, 1/2, 1, 0, 3/5, 8/9, 1 -> mean 1153/1800
struct MetricFixture {
  std::vector<synth::Tokens> candidates, references;
  double bleu1 = 0, bleu4 = 0, rougeL = 0;
};

inline synth::Tokens letters(const std::string& s) {
  synth::Tokens t;
  for (char ch : s)
    if (ch != ' ') t.push_back(10 + (ch - 'a'));
  return t;
}

inline MetricFixture metric_fixture() {
  const std::vector<std::pair<std::string, std::string>> pairs{
      {"a b c d", "a b c d"},         {"a b c d", "a b x y"},   {"a b c", "a x c"},
      {"a a a a", "a b c d"},         {"a b", "a b c d e f"},   {"e f g h i", "e f g h i"},
      {"x y z", "p q r"},             {"a b c d e", "c d e a b"}, {"b c d e", "a b c d e"},
      {"a b c d e f", "a b c d e f"},
  };
  MetricFixture f;
  for (const auto& [c, r] : pairs) {
    f.candidates.push_back(letters(c));
    f.references.push_back(letters(r));
  }
  const double bp = std::exp(1.0 - 45.0 / 40.0);
  f.bleu1 = bp * 31.0 / 40.0;
  f.bleu4 = bp * std::pow((31.0 / 40.0) * (20.0 / 30.0) * (12.0 / 20.0) * (7.0 / 11.0), 0.25);
  f.rougeL = 1153.0 / 1800.0;
  return f;
}

/// Small model configuration for fast double-precision checks.
inline Config tiny_config() {
  Config c;
  c.n_reports = 24;
  c.n_images = 24;
  c.n_eval = 12;
  c.vocab_size = 64;
  c.gen_max_len = 32;
  c.num_patches = 16;
  c.patch_dim = 14;
  c.pattern_patches = 3;
  c.d_model = 8;
  c.heads = 2;
  c.ffn_dim = 12;
  c.memory_slots = 6;
  c.memory_topk = 2;
  c.batch_size = 4;
  c.epochs = 1;
  c.prevalence = std::vector<double>(kNumClasses, 0.15);
  return c;
}

}  // namespace medrat::support
