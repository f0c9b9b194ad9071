#pragma once

// Auxiliary alignment tasks on global representations: multi-label
// supervised contrastive learning across modalities and multi-label
// classification, plus the within-modality view augmentations that feed the
// contrastive batch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "medrat/encoder.hpp"

namespace medrat {

using PositiveSets = std::vector<std::vector<std::size_t>>;

/// Global representations of 4N views. Rows 2k and 2k + 1 come from the same
/// original sample; `view_of` holds that sample's id for every row.
template <typename T>
struct AlignmentBatch {
  ag::Var<T> z;
  std::vector<synth::Labels> labels;
  std::vector<int> view_of;
  std::vector<Modality> modality;
};

inline bool share_pathology(const synth::Labels& a, const synth::Labels& b) {
  for (int c = 0; c < kNumClasses; ++c)
    if (a[c] && b[c]) return true;
  return false;
}

/// P(i): every other row sharing at least one label or the same origin.
/// Modality plays no part.
inline std::vector<std::size_t> positive_set(std::size_t i, const std::vector<synth::Labels>& labels,
                                             const std::vector<int>& view_of) {
  if (labels.size() != view_of.size()) throw InputError("positive_set: labels/view_of length mismatch");
  std::vector<std::size_t> p;
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (j == i) continue;
    if (view_of[j] == view_of[i] || share_pathology(labels[i], labels[j])) p.push_back(j);
  }
  return p;
}

inline PositiveSets positive_sets(const std::vector<synth::Labels>& labels, const std::vector<int>& view_of) {
  PositiveSets out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out.push_back(positive_set(i, labels, view_of));
  return out;
}

/// L = mean over anchors with |P(i)| > 0 of
///   -1/|P(i)| sum_{p in P(i)} log( exp(z_i.z_p/tau) / sum_{j != i} exp(z_i.z_j/tau) ).
/// Rows of z are used as given; callers normalize beforehand.
template <typename T>
ag::Var<T> supervised_contrastive(const ag::Var<T>& z, const PositiveSets& positives, T tau) {
  if (!(tau > T(0))) throw ConfigError("contrastive loss: tau must be positive");
  const Eigen::Index b = z.rows();
  if (b < 2) throw InputError("contrastive loss: batch needs at least two rows");
  if (static_cast<Eigen::Index>(positives.size()) != b) throw InputError("contrastive loss: positive sets do not match batch");
  auto& t = *z.tape();
  const Matrix<T> s = (z.value() * z.value().transpose()) / tau;
  Matrix<T> coef = Matrix<T>::Zero(b, b);  // dL/dS, scaled by the anchor count below
  T total = 0;
  int anchors = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto& p = positives[static_cast<std::size_t>(i)];
    if (p.empty()) continue;
    ++anchors;
    T mx = -std::numeric_limits<T>::infinity();
    for (Eigen::Index j = 0; j < b; ++j)
      if (j != i) mx = std::max(mx, s(i, j));
    T z_sum = 0;
    for (Eigen::Index j = 0; j < b; ++j)
      if (j != i) z_sum += std::exp(s(i, j) - mx);
    const T lse = mx + std::log(z_sum);
    T acc = 0;
    for (auto j : p) acc += s(i, static_cast<Eigen::Index>(j)) - lse;
    const T inv = T(1) / static_cast<T>(p.size());
    total -= acc * inv;
    for (Eigen::Index j = 0; j < b; ++j)
      if (j != i) coef(i, j) = std::exp(s(i, j) - lse);
    for (auto j : p) coef(i, static_cast<Eigen::Index>(j)) -= inv;
  }
  Matrix<T> out(1, 1);
  out(0, 0) = anchors > 0 ? total / static_cast<T>(anchors) : T(0);
  if (anchors > 0) coef /= static_cast<T>(anchors);
  const auto iz = z.id();
  return t.push(std::move(out), anchors > 0 && t.any_needs_grad(z),
                [iz, tau, coef = std::move(coef)](ag::Tape<T>& tp, std::size_t self) {
                  const T g = tp.grad(self)(0, 0);
                  const Matrix<T> sym = (coef + coef.transpose()) * (g / tau);
                  tp.grad(iz).noalias() += sym * tp.value(iz);
                });
}

/// Contrastive loss of an alignment batch: rows are L2-normalized, then
/// positives are derived from labels and origins.
template <typename T>
ag::Var<T> contrastive_loss(const AlignmentBatch<T>& batch, T tau) {
  if (!(tau > T(0))) throw ConfigError("contrastive loss: tau must be positive");
  if (static_cast<Eigen::Index>(batch.labels.size()) != batch.z.rows())
    throw InputError("contrastive loss: label count does not match batch");
  return supervised_contrastive(ag::row_normalize(batch.z, T(1e-8)), positive_sets(batch.labels, batch.view_of), tau);
}

inline constexpr double kProbabilityClamp = 1e-7;

/// L = -(1/n) sum_i sum_c [ y log x + (1 - y) log(1 - x) ] with x clamped to
/// [eps, 1 - eps]; clamped entries pass no gradient.
template <typename T>
ag::Var<T> classification_loss(const ag::Var<T>& probs, const std::vector<synth::Labels>& labels) {
  const Eigen::Index n = probs.rows();
  if (probs.cols() != kNumClasses || static_cast<Eigen::Index>(labels.size()) != n || n == 0)
    throw InputError("classification loss: prediction/label shape mismatch");
  auto& t = *probs.tape();
  const T eps = static_cast<T>(kProbabilityClamp);
  const Matrix<T>& x = probs.value();
  Matrix<T> dx(n, kNumClasses);
  T total = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (int c = 0; c < kNumClasses; ++c) {
      const T raw = x(i, c);
      const T xc = std::clamp(raw, eps, T(1) - eps);
      const T y = static_cast<T>(labels[static_cast<std::size_t>(i)][c]);
      total -= y * std::log(xc) + (T(1) - y) * std::log(T(1) - xc);
      dx(i, c) = (raw < eps || raw > T(1) - eps) ? T(0) : -(y / xc - (T(1) - y) / (T(1) - xc));
    }
  Matrix<T> out(1, 1);
  out(0, 0) = total / static_cast<T>(n);
  dx /= static_cast<T>(n);
  const auto ip = probs.id();
  return t.push(std::move(out), t.any_needs_grad(probs), [ip, dx = std::move(dx)](ag::Tape<T>& tp, std::size_t self) {
    tp.accumulate(ip, dx * tp.grad(self)(0, 0));
  });
}

/// Two affine maps with a ReLU between, then a sigmoid per class.
template <typename T>
struct ClassifierHead {
  nn::Linear<T> hidden, out;

  ClassifierHead() = default;
  ClassifierHead(const std::string& name, Eigen::Index width, Eigen::Index hidden_width, Rng& rng)
      : hidden(name + ".hidden", width, hidden_width, rng), out(name + ".out", hidden_width, kNumClasses, rng) {}

  ag::Var<T> operator()(const ag::Var<T>& z) { return ag::sigmoid(out(ag::relu(hidden(z)))); }

  void collect(nn::ParamRefs<T>& refs) {
    hidden.collect(refs);
    out.collect(refs);
  }
};

/// Sentence-order shuffle; tokens inside each "."-terminated sentence keep
/// their order. A trailing fragment without "." stays last.
inline synth::Tokens shuffle_sentences(const synth::Tokens& toks, Rng& rng) {
  if (toks.size() < 2 || toks.front() != synth::kBos) throw InputError("shuffle_sentences: report must start with BOS");
  const auto end = std::find(toks.begin(), toks.end(), synth::kEos);
  std::vector<synth::Tokens> sentences;
  synth::Tokens cur;
  for (auto it = toks.begin() + 1; it != end; ++it) {
    cur.push_back(*it);
    if (*it == synth::kPeriod) {
      sentences.push_back(std::move(cur));
      cur.clear();
    }
  }
  std::shuffle(sentences.begin(), sentences.end(), rng);
  synth::Tokens out{synth::kBos};
  for (const auto& s : sentences) out.insert(out.end(), s.begin(), s.end());
  out.insert(out.end(), cur.begin(), cur.end());
  out.insert(out.end(), end, toks.end());
  return out;
}

struct ImageAugmentConfig {
  double crop_fraction = 0.25;  // max share of border patches removed
  double blur = 0.5;            // max neighbour-mixing weight
  double contrast = 0.2;        // gain in [1-c, 1+c], offset in [-c, c]
  int jitter = 1;               // max grid shift per axis
};

/// Random view of a grid: neighbour blur, gain/offset, grid shift (patches
/// shifted off the grid are lost), and removal of some border patches. With
/// every strength at zero the view equals the input.
inline ImageView augment_image(const synth::Grid& grid, int side, const ImageAugmentConfig& cfg, Rng& rng) {
  if (grid.rows() != static_cast<Eigen::Index>(side) * side) throw InputError("augment_image: grid is not side x side");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  synth::Grid g = grid;
  const double b = cfg.blur * unit(rng);
  if (b > 0.0) {
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c) {
        Eigen::RowVectorXf acc = Eigen::RowVectorXf::Zero(grid.cols());
        int n = 0;
        const int nb[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
        for (const auto& d : nb) {
          const int rr = r + d[0], cc = c + d[1];
          if (rr < 0 || rr >= side || cc < 0 || cc >= side) continue;
          acc += grid.row(rr * side + cc);
          ++n;
        }
        g.row(r * side + c) = static_cast<float>(1.0 - b) * grid.row(r * side + c) + static_cast<float>(b / n) * acc;
      }
  }
  const double gain = 1.0 + cfg.contrast * (2.0 * unit(rng) - 1.0);
  const double offset = cfg.contrast * (2.0 * unit(rng) - 1.0);
  if (cfg.contrast > 0.0) g = (g.array() * static_cast<float>(gain) + static_cast<float>(offset)).matrix();

  const int dx = cfg.jitter > 0 ? static_cast<int>(rng() % static_cast<std::uint64_t>(2 * cfg.jitter + 1)) - cfg.jitter : 0;
  const int dy = cfg.jitter > 0 ? static_cast<int>(rng() % static_cast<std::uint64_t>(2 * cfg.jitter + 1)) - cfg.jitter : 0;

  std::vector<int> border;
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c)
      if (r == 0 || c == 0 || r == side - 1 || c == side - 1) border.push_back(r * side + c);
  const int max_drop = static_cast<int>(std::floor(cfg.crop_fraction * static_cast<double>(border.size())));
  std::vector<std::uint8_t> dropped(grid.rows(), 0);
  if (max_drop > 0) {
    const int k = static_cast<int>(rng() % static_cast<std::uint64_t>(max_drop + 1));
    std::shuffle(border.begin(), border.end(), rng);
    for (int i = 0; i < k; ++i) dropped[static_cast<std::size_t>(border[static_cast<std::size_t>(i)])] = 1;
  }

  ImageView v;
  std::vector<Eigen::Index> rows;
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const int src = r * side + c;
      const int rr = r + dy, cc = c + dx;
      if (dropped[static_cast<std::size_t>(src)] || rr < 0 || rr >= side || cc < 0 || cc >= side) continue;
      rows.push_back(src);
      v.positions.push_back(rr * side + cc);
    }
  if (rows.empty()) return full_view(g);
  v.patches.resize(static_cast<Eigen::Index>(rows.size()), g.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) v.patches.row(static_cast<Eigen::Index>(i)) = g.row(rows[i]);
  return v;
}

}  // namespace medrat
