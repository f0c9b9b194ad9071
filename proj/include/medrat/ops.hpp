#pragma once

// Differentiable primitives. Each returns a new Var on the tape of its first
// argument; all inputs must live on the same tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "medrat/autograd.hpp"

namespace medrat {

/// Contiguous run of rows [offset, offset + length) inside a packed matrix.
struct Segment {
  Eigen::Index offset = 0;
  Eigen::Index length = 0;
};
using Segments = std::vector<Segment>;

/// Packs consecutive lengths into segments.
inline Segments make_segments(const std::vector<Eigen::Index>& lengths) {
  Segments s;
  s.reserve(lengths.size());
  Eigen::Index off = 0;
  for (auto n : lengths) {
    s.push_back({off, n});
    off += n;
  }
  return s;
}

inline Eigen::Index total_rows(const Segments& segs) {
  return segs.empty() ? 0 : segs.back().offset + segs.back().length;
}

namespace ag {

namespace detail {

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw InputError("operands live on different tapes");
}

template <typename T>
void same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InputError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_shape(a, b, "add");
  Tape<T>& t = *a.tape();
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), t.any_needs_grad(a, b), [ia, ib](Tape<T>& tp, std::size_t self) {
    tp.accumulate(ia, tp.grad(self));
    tp.accumulate(ib, tp.grad(self));
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::same_shape(a, b, "sub");
  Tape<T>& t = *a.tape();
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), t.any_needs_grad(a, b), [ia, ib](Tape<T>& tp, std::size_t self) {
    tp.accumulate(ia, tp.grad(self));
    tp.accumulate(ib, -tp.grad(self));
  });
}

/// Elementwise product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::same_shape(a, b, "mul");
  Tape<T>& t = *a.tape();
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseProduct(b.value()), t.any_needs_grad(a, b),
                [ia, ib](Tape<T>& tp, std::size_t self) {
                  const Matrix<T>& g = tp.grad(self);
                  tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                  tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
                });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tape<T>& t = *a.tape();
  const auto ia = a.id();
  return t.push(a.value() * s, t.any_needs_grad(a),
                [ia, s](Tape<T>& tp, std::size_t self) { tp.accumulate(ia, tp.grad(self) * s); });
}

/// a + bias, with bias a 1 x cols row broadcast over every row of a.
template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& bias) {
  detail::same_tape(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw InputError("add_row: bias must be 1 x cols");
  Tape<T>& t = *a.tape();
  const auto ia = a.id(), ib = bias.id();
  Matrix<T> out = a.value().rowwise() + bias.value().row(0);
  return t.push(std::move(out), t.any_needs_grad(a, bias), [ia, ib](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad(self);
    tp.accumulate(ia, g);
    if (tp.needs_grad(ib)) tp.grad(ib) += g.colwise().sum();
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b);
  if (a.cols() != b.rows()) throw InputError("matmul: inner dimensions differ");
  Tape<T>& t = *a.tape();
  const auto ia = a.id(), ib = b.id();
  Matrix<T> out = a.value() * b.value();
  return t.push(std::move(out), t.any_needs_grad(a, b), [ia, ib](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia).noalias() += g * tp.value(ib).transpose();
    if (tp.needs_grad(ib)) tp.grad(ib).noalias() += tp.value(ia).transpose() * g;
  });
}

/// a * b^T
template <typename T>
Var<T> matmul_bt(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b);
  if (a.cols() != b.cols()) throw InputError("matmul_bt: column counts differ");
  Tape<T>& t = *a.tape();
  const auto ia = a.id(), ib = b.id();
  Matrix<T> out = a.value() * b.value().transpose();
  return t.push(std::move(out), t.any_needs_grad(a, b), [ia, ib](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia).noalias() += g * tp.value(ib);
    if (tp.needs_grad(ib)) tp.grad(ib).noalias() += g.transpose() * tp.value(ia);
  });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  Tape<T>& t = *a.tape();
  const auto ia = a.id();
  Matrix<T> out = a.value().array().tanh().matrix();
  return t.push(std::move(out), t.any_needs_grad(a), [ia](Tape<T>& tp, std::size_t self) {
    const auto& y = tp.value(self).array();
    tp.accumulate(ia, (tp.grad(self).array() * (T(1) - y * y)).matrix());
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tape<T>& t = *a.tape();
  const auto ia = a.id();
  Matrix<T> out = a.value().cwiseMax(T(0));
  return t.push(std::move(out), t.any_needs_grad(a), [ia](Tape<T>& tp, std::size_t self) {
    const auto& y = tp.value(self).array();
    tp.accumulate(ia, (tp.grad(self).array() * (y > T(0)).template cast<T>()).matrix());
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tape<T>& t = *a.tape();
  const auto ia = a.id();
  Matrix<T> out = (T(1) / (T(1) + (-a.value().array()).exp())).matrix();
  return t.push(std::move(out), t.any_needs_grad(a), [ia](Tape<T>& tp, std::size_t self) {
    const auto& y = tp.value(self).array();
    tp.accumulate(ia, (tp.grad(self).array() * y * (T(1) - y)).matrix());
  });
}

/// Row-wise layer normalization with affine gain/bias (both 1 x cols).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  if (gain.cols() != x.cols() || bias.cols() != x.cols()) throw InputError("layer_norm: width mismatch");
  Tape<T>& t = *x.tape();
  const Eigen::Index n = x.rows(), c = x.cols();
  Matrix<T> xhat(n, c);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
  const Matrix<T>& xv = x.value();
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mu = xv.row(i).mean();
    const T var = (xv.row(i).array() - mu).square().mean();
    rstd(i) = T(1) / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * rstd(i);
  }
  Matrix<T> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return t.push(std::move(out), t.any_needs_grad(x, gain, bias),
                [ix, ig, ib, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tp, std::size_t self) {
                  const Matrix<T>& g = tp.grad(self);
                  if (tp.needs_grad(ig)) tp.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
                  if (tp.needs_grad(ib)) tp.grad(ib) += g.colwise().sum();
                  if (!tp.needs_grad(ix)) return;
                  Matrix<T> dxhat = g.array().rowwise() * tp.value(ig).row(0).array();
                  Matrix<T>& gx = tp.grad(ix);
                  for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
                    const T m1 = dxhat.row(i).mean();
                    const T m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                    gx.row(i).array() += rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
                  }
                });
}

/// out.row(i) = a.row(index[i]); gradient scatter-adds back.
template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<Eigen::Index> index) {
  Tape<T>& t = *a.tape();
  Matrix<T> out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw InputError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  const auto ia = a.id();
  return t.push(std::move(out), t.any_needs_grad(a), [ia, index = std::move(index)](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad(self);
    Matrix<T>& ga = tp.grad(ia);
    for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw InputError("concat_rows: no inputs");
  Tape<T>& t = *parts.front().tape();
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool needs = false;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p);
    if (p.cols() != cols) throw InputError("concat_rows: width mismatch");
    rows += p.rows();
    needs = needs || p.needs_grad();
  }
  Matrix<T> out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.rows();
  }
  return t.push(std::move(out), t.recording() && needs, [spans = std::move(spans)](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad(self);
    for (const auto& [id, o] : spans) {
      if (!tp.needs_grad(id)) continue;
      Matrix<T>& gp = tp.grad(id);
      gp += g.middleRows(o, gp.rows());
    }
  });
}

/// Divides each row by max(||row||, eps).
template <typename T>
Var<T> row_normalize(const Var<T>& a, T eps = T(1e-8)) {
  Tape<T>& t = *a.tape();
  const Eigen::Index n = a.rows();
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms = a.value().rowwise().norm();
  Eigen::Matrix<T, Eigen::Dynamic, 1> denom = norms.cwiseMax(eps);
  Matrix<T> out = a.value().array().colwise() / denom.array();
  const auto ia = a.id();
  return t.push(std::move(out), t.any_needs_grad(a),
                [ia, n, norms = std::move(norms), denom = std::move(denom), eps](Tape<T>& tp, std::size_t self) {
                  const Matrix<T>& g = tp.grad(self);
                  const Matrix<T>& y = tp.value(self);
                  Matrix<T>& ga = tp.grad(ia);
                  for (Eigen::Index i = 0; i < n; ++i) {
                    if (norms(i) > eps)
                      ga.row(i) += (g.row(i) - y.row(i) * y.row(i).dot(g.row(i))) / denom(i);
                    else
                      ga.row(i) += g.row(i) / denom(i);
                  }
                });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tape<T>& t = *a.tape();
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  const auto ia = a.id();
  return t.push(std::move(out), t.any_needs_grad(a), [ia](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad(self)(0, 0);
    if (tp.needs_grad(ia)) tp.grad(ia).array() += g;
  });
}

/// Softmax over the rows of each segment of a single-column score vector.
/// Rows with mask == 0 get weight zero. A segment with every row masked is
/// an input error.
template <typename T>
Var<T> segment_softmax(const Var<T>& scores, const Segments& segs, const std::vector<std::uint8_t>* mask = nullptr) {
  if (scores.cols() != 1) throw InputError("segment_softmax: scores must be a column");
  if (total_rows(segs) != scores.rows()) throw InputError("segment_softmax: segments do not cover scores");
  if (mask != nullptr && static_cast<Eigen::Index>(mask->size()) != scores.rows())
    throw InputError("segment_softmax: mask length mismatch");
  Tape<T>& t = *scores.tape();
  const Matrix<T>& s = scores.value();
  Matrix<T> out = Matrix<T>::Zero(s.rows(), 1);
  for (const auto& sg : segs) {
    T mx = -std::numeric_limits<T>::infinity();
    for (Eigen::Index i = sg.offset; i < sg.offset + sg.length; ++i)
      if (mask == nullptr || (*mask)[i]) mx = std::max(mx, s(i, 0));
    if (!std::isfinite(mx)) throw InputError("segment_softmax: every position in a segment is masked");
    T z = 0;
    for (Eigen::Index i = sg.offset; i < sg.offset + sg.length; ++i)
      if (mask == nullptr || (*mask)[i]) {
        out(i, 0) = std::exp(s(i, 0) - mx);
        z += out(i, 0);
      }
    out.middleRows(sg.offset, sg.length) /= z;
  }
  const auto is = scores.id();
  return t.push(std::move(out), t.any_needs_grad(scores), [is, segs](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad(self);
    const Matrix<T>& y = tp.value(self);
    Matrix<T>& gs = tp.grad(is);
    for (const auto& sg : segs) {
      const auto gy = g.middleRows(sg.offset, sg.length);
      const auto yy = y.middleRows(sg.offset, sg.length);
      const T dot = gy.cwiseProduct(yy).sum();
      gs.middleRows(sg.offset, sg.length) += yy.cwiseProduct((gy.array() - dot).matrix());
    }
  });
}

/// out.row(s) = sum_{i in segment s} w(i) * z.row(i)
template <typename T>
Var<T> segment_weighted_sum(const Var<T>& w, const Var<T>& z, const Segments& segs) {
  detail::same_tape(w, z);
  if (w.cols() != 1 || w.rows() != z.rows()) throw InputError("segment_weighted_sum: weight shape mismatch");
  if (total_rows(segs) != z.rows()) throw InputError("segment_weighted_sum: segments do not cover rows");
  Tape<T>& t = *w.tape();
  Matrix<T> out(static_cast<Eigen::Index>(segs.size()), z.cols());
  for (std::size_t k = 0; k < segs.size(); ++k) {
    const auto& sg = segs[k];
    out.row(static_cast<Eigen::Index>(k)) =
        w.value().middleRows(sg.offset, sg.length).transpose() * z.value().middleRows(sg.offset, sg.length);
  }
  const auto iw = w.id(), iz = z.id();
  return t.push(std::move(out), t.any_needs_grad(w, z), [iw, iz, segs](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad(self);
    for (std::size_t k = 0; k < segs.size(); ++k) {
      const auto& sg = segs[k];
      const auto gk = g.row(static_cast<Eigen::Index>(k));
      if (tp.needs_grad(iw))
        tp.grad(iw).middleRows(sg.offset, sg.length).noalias() +=
            tp.value(iz).middleRows(sg.offset, sg.length) * gk.transpose();
      if (tp.needs_grad(iz))
        tp.grad(iz).middleRows(sg.offset, sg.length).noalias() +=
            tp.value(iw).middleRows(sg.offset, sg.length) * gk;
    }
  });
}

/// Query/key segment pairing for packed multi-sequence attention.
struct AttentionLayout {
  Segments queries;
  Segments keys;
};

/// Head-averaged attention weights of one segment, kept for diagnostics.
template <typename T>
using AttentionWeights = std::vector<Matrix<T>>;

/// Multi-head scaled dot-product attention over packed sequences. q, k, v
/// are already projected; heads split the columns evenly. With `causal`,
/// query row i of a segment sees key rows j <= i. Keys with key_mask == 0
/// get zero weight; a query row with no visible key outputs zeros.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionLayout& layout, int heads,
                 bool causal = false, const std::vector<std::uint8_t>* key_mask = nullptr,
                 AttentionWeights<T>* weights_out = nullptr) {
  detail::same_tape(q, k);
  detail::same_tape(q, v);
  const Eigen::Index d = q.cols();
  if (heads <= 0 || d % heads != 0) throw InputError("attention: width not divisible by heads");
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw InputError("attention: q/k/v shape mismatch");
  if (layout.queries.size() != layout.keys.size()) throw InputError("attention: layout size mismatch");
  if (total_rows(layout.queries) != q.rows() || total_rows(layout.keys) != k.rows())
    throw InputError("attention: layout does not cover inputs");
  if (key_mask != nullptr && static_cast<Eigen::Index>(key_mask->size()) != k.rows())
    throw InputError("attention: key mask length mismatch");

  Tape<T>& t = *q.tape();
  const Eigen::Index dh = d / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
  const Matrix<T>& Q = q.value();
  const Matrix<T>& K = k.value();
  const Matrix<T>& V = v.value();
  Matrix<T> out = Matrix<T>::Zero(q.rows(), d);
  const bool needs = t.any_needs_grad(q, k, v);
  std::vector<Matrix<T>> probs;
  if (needs) probs.reserve(layout.queries.size() * static_cast<std::size_t>(heads));
  if (weights_out != nullptr) weights_out->clear();

  for (std::size_t sidx = 0; sidx < layout.queries.size(); ++sidx) {
    const Segment qs = layout.queries[sidx];
    const Segment ks = layout.keys[sidx];
    Matrix<T> avg;
    if (weights_out != nullptr) avg = Matrix<T>::Zero(qs.length, ks.length);
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * dh;
      Matrix<T> s = (Q.block(qs.offset, c0, qs.length, dh) * K.block(ks.offset, c0, ks.length, dh).transpose()) *
                    scale_factor;
      for (Eigen::Index i = 0; i < qs.length; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j < ks.length; ++j) {
          const bool visible = (!causal || j <= i) && (key_mask == nullptr || (*key_mask)[ks.offset + j]);
          if (!visible)
            s(i, j) = -std::numeric_limits<T>::infinity();
          else
            mx = std::max(mx, s(i, j));
        }
        if (!std::isfinite(mx)) {
          s.row(i).setZero();
          continue;
        }
        T z = 0;
        for (Eigen::Index j = 0; j < ks.length; ++j) {
          s(i, j) = std::isfinite(s(i, j)) ? std::exp(s(i, j) - mx) : T(0);
          z += s(i, j);
        }
        s.row(i) /= z;
      }
      out.block(qs.offset, c0, qs.length, dh).noalias() = s * V.block(ks.offset, c0, ks.length, dh);
      if (weights_out != nullptr) avg += s / static_cast<T>(heads);
      if (needs) probs.push_back(std::move(s));
    }
    if (weights_out != nullptr) weights_out->push_back(std::move(avg));
  }

  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return t.push(std::move(out), needs,
                [iq, ik, iv, layout, heads, dh, scale_factor, probs = std::move(probs)](Tape<T>& tp, std::size_t self) {
                  const Matrix<T>& g = tp.grad(self);
                  const Matrix<T>& Q = tp.value(iq);
                  const Matrix<T>& K = tp.value(ik);
                  const Matrix<T>& V = tp.value(iv);
                  const bool gq = tp.needs_grad(iq), gk = tp.needs_grad(ik), gv = tp.needs_grad(iv);
                  Matrix<T>* dQ = gq ? &tp.grad(iq) : nullptr;
                  Matrix<T>* dK = gk ? &tp.grad(ik) : nullptr;
                  Matrix<T>* dV = gv ? &tp.grad(iv) : nullptr;
                  std::size_t p = 0;
                  for (std::size_t sidx = 0; sidx < layout.queries.size(); ++sidx) {
                    const Segment qs = layout.queries[sidx];
                    const Segment ks = layout.keys[sidx];
                    for (int h = 0; h < heads; ++h, ++p) {
                      const Eigen::Index c0 = h * dh;
                      const Matrix<T>& P = probs[p];
                      const Matrix<T> dO = g.block(qs.offset, c0, qs.length, dh);
                      if (gv) dV->block(ks.offset, c0, ks.length, dh).noalias() += P.transpose() * dO;
                      if (!gq && !gk) continue;
                      Matrix<T> dP = dO * V.block(ks.offset, c0, ks.length, dh).transpose();
                      const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = dP.cwiseProduct(P).rowwise().sum();
                      Matrix<T> dS = P.cwiseProduct((dP.colwise() - rs)) * scale_factor;
                      if (gq)
                        dQ->block(qs.offset, c0, qs.length, dh).noalias() +=
                            dS * K.block(ks.offset, c0, ks.length, dh);
                      if (gk)
                        dK->block(ks.offset, c0, ks.length, dh).noalias() +=
                            dS.transpose() * Q.block(qs.offset, c0, qs.length, dh);
                    }
                  }
                });
}

/// Keeps the top-k entries of each row (ties to the lower column index),
/// replaces them with their softmax and zeroes the rest. Selection is
/// piecewise constant, so gradient flows only through the kept entries.
/// When `selected` is given it receives rows x k column indices, ordered by
/// decreasing score.
template <typename T>
Var<T> topk_softmax(const Var<T>& scores, int k, std::vector<std::vector<Eigen::Index>>* selected = nullptr) {
  const Eigen::Index n = scores.rows(), m = scores.cols();
  if (k < 1 || k > m) throw InputError("topk_softmax: k must lie in [1, columns]");
  Tape<T>& t = *scores.tape();
  const Matrix<T>& s = scores.value();
  Matrix<T> out = Matrix<T>::Zero(n, m);
  std::vector<std::vector<Eigen::Index>> sel(static_cast<std::size_t>(n));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Eigen::Index a, Eigen::Index b) {
      if (s(i, a) != s(i, b)) return s(i, a) > s(i, b);
      return a < b;
    });
    auto& row = sel[static_cast<std::size_t>(i)];
    row.assign(order.begin(), order.begin() + k);
    const T mx = s(i, row.front());
    T z = 0;
    for (auto c : row) {
      out(i, c) = std::exp(s(i, c) - mx);
      z += out(i, c);
    }
    for (auto c : row) out(i, c) /= z;
  }
  if (selected != nullptr) *selected = sel;
  const auto is = scores.id();
  return t.push(std::move(out), t.any_needs_grad(scores), [is, sel = std::move(sel)](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad(self);
    const Matrix<T>& y = tp.value(self);
    Matrix<T>& gs = tp.grad(is);
    for (std::size_t i = 0; i < sel.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      T dot = 0;
      for (auto c : sel[i]) dot += g(r, c) * y(r, c);
      for (auto c : sel[i]) gs(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

/// Mean token cross-entropy of row-wise softmax(logits) against targets.
/// Rows whose target is negative are ignored.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows())
    throw InputError("softmax_cross_entropy: target count does not match logits rows");
  Tape<T>& t = *logits.tape();
  const Matrix<T>& x = logits.value();
  const Eigen::Index v = x.cols();
  Matrix<T> probs(x.rows(), v);
  T total = 0;
  int count = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T mx = x.row(i).maxCoeff();
    probs.row(i) = (x.row(i).array() - mx).exp();
    const T z = probs.row(i).sum();
    probs.row(i) /= z;
    const int tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0) continue;
    if (tgt >= v) throw InputError("softmax_cross_entropy: target id out of range");
    total += std::log(z) + mx - x(i, tgt);
    ++count;
  }
  if (count == 0) throw InputError("softmax_cross_entropy: no target positions");
  Matrix<T> out(1, 1);
  out(0, 0) = total / static_cast<T>(count);
  const auto il = logits.id();
  return t.push(std::move(out), t.any_needs_grad(logits),
                [il, targets, count, probs = std::move(probs)](Tape<T>& tp, std::size_t self) {
                  const T g = tp.grad(self)(0, 0) / static_cast<T>(count);
                  Matrix<T>& gl = tp.grad(il);
                  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
                    const int tgt = targets[static_cast<std::size_t>(i)];
                    if (tgt < 0) continue;
                    gl.row(i) += g * probs.row(i);
                    gl(i, tgt) -= g;
                  }
                });
}

}  // namespace ag
}  // namespace medrat
