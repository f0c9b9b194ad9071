#pragma once

// Shared trainable memory queried by cosine similarity. Both modalities
// consult the same slots, so the response depends only on the feature
// vector and never on where it came from.

#include <cmath>
#include <string>
#include <vector>

#include "medrat/nn.hpp"

namespace medrat {

/// Result of a single-vector query, detached from any tape.
template <typename T>
struct MemoryResponse {
  Eigen::Matrix<T, 1, Eigen::Dynamic> r;
  std::vector<Eigen::Index> selected;  // slot indices, best first
  std::vector<T> similarities;         // D at the selected slots, non-increasing
  std::vector<T> weights;              // softmax of similarities
};

/// Differentiable batch query: one row of `response` per input row.
template <typename T>
struct MemoryQuery {
  ag::Var<T> response;                                   // n x d
  ag::Var<T> scores;                                     // n x M cosine similarities
  ag::Var<T> weights;                                    // n x M, zero off the selection
  std::vector<std::vector<Eigen::Index>> selected;       // n x K
};

template <typename T>
struct SharedMemory {
  static constexpr T kCosineEps = T(1e-8);

  ag::Parameter<T> slots;  // M x d_m
  ag::Parameter<T> w_f;    // d x d_q
  ag::Parameter<T> w_in;   // d_m x d_q
  ag::Parameter<T> w_out;  // d_m x d
  int topk = 1;

  SharedMemory() = default;
  SharedMemory(const std::string& name, Eigen::Index width, Eigen::Index num_slots, int k, Rng& rng)
      : SharedMemory(name, width, num_slots, k, width, width, rng) {}
  SharedMemory(const std::string& name, Eigen::Index width, Eigen::Index num_slots, int k, Eigen::Index slot_width,
               Eigen::Index query_width, Rng& rng)
      : slots(name + ".slots", random_normal<T>(num_slots, slot_width, 1.0 / std::sqrt(double(slot_width)), rng)),
        w_f(name + ".w_f", random_normal<T>(width, query_width, 1.0 / std::sqrt(double(width)), rng)),
        w_in(name + ".w_in", random_normal<T>(slot_width, query_width, 1.0 / std::sqrt(double(slot_width)), rng)),
        w_out(name + ".w_out", random_normal<T>(slot_width, width, 1.0 / std::sqrt(double(slot_width)), rng)),
        topk(k) {
    if (k < 1 || k > num_slots) throw ConfigError("memory: top-K must lie in [1, M]");
  }

  Eigen::Index num_slots() const { return slots.value.rows(); }

  /// r_f = sum_i softmax(D_s)_i * m_{s_i} W_out over the top-K cosine
  /// matches between f W_f and m W_in, for every row f of `features`.
  MemoryQuery<T> query(const ag::Var<T>& features) {
    auto& t = *features.tape();
    auto m = t.parameter(slots);
    auto fp = ag::row_normalize(ag::matmul(features, t.parameter(w_f)), kCosineEps);
    auto mp = ag::row_normalize(ag::matmul(m, t.parameter(w_in)), kCosineEps);
    MemoryQuery<T> q;
    q.scores = ag::matmul_bt(fp, mp);
    q.weights = ag::topk_softmax(q.scores, topk, &q.selected);
    q.response = ag::matmul(q.weights, ag::matmul(m, t.parameter(w_out)));
    return q;
  }

  /// f_m = f + r_f, row by row.
  ag::Var<T> enrich(const ag::Var<T>& features, std::vector<std::vector<Eigen::Index>>* selected = nullptr) {
    auto q = query(features);
    if (selected != nullptr) *selected = std::move(q.selected);
    return ag::add(features, q.response);
  }

  MemoryResponse<T> query_vector(const Eigen::Matrix<T, 1, Eigen::Dynamic>& f) {
    ag::Tape<T> t(false);
    auto q = query(t.constant(Matrix<T>(f)));
    MemoryResponse<T> out;
    out.r = q.response.value().row(0);
    out.selected = q.selected.front();
    for (auto s : out.selected) {
      out.similarities.push_back(q.scores.value()(0, s));
      out.weights.push_back(q.weights.value()(0, s));
    }
    return out;
  }

  void collect(nn::ParamRefs<T>& out) {
    out.push_back(&slots);
    out.push_back(&w_f);
    out.push_back(&w_in);
    out.push_back(&w_out);
  }
};

}  // namespace medrat
