#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. Every op records a closure that pushes its output gradient into
// its inputs; Tape::backward walks the tape in reverse creation order, which
// is a valid topological order because inputs always precede outputs.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>

#include "medrat/errors.hpp"

namespace medrat {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace ag {

/// A named trainable tensor. `grad` accumulates across backward passes until
/// zero_grad() is called.
template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;

  Parameter() = default;
  Parameter(std::string n, Matrix<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix<T>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

template <typename T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid as long as the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const { return tape_->value(id_); }
  const Matrix<T>& grad() const { return tape_->grad(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T item() const { return value()(0, 0); }

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool needs_grad() const { return tape_->needs_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  /// Receives the tape and the id of the node whose gradient is being
  /// propagated.
  using Backward = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Matrix<T> value) { return push(std::move(value), false, nullptr); }

  /// Each parameter maps to a single node per tape so repeated uses share
  /// one gradient buffer.
  Var<T> parameter(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>(this, it->second);
    Var<T> v = push(p.value, record_, nullptr);
    nodes_[v.id()].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  Var<T> push(Matrix<T> value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  template <typename... Vs>
  bool any_needs_grad(const Vs&... vs) const {
    return record_ && (vs.needs_grad() || ...);
  }

  const Matrix<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient buffer, allocated as zeros on first access.
  Matrix<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0 && n.value.size() != 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  const Matrix<T>& grad(std::size_t id) const {
    return const_cast<Tape*>(this)->grad(id);
  }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    if (!nodes_[id].needs_grad) return;
    grad(id) += g;
  }

  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

  /// Seeds d(root)/d(root) = 1 and propagates to every recorded input.
  /// Parameter gradients are added to Parameter::grad.
  void backward(const Var<T>& root) {
    if (root.tape() != this) throw InputError("backward: variable belongs to another tape");
    if (root.value().size() != 1) throw InputError("backward: root must be a scalar");
    if (!nodes_[root.id()].needs_grad) return;
    grad(root.id()).setConstant(T(1));
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool needs_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  bool record_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
};

}  // namespace ag
}  // namespace medrat
