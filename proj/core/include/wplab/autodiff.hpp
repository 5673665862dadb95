// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode differentiation over a recorded operation tape.
//
// A BasicTape owns every value produced while building a computation. Each
// recorded op stores its inputs and a backward closure; backward() walks the
// tape once in reverse id order, which is a valid reverse topological order
// because nodes can only reference earlier nodes.

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "wplab/tensor.hpp"

namespace wplab {

template <class T>
class BasicTape;

template <class T>
struct BasicVar {
  BasicTape<T>* tape = nullptr;
  std::uint32_t id = 0;

  bool valid() const { return tape != nullptr; }
  const BasicTensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

using Var = BasicVar<float>;
using VarD = BasicVar<double>;

/// Gradients keyed by tape node. Nodes that did not participate in the
/// output have no entry and read back as zero.
template <class T>
class BasicGradients {
 public:
  const BasicTensor<T>* find(BasicVar<T> v) const {
    if (v.id >= by_node_.size() || !by_node_[v.id]) return nullptr;
    return &*by_node_[v.id];
  }
  bool contains(BasicVar<T> v) const { return find(v) != nullptr; }
  BasicTensor<T> get(BasicVar<T> v) const {
    if (const auto* g = find(v)) return *g;
    return BasicTensor<T>(v.shape());
  }

 private:
  friend class BasicTape<T>;
  std::vector<std::optional<BasicTensor<T>>> by_node_;
};

using Gradients = BasicGradients<float>;
using GradientsD = BasicGradients<double>;

template <class T>
class BackwardContext {
 public:
  const BasicTensor<T>& grad_out() const { return grad_out_; }
  const BasicTensor<T>& output() const { return tape_.value(self_); }
  const BasicTensor<T>& input(std::size_t i) const { return tape_.value(inputs_[i]); }
  // Gradient slot for input i, or nullptr when that input needs no gradient.
  BasicTensor<T>* grad_in(std::size_t i) const;

 private:
  friend class BasicTape<T>;
  BackwardContext(const BasicTape<T>& tape, std::uint32_t self, std::span<const std::uint32_t> inputs,
                  const BasicTensor<T>& grad_out,
                  std::vector<std::optional<BasicTensor<T>>>& grads)
      : tape_(tape), self_(self), inputs_(inputs), grad_out_(grad_out), grads_(grads) {}

  const BasicTape<T>& tape_;
  std::uint32_t self_;
  std::span<const std::uint32_t> inputs_;
  const BasicTensor<T>& grad_out_;
  std::vector<std::optional<BasicTensor<T>>>& grads_;
};

template <class T>
class BasicTape {
 public:
  using BackwardFn = std::function<void(const BackwardContext<T>&)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  BasicVar<T> constant(BasicTensor<T> value) { return leaf(std::move(value), false); }
  BasicVar<T> leaf(BasicTensor<T> value, bool requires_grad);
  // Leaf that references caller-owned storage, which must outlive the tape.
  BasicVar<T> borrow(const BasicTensor<T>& value, bool requires_grad);
  BasicVar<T> record(const char* op, BasicTensor<T> value, std::initializer_list<BasicVar<T>> inputs,
                     BackwardFn backward);
  BasicVar<T> record(const char* op, BasicTensor<T> value, std::span<const BasicVar<T>> inputs,
                     BackwardFn backward);

  const BasicTensor<T>& value(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.owned;
  }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar output. Deterministic: the same tape always
  /// produces bit-identical gradients.
  BasicGradients<T> backward(BasicVar<T> output) const;

 private:
  struct Node {
    BasicTensor<T> owned;
    const BasicTensor<T>* borrowed = nullptr;
    bool requires_grad = false;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
  };
  // deque: values handed out by reference stay valid as the tape grows.
  std::deque<Node> nodes_;
};

using Tape = BasicTape<float>;
using TapeD = BasicTape<double>;

// Additive mask value treated as "masked out".
inline constexpr double kMaskedLogit = -1e30;

// ---- primitive ops --------------------------------------------------------
// All ops record onto the tape of their first argument and throw
// NonFiniteError if the result contains NaN or Inf.

template <class T> BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b);
// a * b^T
template <class T> BasicVar<T> matmul_bt(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> add(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> scale(BasicVar<T> a, double s);
template <class T> BasicVar<T> silu(BasicVar<T> x);
// Row-wise RMS normalisation over the last dim, times a per-feature gain.
template <class T> BasicVar<T> rmsnorm(BasicVar<T> x, BasicVar<T> gain, double eps);
// Rotary embedding over contiguous head blocks of width head_dim; row r is
// position r. Adjacent dims (2i, 2i+1) form a rotation pair.
template <class T> BasicVar<T> rope(BasicVar<T> x, std::size_t head_dim, double base);
// Softmax over each row after adding `mask` (same shape, entries 0 or
// <= kMaskedLogit). Masked entries are exactly zero in the output.
template <class T> BasicVar<T> softmax_rows(BasicVar<T> x, const std::type_identity_t<BasicTensor<T>>* mask);
template <class T> BasicVar<T> slice_cols(BasicVar<T> a, std::size_t start, std::size_t count);
template <class T> BasicVar<T> concat_cols(std::span<const BasicVar<T>> parts);
// Copy of `a` with columns [start, start + b.cols) replaced by `b`.
template <class T> BasicVar<T> splice_cols(BasicVar<T> a, std::size_t start, BasicVar<T> b);
template <class T> BasicVar<T> identity(BasicVar<T> a);
template <class T> BasicVar<T> embedding(BasicVar<T> table, std::span<const int> tokens);
template <class T> BasicVar<T> row(BasicVar<T> a, std::size_t r);
template <class T> BasicVar<T> sum(BasicVar<T> a);
template <class T> BasicVar<T> dot(BasicVar<T> a, BasicVar<T> b);
// Cosine similarity of two equally shaped tensors, flattened. Throws on a
// zero-norm operand.
template <class T> BasicVar<T> cosine(BasicVar<T> a, BasicVar<T> b);
// Mean token cross-entropy over rows whose target is >= 0.
template <class T> BasicVar<T> cross_entropy(BasicVar<T> logits, std::span<const int> targets);

template <class T>
BasicTensor<T> causal_mask(std::size_t n);

// ---- gradient checking -----------------------------------------------------

/// Builds a scalar on `tape` from leaf variables holding `params`.
using ScalarBuilder = std::function<VarD(TapeD& tape, std::span<const VarD> params)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t entries = 0;
};

/// Central finite differences against backward() for every entry of every
/// parameter. Relative error uses max(|fd|, |analytic|, abs_floor) as the
/// denominator so that entries that are zero on both routes compare exactly.
GradCheckResult finite_diff_check(const ScalarBuilder& f, const std::vector<TensorD>& params,
                                  double step = 1e-5, double abs_floor = 1e-8);

using ValueFn = std::function<double()>;

/// Same comparison for objectives that build their own tapes: each entry of
/// *params[i] is nudged in place (and restored) while `f` is re-evaluated, and
/// the central difference is compared with analytic[i].
GradCheckResult finite_diff_check(const ValueFn& f, std::span<TensorD* const> params,
                                  std::span<const TensorD> analytic, double step = 1e-5,
                                  double abs_floor = 1e-8);

}  // namespace wplab
