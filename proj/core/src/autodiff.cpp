// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace wplab {

std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
BasicTensor<T>* BackwardContext<T>::grad_in(std::size_t i) const {
  const std::uint32_t id = inputs_[i];
  if (!tape_.requires_grad(id)) return nullptr;
  auto& slot = grads_[id];
  if (!slot) slot.emplace(tape_.value(id).shape());
  return &*slot;
}

template <class T>
BasicVar<T> BasicTape<T>::leaf(BasicTensor<T> value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
BasicVar<T> BasicTape<T>::borrow(const BasicTensor<T>& value, bool requires_grad) {
  Node n;
  n.borrowed = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
BasicVar<T> BasicTape<T>::record(const char* op, BasicTensor<T> value,
                                 std::initializer_list<BasicVar<T>> inputs, BackwardFn backward) {
  return record(op, std::move(value), std::span<const BasicVar<T>>(inputs.begin(), inputs.size()),
                std::move(backward));
}

template <class T>
BasicVar<T> BasicTape<T>::record(const char* op, BasicTensor<T> value,
                                 std::span<const BasicVar<T>> inputs, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
  Node n;
  n.owned = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape != this) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
BasicGradients<T> BasicTape<T>::backward(BasicVar<T> output) const {
  if (output.tape != this) throw std::invalid_argument("backward: output not on this tape");
  if (value(output.id).numel() != 1) {
    throw ShapeError("backward requires a scalar output, got " + shape_str(value(output.id).shape()));
  }
  BasicGradients<T> result;
  auto& grads = result.by_node_;
  grads.resize(output.id + 1);
  grads[output.id].emplace(value(output.id).shape(), std::vector<T>{T(1)});
  for (std::uint32_t id = output.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!grads[id] || !n.backward) continue;
    // Closures only touch slots of earlier nodes; `grads` never reallocates.
    const BasicTensor<T>& g = *grads[id];
    BackwardContext<T> ctx(*this, id, n.inputs, g, grads);
    n.backward(ctx);
  }
  for (std::uint32_t id = 0; id < grads.size(); ++id) {
    if (grads[id] && !nodes_[id].requires_grad) grads[id].reset();
  }
  return result;
}

namespace {

template <class T>
void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

}  // namespace

template <class T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  require<T>(B.rank() == 2 && B.rows() == k, "matmul",
             "inner dims differ: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  BasicTensor<T> out({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A(i, p);
      const T* brow = B.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) = static_cast<T>(acc[j]);
  }
  return a.tape->record("matmul", std::move(out), {a, b}, [m, k, n](const BackwardContext<T>& ctx) {
    const auto& G = ctx.grad_out();
    const auto& A = ctx.input(0);
    const auto& B = ctx.input(1);
    if (auto* gA = ctx.grad_in(0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(G(i, j)) * B(p, j);
          (*gA)[i * k + p] += static_cast<T>(s);
        }
      }
    }
    if (auto* gB = ctx.grad_in(1)) {
      std::vector<double> acc(k * n, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) acc[p * n + j] += av * static_cast<double>(G(i, j));
        }
      }
      for (std::size_t q = 0; q < k * n; ++q) (*gB)[q] += static_cast<T>(acc[q]);
    }
  });
}

template <class T>
BasicVar<T> matmul_bt(BasicVar<T> a, BasicVar<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  require<T>(B.cols() == k, "matmul_bt",
             "inner dims differ: " + shape_str(A.shape()) + " x " + shape_str(B.shape()) + "^T");
  BasicTensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += static_cast<double>(A(i, p)) * B(j, p);
      out(i, j) = static_cast<T>(s);
    }
  }
  return a.tape->record("matmul_bt", std::move(out), {a, b}, [m, k, n](const BackwardContext<T>& ctx) {
    const auto& G = ctx.grad_out();
    const auto& A = ctx.input(0);
    const auto& B = ctx.input(1);
    if (auto* gA = ctx.grad_in(0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(G(i, j)) * B(j, p);
          (*gA)[i * k + p] += static_cast<T>(s);
        }
      }
    }
    if (auto* gB = ctx.grad_in(1)) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += static_cast<double>(G(i, j)) * A(i, p);
          (*gB)[j * k + p] += static_cast<T>(s);
        }
      }
    }
  });
}

namespace {

template <class T, class F, class B>
BasicVar<T> elementwise2(const char* op, BasicVar<T> a, BasicVar<T> b, F f, B grads) {
  const auto& A = a.value();
  const auto& Bv = b.value();
  require<T>(A.shape() == Bv.shape(), op,
             "shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(Bv.shape()));
  BasicTensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) out[i] = f(A[i], Bv[i]);
  return a.tape->record(op, std::move(out), {a, b}, [grads](const BackwardContext<T>& ctx) {
    const auto& G = ctx.grad_out();
    const auto& A = ctx.input(0);
    const auto& Bv = ctx.input(1);
    auto* gA = ctx.grad_in(0);
    auto* gB = ctx.grad_in(1);
    for (std::size_t i = 0; i < G.numel(); ++i) {
      const auto [da, db] = grads(A[i], Bv[i], G[i]);
      if (gA) (*gA)[i] += da;
      if (gB) (*gB)[i] += db;
    }
  });
}

}  // namespace

template <class T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  return elementwise2<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T g) { return std::pair<T, T>{g, g}; });
}

template <class T>
BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b) {
  return elementwise2<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T g) { return std::pair<T, T>{g, -g}; });
}

template <class T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  return elementwise2<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T g) { return std::pair<T, T>{g * y, g * x}; });
}

template <class T>
BasicVar<T> scale(BasicVar<T> a, double s) {
  const auto& A = a.value();
  BasicTensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) out[i] = static_cast<T>(A[i] * s);
  return a.tape->record("scale", std::move(out), {a}, [s](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad_in(0)) {
      const auto& G = ctx.grad_out();
      for (std::size_t i = 0; i < G.numel(); ++i) (*g)[i] += static_cast<T>(G[i] * s);
    }
  });
}

template <class T>
BasicVar<T> silu(BasicVar<T> x) {
  const auto& X = x.value();
  BasicTensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.numel(); ++i) {
    const double v = X[i];
    out[i] = static_cast<T>(v / (1.0 + std::exp(-v)));
  }
  return x.tape->record("silu", std::move(out), {x}, [](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad_in(0)) {
      const auto& G = ctx.grad_out();
      const auto& X = ctx.input(0);
      for (std::size_t i = 0; i < G.numel(); ++i) {
        const double v = X[i];
        const double s = 1.0 / (1.0 + std::exp(-v));
        (*g)[i] += static_cast<T>(G[i] * s * (1.0 + v * (1.0 - s)));
      }
    }
  });
}

template <class T>
BasicVar<T> rmsnorm(BasicVar<T> x, BasicVar<T> gain, double eps) {
  const auto& X = x.value();
  const auto& Gn = gain.value();
  const std::size_t rows = X.rows(), d = X.cols();
  require<T>(Gn.numel() == d, "rmsnorm", "gain length " + std::to_string(Gn.numel()) +
                                             " != feature dim " + std::to_string(d));
  BasicTensor<T> out(X.shape());
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(X(r, j)) * X(r, j);
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out(r, j) = static_cast<T>(X(r, j) * inv[r] * Gn[j]);
  }
  return x.tape->record("rmsnorm", std::move(out), {x, gain},
                        [rows, d, inv = std::move(inv)](const BackwardContext<T>& ctx) {
    const auto& G = ctx.grad_out();
    const auto& X = ctx.input(0);
    const auto& Gn = ctx.input(1);
    auto* gx = ctx.grad_in(0);
    auto* gg = ctx.grad_in(1);
    std::vector<double> gg_acc(gg ? d : 0, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double ir = inv[r];
      if (gx) {
        double dotp = 0.0;
        for (std::size_t j = 0; j < d; ++j) dotp += static_cast<double>(G(r, j)) * Gn[j] * X(r, j);
        const double c = dotp * ir * ir * ir / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          (*gx)(r, j) += static_cast<T>(static_cast<double>(G(r, j)) * Gn[j] * ir - X(r, j) * c);
        }
      }
      if (gg) {
        for (std::size_t j = 0; j < d; ++j) gg_acc[j] += static_cast<double>(G(r, j)) * X(r, j) * ir;
      }
    }
    if (gg) {
      for (std::size_t j = 0; j < d; ++j) (*gg)[j] += static_cast<T>(gg_acc[j]);
    }
  });
}

template <class T>
BasicVar<T> rope(BasicVar<T> x, std::size_t head_dim, double base) {
  const auto& X = x.value();
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ShapeError("rope: head dim must be even, got " + std::to_string(head_dim));
  }
  require<T>(X.cols() % head_dim == 0, "rope", "width not a multiple of head dim");
  const std::size_t rows = X.rows(), width = X.cols(), half = head_dim / 2;
  std::vector<double> cosv(rows * half), sinv(rows * half);
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double ang = static_cast<double>(t) * freq;
      cosv[t * half + i] = std::cos(ang);
      sinv[t * half + i] = std::sin(ang);
    }
  }
  BasicTensor<T> out(X.shape());
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t b = 0; b < width; b += head_dim) {
      for (std::size_t i = 0; i < half; ++i) {
        const double c = cosv[t * half + i], s = sinv[t * half + i];
        const double x0 = X(t, b + 2 * i), x1 = X(t, b + 2 * i + 1);
        out(t, b + 2 * i) = static_cast<T>(x0 * c - x1 * s);
        out(t, b + 2 * i + 1) = static_cast<T>(x0 * s + x1 * c);
      }
    }
  }
  return x.tape->record("rope", std::move(out), {x},
                        [rows, width, half, head_dim, cosv = std::move(cosv),
                         sinv = std::move(sinv)](const BackwardContext<T>& ctx) {
    auto* g = ctx.grad_in(0);
    if (!g) return;
    const auto& G = ctx.grad_out();
    for (std::size_t t = 0; t < rows; ++t) {
      for (std::size_t b = 0; b < width; b += head_dim) {
        for (std::size_t i = 0; i < half; ++i) {
          const double c = cosv[t * half + i], s = sinv[t * half + i];
          const double g0 = G(t, b + 2 * i), g1 = G(t, b + 2 * i + 1);
          (*g)(t, b + 2 * i) += static_cast<T>(g0 * c + g1 * s);
          (*g)(t, b + 2 * i + 1) += static_cast<T>(-g0 * s + g1 * c);
        }
      }
    }
  });
}

template <class T>
BasicVar<T> softmax_rows(BasicVar<T> x, const std::type_identity_t<BasicTensor<T>>* mask) {
  const auto& X = x.value();
  const std::size_t rows = X.rows(), n = X.cols();
  if (mask) require<T>(mask->shape() == X.shape(), "softmax_rows", "mask shape mismatch");
  BasicTensor<T> out(X.shape());
  std::vector<double> e(n);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      const double m = mask ? static_cast<double>((*mask)(r, j)) : 0.0;
      if (m <= kMaskedLogit * 0.5) continue;
      any = true;
      mx = std::max(mx, static_cast<double>(X(r, j)) + m);
    }
    if (!any) throw std::invalid_argument("softmax_rows: row " + std::to_string(r) + " fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double m = mask ? static_cast<double>((*mask)(r, j)) : 0.0;
      e[j] = (m <= kMaskedLogit * 0.5) ? 0.0 : std::exp(static_cast<double>(X(r, j)) + m - mx);
      z += e[j];
    }
    for (std::size_t j = 0; j < n; ++j) out(r, j) = static_cast<T>(e[j] / z);
  }
  return x.tape->record("softmax_rows", std::move(out), {x}, [rows, n](const BackwardContext<T>& ctx) {
    auto* g = ctx.grad_in(0);
    if (!g) return;
    const auto& G = ctx.grad_out();
    const auto& Y = ctx.output();
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(Y(r, j)) * G(r, j);
      for (std::size_t j = 0; j < n; ++j) {
        (*g)(r, j) += static_cast<T>(static_cast<double>(Y(r, j)) * (G(r, j) - s));
      }
    }
  });
}

template <class T>
BasicVar<T> slice_cols(BasicVar<T> a, std::size_t start, std::size_t count) {
  const auto& A = a.value();
  const std::size_t rows = A.rows(), n = A.cols();
  require<T>(start + count <= n, "slice_cols", "range out of bounds");
  BasicTensor<T> out({rows, count});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < count; ++j) out(r, j) = A(r, start + j);
  }
  return a.tape->record("slice_cols", std::move(out), {a}, [rows, n, start, count](const BackwardContext<T>& ctx) {
    auto* g = ctx.grad_in(0);
    if (!g) return;
    const auto& G = ctx.grad_out();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < count; ++j) (*g)[r * n + start + j] += G(r, j);
    }
  });
}

template <class T>
BasicVar<T> concat_cols(std::span<const BasicVar<T>> parts) {
  require<T>(!parts.empty(), "concat_cols", "no operands");
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require<T>(p.value().rows() == rows, "concat_cols", "row count mismatch");
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  BasicTensor<T> out({rows, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& P = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < widths[k]; ++j) out(r, off + j) = P(r, j);
    }
    off += widths[k];
  }
  return parts[0].tape->record("concat_cols", std::move(out), parts,
                               [rows, total, widths](const BackwardContext<T>& ctx) {
    const auto& G = ctx.grad_out();
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (auto* g = ctx.grad_in(k)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[k]; ++j) (*g)(r, j) += G[r * total + off + j];
        }
      }
      off += widths[k];
    }
  });
}

template <class T>
BasicVar<T> splice_cols(BasicVar<T> a, std::size_t start, BasicVar<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  const std::size_t rows = A.rows(), n = A.cols(), w = B.cols();
  require<T>(B.rows() == rows && start + w <= n, "splice_cols",
             "cannot place " + shape_str(B.shape()) + " into " + shape_str(A.shape()) + " at column " +
                 std::to_string(start));
  BasicTensor<T> out = A;
  if (out.rank() == 1) out = BasicTensor<T>({1, n}, A.vec());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < w; ++j) out(r, start + j) = B(r, j);
  }
  return a.tape->record("splice_cols", std::move(out), {a, b}, [rows, n, w, start](const BackwardContext<T>& ctx) {
    const auto& G = ctx.grad_out();
    if (auto* ga = ctx.grad_in(0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
          if (j < start || j >= start + w) (*ga)[r * n + j] += G(r, j);
        }
      }
    }
    if (auto* gb = ctx.grad_in(1)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) (*gb)[r * w + j] += G(r, start + j);
      }
    }
  });
}

template <class T>
BasicVar<T> identity(BasicVar<T> a) {
  return a.tape->record("identity", a.value(), {a}, [](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad_in(0)) {
      const auto& G = ctx.grad_out();
      for (std::size_t i = 0; i < G.numel(); ++i) (*g)[i] += G[i];
    }
  });
}

template <class T>
BasicVar<T> embedding(BasicVar<T> table, std::span<const int> tokens) {
  const auto& E = table.value();
  const std::size_t vocab = E.rows(), d = E.cols();
  BasicTensor<T> out({tokens.size(), d});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= vocab) {
      throw std::out_of_range("embedding: token " + std::to_string(tokens[t]) + " outside vocab of " +
                              std::to_string(vocab));
    }
    for (std::size_t j = 0; j < d; ++j) out(t, j) = E(static_cast<std::size_t>(tokens[t]), j);
  }
  std::vector<int> ids(tokens.begin(), tokens.end());
  return table.tape->record("embedding", std::move(out), {table}, [ids, d](const BackwardContext<T>& ctx) {
    auto* g = ctx.grad_in(0);
    if (!g) return;
    const auto& G = ctx.grad_out();
    for (std::size_t t = 0; t < ids.size(); ++t) {
      for (std::size_t j = 0; j < d; ++j) (*g)(static_cast<std::size_t>(ids[t]), j) += G(t, j);
    }
  });
}

template <class T>
BasicVar<T> row(BasicVar<T> a, std::size_t r) {
  const auto& A = a.value();
  require<T>(r < A.rows(), "row", "index " + std::to_string(r) + " out of range");
  const std::size_t d = A.cols();
  std::vector<T> v(A.row(r).begin(), A.row(r).end());
  return a.tape->record("row", BasicTensor<T>({d}, std::move(v)), {a}, [r, d](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad_in(0)) {
      const auto& G = ctx.grad_out();
      for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += G[j];
    }
  });
}

template <class T>
BasicVar<T> sum(BasicVar<T> a) {
  const auto& A = a.value();
  double s = 0.0;
  for (T v : A.data()) s += v;
  return a.tape->record("sum", BasicTensor<T>::scalar(static_cast<T>(s)), {a}, [](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad_in(0)) {
      const T go = ctx.grad_out()[0];
      for (auto& v : g->data()) v += go;
    }
  });
}

template <class T>
BasicVar<T> dot(BasicVar<T> a, BasicVar<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  require<T>(A.numel() == B.numel(), "dot", "length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < A.numel(); ++i) s += static_cast<double>(A[i]) * B[i];
  return a.tape->record("dot", BasicTensor<T>::scalar(static_cast<T>(s)), {a, b}, [](const BackwardContext<T>& ctx) {
    const double go = ctx.grad_out()[0];
    const auto& A = ctx.input(0);
    const auto& B = ctx.input(1);
    if (auto* ga = ctx.grad_in(0)) {
      for (std::size_t i = 0; i < A.numel(); ++i) (*ga)[i] += static_cast<T>(go * B[i]);
    }
    if (auto* gb = ctx.grad_in(1)) {
      for (std::size_t i = 0; i < A.numel(); ++i) (*gb)[i] += static_cast<T>(go * A[i]);
    }
  });
}

template <class T>
BasicVar<T> cosine(BasicVar<T> a, BasicVar<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  require<T>(A.numel() == B.numel(), "cosine", "length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < A.numel(); ++i) {
    ab += static_cast<double>(A[i]) * B[i];
    aa += static_cast<double>(A[i]) * A[i];
    bb += static_cast<double>(B[i]) * B[i];
  }
  if (aa == 0.0 || bb == 0.0) throw std::domain_error("cosine: zero-norm operand");
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  const double c = ab / (na * nb);
  return a.tape->record("cosine", BasicTensor<T>::scalar(static_cast<T>(c)), {a, b},
                        [na, nb, c](const BackwardContext<T>& ctx) {
    const double go = ctx.grad_out()[0];
    const auto& A = ctx.input(0);
    const auto& B = ctx.input(1);
    if (auto* ga = ctx.grad_in(0)) {
      for (std::size_t i = 0; i < A.numel(); ++i) {
        (*ga)[i] += static_cast<T>(go * (B[i] / (na * nb) - c * A[i] / (na * na)));
      }
    }
    if (auto* gb = ctx.grad_in(1)) {
      for (std::size_t i = 0; i < A.numel(); ++i) {
        (*gb)[i] += static_cast<T>(go * (A[i] / (na * nb) - c * B[i] / (nb * nb)));
      }
    }
  });
}

template <class T>
BasicVar<T> cross_entropy(BasicVar<T> logits, std::span<const int> targets) {
  const auto& L = logits.value();
  const std::size_t rows = L.rows(), n = L.cols();
  require<T>(targets.size() == rows, "cross_entropy", "one target per row required");
  std::vector<double> probs(rows * n, 0.0);
  double loss = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= n) throw std::out_of_range("cross_entropy: target out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(L(r, j)));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[r * n + j] = std::exp(static_cast<double>(L(r, j)) - mx);
      z += probs[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[r * n + j] /= z;
    loss -= std::log(std::max(probs[r * n + static_cast<std::size_t>(targets[r])], 1e-300));
    ++count;
  }
  require<T>(count > 0, "cross_entropy", "no scored rows");
  loss /= static_cast<double>(count);
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape->record("cross_entropy", BasicTensor<T>::scalar(static_cast<T>(loss)), {logits},
                             [rows, n, count, tg, probs = std::move(probs)](const BackwardContext<T>& ctx) {
    auto* g = ctx.grad_in(0);
    if (!g) return;
    const double go = ctx.grad_out()[0] / static_cast<double>(count);
    for (std::size_t r = 0; r < rows; ++r) {
      if (tg[r] < 0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        double d = probs[r * n + j] - (static_cast<int>(j) == tg[r] ? 1.0 : 0.0);
        (*g)(r, j) += static_cast<T>(go * d);
      }
    }
  });
}

template <class T>
BasicTensor<T> causal_mask(std::size_t n) {
  BasicTensor<T> m({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = r + 1; c < n; ++c) m(r, c) = static_cast<T>(kMaskedLogit);
  }
  return m;
}

GradCheckResult finite_diff_check(const ValueFn& f, std::span<TensorD* const> params,
                                  std::span<const TensorD> analytic, double step, double abs_floor) {
  if (params.size() != analytic.size()) {
    throw std::invalid_argument("finite_diff_check: parameter and gradient counts differ");
  }
  auto evaluate = [&]() {
    const double v = f();
    if (!std::isfinite(v)) throw NonFiniteError("finite_diff_check: objective is not finite");
    return v;
  };
  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    TensorD& p = *params[pi];
    if (p.shape() != analytic[pi].shape()) {
      throw ShapeError("finite_diff_check: gradient shape " + shape_str(analytic[pi].shape()) +
                       " does not match parameter " + shape_str(p.shape()));
    }
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = p[i];
      p[i] = orig + step;
      const double fp = evaluate();
      p[i] = orig - step;
      const double fm = evaluate();
      p[i] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = analytic[pi][i];
      const double abs_err = std::abs(fd - an);
      const double denom = std::max({std::abs(fd), std::abs(an), abs_floor});
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      res.max_rel_error = std::max(res.max_rel_error, abs_err / denom);
      ++res.entries;
    }
  }
  return res;
}

GradCheckResult finite_diff_check(const ScalarBuilder& f, const std::vector<TensorD>& params, double step,
                                  double abs_floor) {
  std::vector<TensorD> work = params;
  std::vector<TensorD> analytic;
  {
    TapeD tape;
    std::vector<VarD> vars;
    for (const auto& p : work) vars.push_back(tape.borrow(p, true));
    VarD out = f(tape, vars);
    if (!std::isfinite(out.value().item())) throw NonFiniteError("finite_diff_check: objective is not finite");
    GradientsD g = tape.backward(out);
    for (const auto& v : vars) analytic.push_back(g.get(v));
  }
  std::vector<TensorD*> ptrs;
  for (auto& p : work) ptrs.push_back(&p);
  return finite_diff_check(
      [&]() {
        TapeD tape;
        std::vector<VarD> vars;
        vars.reserve(work.size());
        for (const auto& p : work) vars.push_back(tape.borrow(p, false));
        return f(tape, vars).value().item();
      },
      ptrs, analytic, step, abs_floor);
}

#define WPLAB_INSTANTIATE_OPS(T)                                                           \
  template class BackwardContext<T>;                                                       \
  template class BasicTape<T>;                                                             \
  template BasicVar<T> matmul(BasicVar<T>, BasicVar<T>);                                   \
  template BasicVar<T> matmul_bt(BasicVar<T>, BasicVar<T>);                                \
  template BasicVar<T> add(BasicVar<T>, BasicVar<T>);                                      \
  template BasicVar<T> sub(BasicVar<T>, BasicVar<T>);                                      \
  template BasicVar<T> mul(BasicVar<T>, BasicVar<T>);                                      \
  template BasicVar<T> scale(BasicVar<T>, double);                                         \
  template BasicVar<T> silu(BasicVar<T>);                                                  \
  template BasicVar<T> rmsnorm(BasicVar<T>, BasicVar<T>, double);                          \
  template BasicVar<T> rope(BasicVar<T>, std::size_t, double);                             \
  template BasicVar<T> softmax_rows(BasicVar<T>, const std::type_identity_t<BasicTensor<T>>*);                 \
  template BasicVar<T> slice_cols(BasicVar<T>, std::size_t, std::size_t);                  \
  template BasicVar<T> concat_cols(std::span<const BasicVar<T>>);                          \
  template BasicVar<T> splice_cols(BasicVar<T>, std::size_t, BasicVar<T>);                 \
  template BasicVar<T> identity(BasicVar<T>);                                              \
  template BasicVar<T> embedding(BasicVar<T>, std::span<const int>);                       \
  template BasicVar<T> row(BasicVar<T>, std::size_t);                                      \
  template BasicVar<T> sum(BasicVar<T>);                                                   \
  template BasicVar<T> dot(BasicVar<T>, BasicVar<T>);                                      \
  template BasicVar<T> cosine(BasicVar<T>, BasicVar<T>);                                   \
  template BasicVar<T> cross_entropy(BasicVar<T>, std::span<const int>);                   \
  template BasicTensor<T> causal_mask<T>(std::size_t);

WPLAB_INSTANTIATE_OPS(float)
WPLAB_INSTANTIATE_OPS(double)

}  // namespace wplab
