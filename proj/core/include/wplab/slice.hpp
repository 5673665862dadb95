// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Replaceable parameter slice of a component: for head H(l,h) the W_Q
// columns and W_O rows of that head; for neuron N(l,j) column j of W_gate and
// W_up plus row j of W_down. K/V projections are never part of a head slice
// because grouped heads share them.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wplab/model.hpp"

namespace wplab {

enum class LayerTensor : std::uint8_t { Wq, Wk, Wv, Wo, Gate, Up, Down, Norms };

std::string_view layer_tensor_suffix(LayerTensor t);

template <class T>
BasicTensor<T>& layer_tensor(BasicModelParams<T>& p, int layer, LayerTensor t) {
  auto& lp = p.layers.at(static_cast<std::size_t>(layer));
  switch (t) {
    case LayerTensor::Wq: return lp.wq;
    case LayerTensor::Wk: return lp.wk;
    case LayerTensor::Wv: return lp.wv;
    case LayerTensor::Wo: return lp.wo;
    case LayerTensor::Gate: return lp.w_gate;
    case LayerTensor::Up: return lp.w_up;
    case LayerTensor::Down: return lp.w_down;
    case LayerTensor::Norms: return lp.norms;
  }
  return lp.wq;
}

template <class T>
const BasicTensor<T>& layer_tensor(const BasicModelParams<T>& p, int layer, LayerTensor t) {
  return layer_tensor(const_cast<BasicModelParams<T>&>(p), layer, t);
}

enum class SliceAxis : std::uint8_t { Rows, Cols };

/// A block of whole rows or whole columns of one layer matrix.
struct SliceRegion {
  int layer = 0;
  LayerTensor tensor = LayerTensor::Wq;
  SliceAxis axis = SliceAxis::Cols;
  std::size_t start = 0;
  std::size_t count = 0;

  std::string tensor_name() const;
  // Calls f(flat_index) for every element of the region in row-major order.
  template <class F>
  void for_each_index(const Shape& shape, F&& f) const {
    const std::size_t cols = shape.at(1);
    if (axis == SliceAxis::Rows) {
      for (std::size_t i = start * cols; i < (start + count) * cols; ++i) f(i);
    } else {
      for (std::size_t r = 0; r < shape[0]; ++r) {
        for (std::size_t c = start; c < start + count; ++c) f(r * cols + c);
      }
    }
  }
  bool overlaps(const SliceRegion& o) const {
    return layer == o.layer && tensor == o.tensor && axis == o.axis && start < o.start + o.count &&
           o.start < start + count;
  }
  friend bool operator==(const SliceRegion&, const SliceRegion&) = default;
};

struct ParamSlice {
  ComponentId component;
  std::vector<SliceRegion> regions;

  std::size_t numel(const ModelConfig& config) const;
};

ParamSlice component_slice(const ModelConfig& config, ComponentId c);

/// Copies the slice of `src` into `dst`.
template <class T>
void copy_slice(const ParamSlice& s, const BasicModelParams<T>& src, BasicModelParams<T>& dst) {
  for (const auto& r : s.regions) {
    const auto& a = layer_tensor(src, r.layer, r.tensor);
    auto& b = layer_tensor(dst, r.layer, r.tensor);
    r.for_each_index(a.shape(), [&](std::size_t i) { b[i] = a[i]; });
  }
}

/// Sum over the slice of a[i] * b[i], accumulated in double.
template <class A, class B>
double slice_contract(const ParamSlice& s, const BasicModelParams<A>& a, const BasicModelParams<B>& b) {
  double acc = 0.0;
  for (const auto& r : s.regions) {
    const auto& x = layer_tensor(a, r.layer, r.tensor);
    const auto& y = layer_tensor(b, r.layer, r.tensor);
    r.for_each_index(x.shape(), [&](std::size_t i) { acc += static_cast<double>(x[i]) * static_cast<double>(y[i]); });
  }
  return acc;
}

}  // namespace wplab
