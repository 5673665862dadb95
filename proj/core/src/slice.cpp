// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/slice.hpp"

namespace wplab {

std::string_view layer_tensor_suffix(LayerTensor t) {
  return kLayerTensorSuffixes[static_cast<std::size_t>(t)];
}

std::string SliceRegion::tensor_name() const {
  return "layers." + std::to_string(layer) + "." + std::string(layer_tensor_suffix(tensor));
}

std::size_t ParamSlice::numel(const ModelConfig& config) const {
  std::size_t n = 0;
  for (const auto& r : regions) {
    const Shape shape = expected_tensor_shape(config, r.tensor_name());
    n += r.count * (r.axis == SliceAxis::Rows ? shape[1] : shape[0]);
  }
  return n;
}

ParamSlice component_slice(const ModelConfig& config, ComponentId c) {
  validate_component(config, c);
  ParamSlice s{c, {}};
  if (c.is_head()) {
    const auto dk = static_cast<std::size_t>(config.head_dim());
    const auto start = static_cast<std::size_t>(c.index) * dk;
    s.regions.push_back({c.layer, LayerTensor::Wq, SliceAxis::Cols, start, dk});
    s.regions.push_back({c.layer, LayerTensor::Wo, SliceAxis::Rows, start, dk});
  } else {
    const auto j = static_cast<std::size_t>(c.index);
    s.regions.push_back({c.layer, LayerTensor::Gate, SliceAxis::Cols, j, 1});
    s.regions.push_back({c.layer, LayerTensor::Up, SliceAxis::Cols, j, 1});
    s.regions.push_back({c.layer, LayerTensor::Down, SliceAxis::Rows, j, 1});
  }
  return s;
}

}  // namespace wplab
