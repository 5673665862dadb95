// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// First-order screening: weight attribution (parameter delta contracted with
// the anchor-utility gradient at the base) and activation attribution
// (activation delta contracted with the activation gradient), plus the
// static parameter-drift profile.

#pragma once

#include <array>
#include <span>
#include <vector>

#include "wplab/anchor.hpp"
#include "wplab/patching.hpp"
#include "wplab/scores.hpp"

namespace wplab {

/// sft - base, tensor by tensor. Throws on a config mismatch.
ModelParams param_delta(const ModelParams& base, const ModelParams& sft);

/// base + eps * delta.
ModelParams interpolate(const ModelParams& base, const ModelParams& delta, double eps);

/// dF_a/dtheta at `model` for one input, laid out like the parameters.
ModelParams anchor_param_gradient(const ModelParams& model, std::span<const int> x, const AnchorSpec& spec);

/// Query and output parts of head (l, h): sum over W_Q[:, I_h] and W_O[I_h, :]
/// of delta * grad.
double head_attr_aggregate(const ModelParams& grads, const ModelParams& delta, int layer, int head);
/// Gate column, up column and down row of neuron (l, j).
double neuron_attr_aggregate(const ModelParams& grads, const ModelParams& delta, int layer, int j);
double component_attr(const ModelParams& grads, const ModelParams& delta, ComponentId c);

/// mean over x of <delta, dF_a/dtheta> on c's slice / G(x). One backward pass
/// per input serves every component.
ScoreTable weight_attr_sweep(const ModelParams& base, const ModelParams& delta, const AnchorSpec& spec,
                             const GapFilteredSet& eval, std::span<const ComponentId> components = {},
                             int threads = 1);
double weight_attr(const ModelParams& base, const ModelParams& delta, const AnchorSpec& spec,
                   const GapFilteredSet& eval, ComponentId c, int threads = 1);

/// mean over x of <z_c(sft) - z_c(base), dF_a/dz_c at base> / G(x), where
/// z_c is the head output O(l,h) or the neuron activation a(l,j) at every
/// position.
ScoreTable activation_attr_sweep(const ModelParams& base, const ModelParams& sft, const AnchorSpec& spec,
                                 const GapFilteredSet& eval, std::span<const ComponentId> components = {},
                                 int threads = 1);
double activation_attr(const ModelParams& base, const ModelParams& sft, const AnchorSpec& spec,
                       const GapFilteredSet& eval, ComponentId c, int threads = 1);

inline constexpr std::array<LayerTensor, 7> kDriftTensors = {
    LayerTensor::Wq, LayerTensor::Wk, LayerTensor::Wv, LayerTensor::Wo,
    LayerTensor::Gate, LayerTensor::Up, LayerTensor::Down};

struct DriftRow {
  int layer = 0;
  std::array<double, 7> relative{};  // |delta|_F / |base|_F in kDriftTensors order

  double attention_mean() const { return (relative[0] + relative[1] + relative[2] + relative[3]) / 4.0; }
  double mlp_mean() const { return (relative[4] + relative[5] + relative[6]) / 3.0; }
};

/// Per-layer relative Frobenius drift of the seven projection matrices.
/// Throws when a base matrix has zero norm.
std::vector<DriftRow> drift_profile(const ModelParams& base, const ModelParams& delta);

}  // namespace wplab
