// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Vector anchor: a task direction read at one residual layer and position,
// the cosine utility F_a built on it, and calibrated steering along it.

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wplab/model.hpp"
#include "wplab/workshop.hpp"

namespace wplab {

/// Anchor position t_a, counted back from the last prompt token.
struct PositionRule {
  int from_end = 0;

  std::size_t position(std::size_t prompt_len) const;
  std::string str() const;  // "last" or "last-<k>"
  static PositionRule parse(std::string_view s);
  friend bool operator==(const PositionRule&, const PositionRule&) = default;
};

struct AnchorSpec {
  int layer = 1;  // residual index l_a in [1, n_layers]: state after l_a blocks
  PositionRule rule;
  Tensor v;      // d_model
  Tensor v_hat;  // v / |v|
  double mu_bar = 0.0;

  // Throws unless 1 <= layer <= n_layers, v has d_model finite entries and a
  // nonzero norm, and v_hat is its normalization.
  void validate(const ModelConfig& config) const;
};

AnchorSpec make_anchor_spec(const Tensor& v, int layer, PositionRule rule = {});

/// Mean of z_l(t_a | x_r) - z_l(t_a | x_cf) over the pairs, accumulated in
/// double. Throws on an empty pair list.
Tensor extract_layer_direction(const ModelParams& model, std::span<const PairedExample> pairs, int layer,
                               PositionRule rule = {}, int threads = 1);
/// Directions for every layer 1..n_layers (element l-1 is layer l).
std::vector<Tensor> extract_directions(const ModelParams& model, std::span<const PairedExample> pairs,
                                       PositionRule rule = {}, int threads = 1);

/// Residual state z_{l_a}(t_a). `prompt_len` locates t_a when the trace also
/// covers generated tokens; 0 means the whole trace is the prompt.
Tensor anchor_state(const Trace& trace, const AnchorSpec& spec, std::size_t prompt_len = 0);

double anchor_projection(const Trace& trace, const AnchorSpec& spec, std::size_t prompt_len = 0);

/// Sets spec.mu_bar to the mean projection of the specialized model's anchor
/// state on v_hat over the instructed inputs.
void calibrate(AnchorSpec& spec, const ModelParams& sft, std::span<const PairedExample> pairs, int threads = 1);

/// Differentiable F_a on the trace's tape.
Var anchor_utility_var(const Trace& trace, const AnchorSpec& spec, std::size_t prompt_len = 0);
double anchor_utility(const Trace& trace, const AnchorSpec& spec, std::size_t prompt_len = 0);
double anchor_utility(const RunFn& run, std::span<const int> x, const AnchorSpec& spec);
double anchor_utility(const ModelParams& model, std::span<const int> x, const AnchorSpec& spec);

double anchor_gap(const ModelParams& base, const ModelParams& sft, std::span<const int> x, const AnchorSpec& spec);

/// alpha(x) = mu_bar - <z_a(x | base), v_hat>.
double steering_alpha(const ModelParams& base, std::span<const int> x, const AnchorSpec& spec);

/// Adds alpha * v_hat to row `position` of the residual at the anchor layer.
ForwardHooks steering_hooks(const AnchorSpec& spec, std::size_t position, double alpha);

Trace calibrated_steer(const ModelParams& base, std::span<const int> x, const AnchorSpec& spec);

/// Calibrated steering during decoding: alpha is fixed from the prompt and
/// the shift is applied at the prompt's anchor position on every step.
PromptRunFactory steered_runs(const ModelParams& base, const AnchorSpec& spec);

/// (acc_steer - acc_base) / (acc_inst - acc_base). Throws when the
/// denominator is zero.
double correction_rate(double acc_base, double acc_inst, double acc_steer);

struct LayerRecovery {
  int layer = 0;
  double steered_accuracy = 0.0;
  double correction_rate = 0.0;
};

struct AnchorSelection {
  AnchorSpec spec;
  double base_accuracy = 0.0;
  double sft_accuracy = 0.0;
  std::vector<LayerRecovery> layers;
  // True when no layer recovers anything; the best layer is still returned.
  bool no_recovery = false;
};

/// Directions and mu_bar from `extraction`, steering recovery on
/// `evaluation`; the anchor layer maximises the correction rate (ties go to
/// the earlier layer).
AnchorSelection select_anchor(const ModelParams& base, const ModelParams& sft,
                              std::span<const PairedExample> extraction, std::span<const PairedExample> evaluation,
                              PositionRule rule = {}, int threads = 1);

}  // namespace wplab
