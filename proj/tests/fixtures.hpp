// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Small models, plants and anchors shared by the unit tests.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "wplab/anchor.hpp"
#include "wplab/attribution.hpp"
#include "wplab/hierarchy.hpp"
#include "wplab/model.hpp"
#include "wplab/workshop.hpp"

namespace wplab::testing {

inline ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.n_kv_heads = 2;
  cfg.d_ff = 8;
  cfg.vocab_size = 32;
  cfg.max_seq_len = 24;
  return cfg;
}

/// Random init with larger matrices so attention and gating are far from
/// uniform.
inline ModelParams lively_model(const ModelConfig& cfg, std::uint64_t seed, float gain = 5.0f) {
  ModelParams p = init_model(cfg, seed);
  p.for_each_tensor([gain](const std::string&, Tensor& t) {
    if (t.rank() == 2) {
      for (auto& v : t.data()) v *= gain;
    }
  });
  return p;
}

inline ModelConfig trained_config() {
  ModelConfig cfg = small_config();
  cfg.d_ff = 16;
  return cfg;
}

/// Small trained pair on the default Upper task, built once per binary.
inline const ModelPair& trained_small_pair() {
  static const ModelPair pair = [] {
    PairHyper h;
    h.pretrain.steps = 300;
    h.specialize.steps = 100;
    return train_base_and_specialized(trained_config(), Vocabulary{}, ToyTask{}, h, {}, 64);
  }();
  return pair;
}

inline Tensor random_direction(std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor v({d});
  for (auto& x : v.data()) x = static_cast<float>(nd(rng));
  return v;
}

inline std::vector<std::vector<int>> random_inputs(const ModelConfig& cfg, std::size_t n, std::size_t len,
                                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, cfg.vocab_size - 1);
  std::vector<std::vector<int>> out(n, std::vector<int>(len));
  for (auto& x : out) {
    for (auto& t : x) t = tok(rng);
  }
  return out;
}

/// Anchor direction pointing from the base to the edited model's mean
/// anchor state, so edits register as a positive gap.
inline AnchorSpec shift_anchor(const ModelParams& base, const ModelParams& sft,
                               const std::vector<std::vector<int>>& inputs, int layer) {
  const auto d = static_cast<std::size_t>(base.config.d_model);
  std::vector<double> acc(d, 0.0);
  for (const auto& x : inputs) {
    const Trace ts = forward(sft, x);
    const Trace tb = forward(base, x);
    const auto a = ts.residual_value(layer).row(x.size() - 1);
    const auto b = tb.residual_value(layer).row(x.size() - 1);
    for (std::size_t i = 0; i < d; ++i) acc[i] += static_cast<double>(a[i]) - b[i];
  }
  Tensor v({d});
  for (std::size_t i = 0; i < d; ++i) v[i] = static_cast<float>(acc[i] / static_cast<double>(inputs.size()));
  return make_anchor_spec(v, layer);
}

/// Cosine of the anchor state with v, computed directly from the residual.
inline double oracle_cosine(const ModelParams& m, const std::vector<int>& x, const AnchorSpec& spec) {
  const Trace tr = forward(m, x);
  const auto z = tr.residual_value(spec.layer).row(x.size() - 1);
  double zz = 0, zv = 0, vv = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    zz += static_cast<double>(z[i]) * z[i];
    zv += static_cast<double>(z[i]) * spec.v[i];
    vv += static_cast<double>(spec.v[i]) * spec.v[i];
  }
  return zv / std::sqrt(zz * vv);
}

/// Same cosine from a double-precision forward pass.
inline double oracle_cosine_d(const ModelParamsD& m, const std::vector<int>& x, const AnchorSpec& spec) {
  const TraceD tr = forward(m, x);
  const auto z = tr.residual_value(spec.layer).row(x.size() - 1);
  double zz = 0, zv = 0, vv = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    zz += z[i] * z[i];
    zv += z[i] * spec.v[i];
    vv += static_cast<double>(spec.v[i]) * spec.v[i];
  }
  return zv / std::sqrt(zz * vv);
}

/// Lively base plus slice-restricted random edits on `planted`, with an
/// anchor that sees the shift.
struct PlantedPair {
  ModelParams base;
  ModelParams sft;
  std::vector<ComponentId> planted;
  std::vector<std::vector<int>> inputs;
  AnchorSpec spec;
};

inline PlantedPair planted_pair(std::vector<ComponentId> planted, double scale = 0.3, int anchor_layer = 2) {
  PlantedPair p;
  const auto cfg = small_config();
  p.base = lively_model(cfg, 11);
  PlantSpec ps;
  ps.seed = 5;
  for (const auto& c : planted) ps.entries.push_back({c, scale});
  p.sft = plant_component_edits(p.base, ps);
  p.planted = std::move(planted);
  p.inputs = random_inputs(cfg, 24, 6, 3);
  p.spec = shift_anchor(p.base, p.sft, p.inputs, anchor_layer);
  return p;
}

/// Base with neuron `source`'s down-projection row moved along the summed
/// gradients of the target's need utility and of F_a, each normalized, by
/// `eta` times the row's norm. The edit supplies the target by
/// construction.
inline ModelParams plant_supplier(const ModelParams& base, const std::vector<std::vector<int>>& inputs,
                                  const AnchorSpec& spec, ComponentId target, ComponentId source, double eta) {
  const auto d = static_cast<std::size_t>(base.config.d_model);
  const auto j = static_cast<std::size_t>(source.index);
  std::vector<double> need(d, 0.0), anchor(d, 0.0);
  for (const auto& x : inputs) {
    const auto gn = need_param_gradient(base, x, need_direction(base, x, target, spec));
    const auto ga = anchor_param_gradient(base, x, spec);
    const auto& rn = gn.layers[static_cast<std::size_t>(source.layer)].w_down;
    const auto& ra = ga.layers[static_cast<std::size_t>(source.layer)].w_down;
    for (std::size_t i = 0; i < d; ++i) {
      need[i] += rn(j, i);
      anchor[i] += ra(j, i);
    }
  }
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  ModelParams out = base;
  auto& row = out.layers[static_cast<std::size_t>(source.layer)].w_down;
  double rn = 0.0;
  for (std::size_t i = 0; i < d; ++i) rn += static_cast<double>(row(j, i)) * row(j, i);
  const double step = eta * std::sqrt(rn);
  const double nn = norm(need), na = norm(anchor);
  for (std::size_t i = 0; i < d; ++i) {
    row(j, i) = static_cast<float>(row(j, i) + step * (need[i] / nn + anchor[i] / na));
  }
  return out;
}

}  // namespace wplab::testing
