// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/anchor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "wplab/parallel.hpp"

namespace wplab {

std::size_t PositionRule::position(std::size_t prompt_len) const {
  if (from_end < 0 || static_cast<std::size_t>(from_end) >= prompt_len) {
    throw std::out_of_range("anchor position " + str() + " outside a prompt of length " + std::to_string(prompt_len));
  }
  return prompt_len - 1 - static_cast<std::size_t>(from_end);
}

std::string PositionRule::str() const { return from_end == 0 ? "last" : "last-" + std::to_string(from_end); }

PositionRule PositionRule::parse(std::string_view s) {
  if (s == "last") return {};
  if (s.starts_with("last-")) {
    try {
      std::size_t used = 0;
      const std::string rest(s.substr(5));
      const int k = std::stoi(rest, &used);
      if (used == rest.size() && k >= 0) return {k};
    } catch (const std::exception&) {
    }
  }
  throw std::invalid_argument("unknown anchor position rule '" + std::string(s) + "' (expected last or last-<k>)");
}

void AnchorSpec::validate(const ModelConfig& config) const {
  if (layer < 1 || layer > config.n_layers) {
    throw std::invalid_argument("anchor layer " + std::to_string(layer) + " outside [1, " +
                                std::to_string(config.n_layers) + "]");
  }
  const Shape want{static_cast<std::size_t>(config.d_model)};
  if (v.shape() != want || v_hat.shape() != want) {
    throw ShapeError("anchor direction must have shape " + shape_str(want));
  }
  if (!v.all_finite() || !v_hat.all_finite() || !std::isfinite(mu_bar)) {
    throw NonFiniteError("anchor spec holds non-finite values");
  }
  double n = 0.0;
  for (float x : v_hat.data()) n += static_cast<double>(x) * x;
  if (std::abs(std::sqrt(n) - 1.0) > 1e-6) throw std::invalid_argument("anchor v_hat is not unit length");
}

AnchorSpec make_anchor_spec(const Tensor& v, int layer, PositionRule rule) {
  double n = 0.0;
  for (float x : v.data()) n += static_cast<double>(x) * x;
  n = std::sqrt(n);
  if (!(n > 0.0) || !std::isfinite(n)) throw std::domain_error("anchor direction has zero or non-finite norm");
  AnchorSpec spec;
  spec.layer = layer;
  spec.rule = rule;
  spec.v = v;
  spec.v_hat = Tensor(v.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) spec.v_hat[i] = static_cast<float>(v[i] / n);
  return spec;
}

namespace {

TensorD residual_row(const Trace& tr, int layer, std::size_t pos) {
  const auto r = tr.residual_value(layer).row(pos);
  TensorD out({r.size()});
  for (std::size_t i = 0; i < r.size(); ++i) out[i] = r[i];
  return out;
}

}  // namespace

std::vector<Tensor> extract_directions(const ModelParams& model, std::span<const PairedExample> pairs,
                                       PositionRule rule, int threads) {
  if (pairs.empty()) throw std::invalid_argument("extract_directions: no pairs");
  const int L = model.config.n_layers;
  const auto d = static_cast<std::size_t>(model.config.d_model);
  // diffs[i][l-1] = z_l(x_r) - z_l(x_cf) for pair i
  std::vector<std::vector<TensorD>> diffs(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    Trace r = forward(model, pairs[i].x_r);
    Trace c = forward(model, pairs[i].x_cf);
    const auto pr = rule.position(pairs[i].x_r.size());
    const auto pc = rule.position(pairs[i].x_cf.size());
    for (int l = 1; l <= L; ++l) {
      TensorD a = residual_row(r, l, pr), b = residual_row(c, l, pc);
      for (std::size_t k = 0; k < d; ++k) a[k] -= b[k];
      diffs[i].push_back(std::move(a));
    }
  });
  std::vector<Tensor> out;
  for (int l = 1; l <= L; ++l) {
    TensorD acc({d});
    for (const auto& per_pair : diffs) {
      const auto& x = per_pair[static_cast<std::size_t>(l - 1)];
      for (std::size_t k = 0; k < d; ++k) acc[k] += x[k];
    }
    Tensor v({d});
    for (std::size_t k = 0; k < d; ++k) v[k] = static_cast<float>(acc[k] / static_cast<double>(pairs.size()));
    out.push_back(std::move(v));
  }
  return out;
}

Tensor extract_layer_direction(const ModelParams& model, std::span<const PairedExample> pairs, int layer,
                               PositionRule rule, int threads) {
  if (layer < 1 || layer > model.config.n_layers) {
    throw std::out_of_range("extract_layer_direction: layer " + std::to_string(layer) + " outside [1, " +
                            std::to_string(model.config.n_layers) + "]");
  }
  return extract_directions(model, pairs, rule, threads)[static_cast<std::size_t>(layer - 1)];
}

Tensor anchor_state(const Trace& trace, const AnchorSpec& spec, std::size_t prompt_len) {
  const std::size_t pos = spec.rule.position(prompt_len ? prompt_len : trace.length());
  const auto r = trace.residual_value(spec.layer).row(pos);
  return Tensor({r.size()}, std::vector<float>(r.begin(), r.end()));
}

double anchor_projection(const Trace& trace, const AnchorSpec& spec, std::size_t prompt_len) {
  const Tensor z = anchor_state(trace, spec, prompt_len);
  double p = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) p += static_cast<double>(z[i]) * spec.v_hat[i];
  return p;
}

void calibrate(AnchorSpec& spec, const ModelParams& sft, std::span<const PairedExample> pairs, int threads) {
  if (pairs.empty()) throw std::invalid_argument("calibrate: no pairs");
  std::vector<double> proj(pairs.size());
  parallel_for(pairs.size(), threads,
               [&](std::size_t i) { proj[i] = anchor_projection(forward(sft, pairs[i].x_r), spec); });
  double s = 0.0;
  for (double p : proj) s += p;
  spec.mu_bar = s / static_cast<double>(pairs.size());
}

Var anchor_utility_var(const Trace& trace, const AnchorSpec& spec, std::size_t prompt_len) {
  const std::size_t pos = spec.rule.position(prompt_len ? prompt_len : trace.length());
  Var z = row(trace.residual(spec.layer), pos);
  return cosine(z, z.tape->constant(spec.v_hat));
}

double anchor_utility(const Trace& trace, const AnchorSpec& spec, std::size_t prompt_len) {
  const Tensor z = anchor_state(trace, spec, prompt_len);
  double zz = 0.0, zv = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    zz += static_cast<double>(z[i]) * z[i];
    zv += static_cast<double>(z[i]) * spec.v_hat[i];
    vv += static_cast<double>(spec.v_hat[i]) * spec.v_hat[i];
  }
  if (zz == 0.0) throw std::domain_error("anchor utility: zero-norm anchor state");
  return std::clamp(zv / std::sqrt(zz * vv), -1.0, 1.0);
}

double anchor_utility(const RunFn& run, std::span<const int> x, const AnchorSpec& spec) {
  return anchor_utility(run(x), spec);
}

double anchor_utility(const ModelParams& model, std::span<const int> x, const AnchorSpec& spec) {
  return anchor_utility(forward(model, x), spec);
}

double anchor_gap(const ModelParams& base, const ModelParams& sft, std::span<const int> x, const AnchorSpec& spec) {
  return anchor_utility(sft, x, spec) - anchor_utility(base, x, spec);
}

double steering_alpha(const ModelParams& base, std::span<const int> x, const AnchorSpec& spec) {
  return spec.mu_bar - anchor_projection(forward(base, x), spec);
}

ForwardHooks steering_hooks(const AnchorSpec& spec, std::size_t position, double alpha) {
  ForwardHooks hooks;
  auto shift = std::make_shared<Tensor>(spec.v_hat);
  for (auto& x : shift->data()) x = static_cast<float>(alpha * x);
  const int layer = spec.layer;
  hooks.residual = [shift, layer, position](int l, Var z) {
    if (l != layer) return z;
    Tensor delta(z.shape());
    const auto d = shift->numel();
    for (std::size_t i = 0; i < d; ++i) delta(position, i) = (*shift)[i];
    return add(z, z.tape->constant(std::move(delta)));
  };
  return hooks;
}

Trace calibrated_steer(const ModelParams& base, std::span<const int> x, const AnchorSpec& spec) {
  ForwardOptions o;
  o.hooks = steering_hooks(spec, spec.rule.position(x.size()), steering_alpha(base, x, spec));
  return forward(base, x, o);
}

PromptRunFactory steered_runs(const ModelParams& base, const AnchorSpec& spec) {
  return [&base, spec](std::span<const int> prompt) -> RunFn {
    ForwardOptions o;
    o.hooks = steering_hooks(spec, spec.rule.position(prompt.size()), steering_alpha(base, prompt, spec));
    return [&base, o](std::span<const int> tokens) { return forward(base, tokens, o); };
  };
}

double correction_rate(double acc_base, double acc_inst, double acc_steer) {
  const double den = acc_inst - acc_base;
  if (den == 0.0) throw std::domain_error("correction rate undefined: instructed and base accuracy are equal");
  return (acc_steer - acc_base) / den;
}

AnchorSelection select_anchor(const ModelParams& base, const ModelParams& sft,
                              std::span<const PairedExample> extraction, std::span<const PairedExample> evaluation,
                              PositionRule rule, int threads) {
  if (extraction.empty() || evaluation.empty()) throw std::invalid_argument("select_anchor: empty extraction or evaluation half");
  AnchorSelection sel;
  sel.base_accuracy = task_accuracy(base, evaluation, threads);
  sel.sft_accuracy = task_accuracy(sft, evaluation, threads);
  const auto dirs = extract_directions(sft, extraction, rule, threads);
  std::optional<AnchorSpec> best;
  double best_r = 0.0;
  for (int l = 1; l <= base.config.n_layers; ++l) {
    AnchorSpec spec = make_anchor_spec(dirs[static_cast<std::size_t>(l - 1)], l, rule);
    calibrate(spec, sft, extraction, threads);
    LayerRecovery rec;
    rec.layer = l;
    rec.steered_accuracy = task_accuracy(steered_runs(base, spec), evaluation, threads);
    rec.correction_rate = correction_rate(sel.base_accuracy, sel.sft_accuracy, rec.steered_accuracy);
    sel.layers.push_back(rec);
    if (!best || rec.correction_rate > best_r) {
      best = spec;
      best_r = rec.correction_rate;
    }
  }
  sel.spec = *best;
  sel.no_recovery = best_r <= 0.0;
  return sel;
}

}  // namespace wplab
