// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/patching.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#include "wplab/parallel.hpp"

namespace wplab {

namespace {

void require_same_config(const ModelParams& a, const ModelParams& b, const char* what) {
  if (!(a.config == b.config)) throw std::invalid_argument(std::string(what) + ": models have different configs");
}

std::vector<ComponentId> all_or(const ModelConfig& config, std::span<const ComponentId> components) {
  if (!components.empty()) return {components.begin(), components.end()};
  return enumerate_components(config);
}

double normalized_mean(const GapFilteredSet& eval, const std::vector<double>& f) {
  double acc = 0.0;
  for (std::size_t i = 0; i < eval.inputs.size(); ++i) {
    acc += (f[i] - eval.inputs[i].f_base) / eval.inputs[i].gap;
  }
  return acc / static_cast<double>(eval.inputs.size());
}

void require_inputs(const GapFilteredSet& eval, const char* what) {
  if (eval.inputs.empty()) {
    throw std::invalid_argument(std::string(what) + ": no input passes the gap floor (" +
                                std::to_string(eval.excluded) + " excluded)");
  }
}

ScoreTable tagged(std::string metric, const GapFilteredSet& eval) {
  ScoreTable t;
  t.metric = std::move(metric);
  t.meta["normalization"] = "anchor_gap";
  t.meta["gap_floor"] = std::to_string(eval.floor);
  t.meta["inputs"] = std::to_string(eval.inputs.size());
  t.meta["excluded"] = std::to_string(eval.excluded);
  return t;
}

}  // namespace

PatchedModelView::PatchedModelView(const ModelParams& into, const ModelParams& from)
    : into_(&into), from_(&from), work_(into) {
  require_same_config(into, from, "PatchedModelView");
}

void PatchedModelView::replace(ComponentId c) {
  if (replaced_.contains(c)) return;
  copy_slice(component_slice(work_.config, c), *from_, work_);
  replaced_.insert(c);
}

void PatchedModelView::replace(std::span<const ComponentId> set) {
  for (const auto& c : set) replace(c);
}

void PatchedModelView::revert(ComponentId c) {
  if (!replaced_.erase(c)) return;
  copy_slice(component_slice(work_.config, c), *into_, work_);
}

void PatchedModelView::clear() {
  while (!replaced_.empty()) revert(*replaced_.begin());
}

PatchedModelView replace_params(const ModelParams& base, const ModelParams& sft, std::span<const ComponentId> set) {
  PatchedModelView view(base, sft);
  view.replace(set);
  return view;
}

GapFilteredSet filter_by_gap(const ModelParams& base, const ModelParams& sft,
                             std::span<const std::vector<int>> inputs, const AnchorSpec& spec, double floor,
                             int threads) {
  require_same_config(base, sft, "filter_by_gap");
  if (!(floor >= 0.0)) throw std::invalid_argument("gap floor must be >= 0");
  std::vector<GapInput> all(inputs.size());
  parallel_for(inputs.size(), threads, [&](std::size_t i) {
    GapInput g;
    g.tokens = inputs[i];
    g.f_base = anchor_utility(base, g.tokens, spec);
    g.f_sft = anchor_utility(sft, g.tokens, spec);
    g.gap = g.f_sft - g.f_base;
    all[i] = std::move(g);
  });
  GapFilteredSet out;
  out.floor = floor;
  for (auto& g : all) {
    if (std::abs(g.gap) >= floor && g.gap != 0.0) {
      out.inputs.push_back(std::move(g));
    } else {
      ++out.excluded;
    }
  }
  return out;
}

double exact_wp_effect(const ModelParams& base, const ModelParams& sft, std::span<const ComponentId> set,
                       const AnchorSpec& spec, const GapFilteredSet& eval, int threads) {
  require_inputs(eval, "exact_wp_effect");
  const PatchedModelView view = replace_params(base, sft, set);
  std::vector<double> f(eval.inputs.size());
  parallel_for(eval.inputs.size(), threads,
               [&](std::size_t i) { f[i] = anchor_utility(view.params(), eval.inputs[i].tokens, spec); });
  return normalized_mean(eval, f);
}

double exact_wp_effect(const ModelParams& base, const ModelParams& sft, ComponentId c, const AnchorSpec& spec,
                       const GapFilteredSet& eval, int threads) {
  const ComponentId set[] = {c};
  return exact_wp_effect(base, sft, set, spec, eval, threads);
}

ScoreTable wp_sweep(const ModelParams& base, const ModelParams& sft, const AnchorSpec& spec,
                    const GapFilteredSet& eval, std::span<const ComponentId> components, int threads) {
  require_same_config(base, sft, "wp_sweep");
  require_inputs(eval, "wp_sweep");
  const auto comps = all_or(base.config, components);
  std::vector<std::unique_ptr<PatchedModelView>> views(worker_count(comps.size(), threads));
  std::vector<double> score(comps.size());
  parallel_for_workers(comps.size(), threads, [&](std::size_t w, std::size_t k) {
    if (!views[w]) views[w] = std::make_unique<PatchedModelView>(base, sft);
    PatchedModelView& view = *views[w];
    view.replace(comps[k]);
    std::vector<double> f(eval.inputs.size());
    for (std::size_t i = 0; i < eval.inputs.size(); ++i) {
      f[i] = anchor_utility(view.params(), eval.inputs[i].tokens, spec);
    }
    view.revert(comps[k]);
    score[k] = normalized_mean(eval, f);
  });
  ScoreTable t = tagged("E_w", eval);
  for (std::size_t k = 0; k < comps.size(); ++k) t.scores[comps[k]] = score[k];
  return t;
}

// ---- activation side ---------------------------------------------------------

ActivationMap capture_activations(const Trace& trace, std::span<const ComponentId> set) {
  ActivationMap out;
  for (const auto& c : set) {
    validate_component(trace.params().config, c);
    if (c.is_head()) {
      out[c] = trace.head_output(c.layer, c.index);
    } else {
      Tensor a = trace.neuron_activation(c.layer, c.index);
      out[c] = Tensor({a.numel(), 1}, std::vector<float>(a.data().begin(), a.data().end()));
    }
  }
  return out;
}

namespace {

Tensor leading_rows(const Tensor& t, std::size_t rows) {
  if (t.rows() < rows) {
    throw ShapeError("captured activation covers " + std::to_string(t.rows()) + " positions, run has " +
                     std::to_string(rows));
  }
  return Tensor({rows, t.cols()}, std::vector<float>(t.data().begin(), t.data().begin() + static_cast<std::ptrdiff_t>(rows * t.cols())));
}

}  // namespace

ForwardHooks activation_patch_hooks(ActivationMap values) {
  auto shared = std::make_shared<const ActivationMap>(std::move(values));
  ForwardHooks hooks;
  hooks.head_outputs = [shared](int layer, Var o) {
    for (const auto& [c, t] : *shared) {
      if (c.layer != layer || !c.is_head()) continue;
      const std::size_t width = t.cols();
      o = splice_cols(o, static_cast<std::size_t>(c.index) * width, o.tape->constant(leading_rows(t, o.value().rows())));
    }
    return o;
  };
  hooks.hidden = [shared](int layer, Var a) {
    for (const auto& [c, t] : *shared) {
      if (c.layer != layer || c.is_head()) continue;
      a = splice_cols(a, static_cast<std::size_t>(c.index), a.tape->constant(leading_rows(t, a.value().rows())));
    }
    return a;
  };
  return hooks;
}

Trace cross_model_ap_run(const ModelParams& base, const ModelParams& sft, std::span<const int> x, ComponentId c) {
  require_same_config(base, sft, "cross_model_ap_run");
  const ComponentId set[] = {c};
  ForwardOptions o;
  o.hooks = activation_patch_hooks(capture_activations(forward(sft, x), set));
  return forward(base, x, o);
}

Trace residual_patch_run(const ModelParams& base, const ModelParams& sft, std::span<const int> x, int layer) {
  require_same_config(base, sft, "residual_patch_run");
  if (layer < 0 || layer > base.config.n_layers) throw std::out_of_range("residual_patch_run: layer out of range");
  auto donor = std::make_shared<Tensor>(forward(sft, x).residual_value(layer));
  ForwardOptions o;
  o.hooks.residual = [donor, layer](int l, Var z) {
    if (l != layer) return z;
    return z.tape->constant(*donor);
  };
  return forward(base, x, o);
}

RunFn activation_patched_run(const ModelParams& receiver, const ModelParams& donor, std::vector<ComponentId> set) {
  require_same_config(receiver, donor, "activation_patched_run");
  for (const auto& c : set) validate_component(receiver.config, c);
  return [&receiver, &donor, set = std::move(set)](std::span<const int> tokens) {
    ForwardOptions o;
    if (!set.empty()) o.hooks = activation_patch_hooks(capture_activations(forward(donor, tokens), set));
    return forward(receiver, tokens, o);
  };
}

double activation_effect(const ModelParams& base, const ModelParams& sft, ComponentId c, const AnchorSpec& spec,
                         const GapFilteredSet& eval, int threads) {
  require_inputs(eval, "activation_effect");
  std::vector<double> f(eval.inputs.size());
  parallel_for(eval.inputs.size(), threads, [&](std::size_t i) {
    f[i] = anchor_utility(cross_model_ap_run(base, sft, eval.inputs[i].tokens, c), spec);
  });
  return normalized_mean(eval, f);
}

ScoreTable ap_sweep(const ModelParams& base, const ModelParams& sft, const AnchorSpec& spec,
                    const GapFilteredSet& eval, std::span<const ComponentId> components, int threads) {
  require_same_config(base, sft, "ap_sweep");
  require_inputs(eval, "ap_sweep");
  const auto comps = all_or(base.config, components);
  // Donor activations are captured once per input and reused for every component.
  std::vector<ActivationMap> donors(eval.inputs.size());
  parallel_for(eval.inputs.size(), threads, [&](std::size_t i) {
    donors[i] = capture_activations(forward(sft, eval.inputs[i].tokens), comps);
  });
  std::vector<double> score(comps.size());
  parallel_for(comps.size(), threads, [&](std::size_t k) {
    std::vector<double> f(eval.inputs.size());
    for (std::size_t i = 0; i < eval.inputs.size(); ++i) {
      ForwardOptions o;
      o.hooks = activation_patch_hooks({{comps[k], donors[i].at(comps[k])}});
      f[i] = anchor_utility(forward(base, eval.inputs[i].tokens, o), spec);
    }
    score[k] = normalized_mean(eval, f);
  });
  ScoreTable t = tagged("E_a", eval);
  for (std::size_t k = 0; k < comps.size(); ++k) t.scores[comps[k]] = score[k];
  return t;
}

// ---- knockout ----------------------------------------------------------------

std::string_view knockout_mode_name(KnockoutMode m) { return m == KnockoutMode::Param ? "param" : "activation"; }

KnockoutMode parse_knockout_mode(std::string_view s) {
  if (s == "param") return KnockoutMode::Param;
  if (s == "activation") return KnockoutMode::Activation;
  throw std::invalid_argument("unknown knockout mode '" + std::string(s) + "' (expected param or activation)");
}

RunFn knockout(const ModelParams& sft, const ModelParams& base, std::span<const ComponentId> set, KnockoutMode mode) {
  require_same_config(sft, base, "knockout");
  if (mode == KnockoutMode::Activation) {
    return activation_patched_run(sft, base, std::vector<ComponentId>(set.begin(), set.end()));
  }
  auto view = std::make_shared<const PatchedModelView>(replace_params(sft, base, set));
  return [view](std::span<const int> tokens) { return forward(view->params(), tokens); };
}

}  // namespace wplab
