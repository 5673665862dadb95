// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/attribution.hpp"

#include <cmath>
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

// per_input[i][k] / G(x_i), averaged over i in input order.
ScoreTable reduce(std::string metric, const GapFilteredSet& eval, const std::vector<ComponentId>& comps,
                  const std::vector<std::vector<double>>& per_input) {
  ScoreTable t = tagged(std::move(metric), eval);
  for (std::size_t k = 0; k < comps.size(); ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < eval.inputs.size(); ++i) acc += per_input[i][k] / eval.inputs[i].gap;
    t.scores[comps[k]] = acc / static_cast<double>(eval.inputs.size());
  }
  return t;
}

}  // namespace

ModelParams param_delta(const ModelParams& base, const ModelParams& sft) {
  require_same_config(base, sft, "param_delta");
  ModelParams out = sft;
  std::vector<const Tensor*> b;
  base.for_each_tensor([&](const std::string&, const Tensor& t) { b.push_back(&t); });
  std::size_t i = 0;
  out.for_each_tensor([&](const std::string&, Tensor& t) {
    const Tensor& bt = *b[i++];
    for (std::size_t k = 0; k < t.numel(); ++k) t[k] -= bt[k];
  });
  return out;
}

ModelParams interpolate(const ModelParams& base, const ModelParams& delta, double eps) {
  require_same_config(base, delta, "interpolate");
  ModelParams out = base;
  std::vector<const Tensor*> d;
  delta.for_each_tensor([&](const std::string&, const Tensor& t) { d.push_back(&t); });
  std::size_t i = 0;
  out.for_each_tensor([&](const std::string&, Tensor& t) {
    const Tensor& dt = *d[i++];
    for (std::size_t k = 0; k < t.numel(); ++k) {
      t[k] = static_cast<float>(static_cast<double>(t[k]) + eps * static_cast<double>(dt[k]));
    }
  });
  return out;
}

ModelParams anchor_param_gradient(const ModelParams& model, std::span<const int> x, const AnchorSpec& spec) {
  Trace tr = forward(model, x, ForwardOptions::with_grad(GradMode::kParameters));
  Var f = anchor_utility_var(tr, spec);
  const auto g = tr.tape().backward(f);
  ModelParams out = zeros_like(model.config);
  std::size_t i = 0;
  out.for_each_tensor([&](const std::string&, Tensor& t) { t = g.get(tr.param_vars()[i++]); });
  return out;
}

double head_attr_aggregate(const ModelParams& grads, const ModelParams& delta, int layer, int head) {
  return slice_contract(component_slice(delta.config, ComponentId::head(layer, head)), grads, delta);
}

double neuron_attr_aggregate(const ModelParams& grads, const ModelParams& delta, int layer, int j) {
  return slice_contract(component_slice(delta.config, ComponentId::neuron(layer, j)), grads, delta);
}

double component_attr(const ModelParams& grads, const ModelParams& delta, ComponentId c) {
  return c.is_head() ? head_attr_aggregate(grads, delta, c.layer, c.index)
                     : neuron_attr_aggregate(grads, delta, c.layer, c.index);
}

ScoreTable weight_attr_sweep(const ModelParams& base, const ModelParams& delta, const AnchorSpec& spec,
                             const GapFilteredSet& eval, std::span<const ComponentId> components, int threads) {
  require_same_config(base, delta, "weight_attr_sweep");
  require_inputs(eval, "weight_attr_sweep");
  const auto comps = all_or(base.config, components);
  std::vector<std::vector<double>> per_input(eval.inputs.size());
  parallel_for(eval.inputs.size(), threads, [&](std::size_t i) {
    const ModelParams g = anchor_param_gradient(base, eval.inputs[i].tokens, spec);
    per_input[i].reserve(comps.size());
    for (const auto& c : comps) per_input[i].push_back(component_attr(g, delta, c));
  });
  ScoreTable t = reduce("Attr_wt", eval, comps, per_input);
  t.check_finite();
  return t;
}

double weight_attr(const ModelParams& base, const ModelParams& delta, const AnchorSpec& spec,
                   const GapFilteredSet& eval, ComponentId c, int threads) {
  const ComponentId one[] = {c};
  return weight_attr_sweep(base, delta, spec, eval, one, threads).at(c);
}

ScoreTable activation_attr_sweep(const ModelParams& base, const ModelParams& sft, const AnchorSpec& spec,
                                 const GapFilteredSet& eval, std::span<const ComponentId> components,
                                 int threads) {
  require_same_config(base, sft, "activation_attr_sweep");
  require_inputs(eval, "activation_attr_sweep");
  const auto comps = all_or(base.config, components);
  const auto dk = static_cast<std::size_t>(base.config.head_dim());
  std::vector<std::vector<double>> per_input(eval.inputs.size());
  parallel_for(eval.inputs.size(), threads, [&](std::size_t i) {
    const auto& x = eval.inputs[i].tokens;
    Trace b = forward(base, x, ForwardOptions::with_grad(GradMode::kActivations));
    const Trace s = forward(sft, x);
    const auto g = b.tape().backward(anchor_utility_var(b, spec));
    per_input[i].reserve(comps.size());
    for (const auto& c : comps) {
      const auto& lb = b.layer(c.layer);
      const auto& ls = s.layer(c.layer);
      double acc = 0.0;
      if (c.is_head()) {
        const Tensor gz = g.get(lb.head_outputs);
        const Tensor& zb = lb.head_outputs.value();
        const Tensor& zs = ls.head_outputs.value();
        const std::size_t c0 = static_cast<std::size_t>(c.index) * dk;
        for (std::size_t r = 0; r < gz.rows(); ++r) {
          for (std::size_t k = c0; k < c0 + dk; ++k) {
            acc += (static_cast<double>(zs(r, k)) - zb(r, k)) * gz(r, k);
          }
        }
      } else {
        const Tensor gz = g.get(lb.hidden);
        const Tensor& zb = lb.hidden.value();
        const Tensor& zs = ls.hidden.value();
        const auto j = static_cast<std::size_t>(c.index);
        for (std::size_t r = 0; r < gz.rows(); ++r) acc += (static_cast<double>(zs(r, j)) - zb(r, j)) * gz(r, j);
      }
      per_input[i].push_back(acc);
    }
  });
  ScoreTable t = reduce("Attr_act", eval, comps, per_input);
  t.check_finite();
  return t;
}

double activation_attr(const ModelParams& base, const ModelParams& sft, const AnchorSpec& spec,
                       const GapFilteredSet& eval, ComponentId c, int threads) {
  const ComponentId one[] = {c};
  return activation_attr_sweep(base, sft, spec, eval, one, threads).at(c);
}

std::vector<DriftRow> drift_profile(const ModelParams& base, const ModelParams& delta) {
  require_same_config(base, delta, "drift_profile");
  std::vector<DriftRow> rows;
  for (int l = 0; l < base.config.n_layers; ++l) {
    DriftRow row;
    row.layer = l;
    for (std::size_t k = 0; k < kDriftTensors.size(); ++k) {
      const Tensor& b = layer_tensor(base, l, kDriftTensors[k]);
      const Tensor& d = layer_tensor(delta, l, kDriftTensors[k]);
      double nb = 0.0, nd = 0.0;
      for (std::size_t i = 0; i < b.numel(); ++i) {
        nb += static_cast<double>(b[i]) * b[i];
        nd += static_cast<double>(d[i]) * d[i];
      }
      if (nb == 0.0) {
        throw std::domain_error("drift_profile: layers." + std::to_string(l) + "." +
                                std::string(layer_tensor_suffix(kDriftTensors[k])) + " has zero norm in the base");
      }
      row.relative[k] = std::sqrt(nd) / std::sqrt(nb);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace wplab
