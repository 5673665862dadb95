// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

#include "wplab/attribution.hpp"
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

Var target_input(const Trace& trace, ComponentId c) {
  const auto& lt = trace.layer(c.layer);
  return c.is_head() ? lt.attn_input : lt.mlp_input;
}

}  // namespace

// ---- need and supply ---------------------------------------------------------

NeedDirection need_direction(const ModelParams& base, std::span<const int> x, ComponentId target,
                             const AnchorSpec& spec) {
  validate_component(base.config, target);
  ForwardOptions o = ForwardOptions::with_grad(GradMode::kActivations);
  o.isolate_input = target;
  Trace tr = forward(base, x, o);
  NeedDirection out;
  out.target = target;
  const auto iso = tr.isolated_input();
  if (!iso) throw std::logic_error("need_direction: forward did not isolate the target input");
  out.g_need = tr.tape().backward(anchor_utility_var(tr, spec)).get(*iso);
  out.reaches_readout = std::any_of(out.g_need.data().begin(), out.g_need.data().end(),
                                    [](float v) { return v != 0.0f; });
  return out;
}

double need_utility(const Trace& trace, const NeedDirection& need) {
  const Tensor& psi = target_input(trace, need.target).value();
  if (psi.shape() != need.g_need.shape()) throw ShapeError("need_utility: input and need direction differ in shape");
  double acc = 0.0;
  for (std::size_t i = 0; i < psi.numel(); ++i) acc += static_cast<double>(psi[i]) * need.g_need[i];
  return acc;
}

double need_utility(const ModelParams& model, std::span<const int> x, const NeedDirection& need) {
  return need_utility(forward(model, x), need);
}

namespace {

ModelParams need_gradient_on(Trace& tr, const NeedDirection& need) {
  Var psi = target_input(tr, need.target);
  const auto g = tr.tape().backward(dot(psi, tr.tape().constant(need.g_need)));
  ModelParams out = zeros_like(tr.params().config);
  std::size_t i = 0;
  out.for_each_tensor([&](const std::string&, Tensor& t) { t = g.get(tr.param_vars()[i++]); });
  return out;
}

}  // namespace

ModelParams need_param_gradient(const ModelParams& base, std::span<const int> x, const NeedDirection& need) {
  Trace tr = forward(base, x, ForwardOptions::with_grad(GradMode::kParameters));
  return need_gradient_on(tr, need);
}

double weight_support(const ModelParams& base, const ModelParams& delta, std::span<const int> x,
                      const NeedDirection& need, ComponentId supplier) {
  require_same_config(base, delta, "weight_support");
  return component_attr(need_param_gradient(base, x, need), delta, supplier);
}

LinkTable link_strength(const ModelParams& base, const ModelParams& delta, const AnchorSpec& spec,
                        const GapFilteredSet& eval, std::span<const ComponentId> targets,
                        std::span<const ComponentId> suppliers, int threads) {
  require_same_config(base, delta, "link_strength");
  if (eval.inputs.empty()) {
    throw std::invalid_argument("link_strength: no input passes the gap floor (" + std::to_string(eval.excluded) +
                                " excluded)");
  }
  for (const auto& t : targets) validate_component(base.config, t);
  const auto sups = all_or(base.config, suppliers);
  const std::size_t n = eval.inputs.size();
  // support[i][t][s]
  std::vector<std::vector<std::vector<double>>> support(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& x = eval.inputs[i].tokens;
    Trace tr = forward(base, x, ForwardOptions::with_grad(GradMode::kParameters));
    support[i].resize(targets.size());
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const NeedDirection need = need_direction(base, x, targets[t], spec);
      const ModelParams g = need_gradient_on(tr, need);
      support[i][t].reserve(sups.size());
      for (const auto& s : sups) support[i][t].push_back(component_attr(g, delta, s));
    }
  });
  LinkTable out;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    ScoreTable row;
    row.metric = "E_link";
    row.meta["target"] = targets[t].str();
    row.meta["normalization"] = "anchor_gap";
    row.meta["gap_floor"] = std::to_string(eval.floor);
    row.meta["inputs"] = std::to_string(n);
    row.meta["excluded"] = std::to_string(eval.excluded);
    for (std::size_t s = 0; s < sups.size(); ++s) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += support[i][t][s] / eval.inputs[i].gap;
      row.scores[sups[s]] = acc / static_cast<double>(n);
    }
    row.check_finite();
    out[targets[t]] = std::move(row);
  }
  return out;
}

bool validate_source(ComponentId c, const ScoreTable& e_w, const ScoreTable& link_row, const Thresholds& t) {
  const auto w = e_w.scores.find(c);
  const auto l = link_row.scores.find(c);
  if (w == e_w.scores.end() || l == link_row.scores.end()) return false;
  return w->second > t.tau_w && l->second > t.tau_link;
}

// ---- downstream execution ----------------------------------------------------

std::string_view downstream_mode_name(DownstreamMode m) { return m == DownstreamMode::Kl ? "kl" : "proj"; }

DownstreamMode parse_downstream_mode(std::string_view s) {
  if (s == "kl") return DownstreamMode::Kl;
  if (s == "proj") return DownstreamMode::Proj;
  throw std::invalid_argument("unknown downstream mode '" + std::string(s) + "' (expected kl or proj)");
}

namespace {

std::vector<double> softmax_row(std::span<const float> logits) {
  double m = -std::numeric_limits<double>::infinity();
  for (float v : logits) m = std::max(m, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += p[i] = std::exp(static_cast<double>(logits[i]) - m);
  for (auto& v : p) v /= z;
  return p;
}

void validate_readout(const DownstreamReadout& r, const ModelConfig& cfg) {
  if (r.steps < 1) throw std::invalid_argument("downstream readout needs at least one step");
  if (r.mode != DownstreamMode::Proj) return;
  if (r.v_out.numel() != static_cast<std::size_t>(cfg.d_model)) {
    throw ShapeError("downstream readout: v_out must have d_model entries");
  }
  double n = 0.0;
  for (float v : r.v_out.data()) n += static_cast<double>(v) * v;
  if (!(n > 0.0) || !std::isfinite(n)) throw std::domain_error("downstream readout: v_out has zero or non-finite norm");
}

}  // namespace

double downstream_utility(const Trace& trace, const DownstreamItem& item, const DownstreamReadout& readout) {
  const auto steps = static_cast<std::size_t>(readout.steps);
  const std::size_t first = item.prompt_len - 1;
  if (trace.length() < first + steps) throw ShapeError("downstream_utility: trace shorter than the scored positions");
  double acc = 0.0;
  if (readout.mode == DownstreamMode::Kl) {
    if (item.p_sft.size() != steps) throw std::invalid_argument("downstream_utility: item has no reference distributions");
    const Tensor& logits = trace.logits().value();
    for (std::size_t k = 0; k < steps; ++k) {
      const auto q = softmax_row(logits.row(first + k));
      const auto& p = item.p_sft[k];
      double kl = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * (std::log(p[i] + kKlGuard) - std::log(q[i] + kKlGuard));
      acc -= kl;
    }
  } else {
    const Tensor& z = trace.residual_value(trace.n_layers());
    double vv = 0.0;
    for (float v : readout.v_out.data()) vv += static_cast<double>(v) * v;
    for (std::size_t k = 0; k < steps; ++k) {
      const auto r = z.row(first + k);
      double zz = 0.0, zv = 0.0;
      for (std::size_t i = 0; i < r.size(); ++i) {
        zz += static_cast<double>(r[i]) * r[i];
        zv += static_cast<double>(r[i]) * readout.v_out[i];
      }
      if (zz == 0.0) throw std::domain_error("downstream_utility: zero-norm final residual");
      acc += zv / std::sqrt(zz * vv);
    }
  }
  return acc / static_cast<double>(steps);
}

DownstreamEval prepare_downstream(const ModelParams& base, const ModelParams& sft,
                                  std::span<const std::vector<int>> prompts, DownstreamReadout readout,
                                  double floor, int threads) {
  require_same_config(base, sft, "prepare_downstream");
  validate_readout(readout, base.config);
  if (!(floor >= 0.0)) throw std::invalid_argument("downstream floor must be >= 0");
  const auto steps = static_cast<std::size_t>(readout.steps);
  std::vector<DownstreamItem> all(prompts.size());
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    const auto& prompt = prompts[i];
    if (prompt.empty()) throw std::invalid_argument("prepare_downstream: empty prompt");
    if (prompt.size() + steps - 1 > static_cast<std::size_t>(base.config.max_seq_len)) {
      throw std::invalid_argument("prepare_downstream: prompt plus continuation exceeds max_seq_len");
    }
    DownstreamItem item;
    item.prompt_len = prompt.size();
    item.sequence = generate_greedy(sft, prompt, readout.steps - 1);
    const Trace ts = forward(sft, item.sequence);
    if (readout.mode == DownstreamMode::Kl) {
      const Tensor& logits = ts.logits().value();
      for (std::size_t k = 0; k < steps; ++k) item.p_sft.push_back(softmax_row(logits.row(item.prompt_len - 1 + k)));
    }
    item.f_sft = downstream_utility(ts, item, readout);
    item.f_base = downstream_utility(forward(base, item.sequence), item, readout);
    all[i] = std::move(item);
  });
  DownstreamEval out;
  out.readout = std::move(readout);
  for (auto& item : all) {
    const double den = item.f_sft - item.f_base;
    if (std::abs(den) > floor && den != 0.0) {
      out.items.push_back(std::move(item));
    } else {
      ++out.excluded;
    }
  }
  return out;
}

namespace {

double normalized_down(const DownstreamEval& eval, const std::vector<double>& f) {
  double acc = 0.0;
  for (std::size_t i = 0; i < eval.items.size(); ++i) {
    const auto& it = eval.items[i];
    acc += (f[i] - it.f_base) / (it.f_sft - it.f_base);
  }
  return acc / static_cast<double>(eval.items.size());
}

void require_items(const DownstreamEval& eval, const char* what) {
  if (eval.items.empty()) {
    throw std::domain_error(std::string(what) + ": every prompt has a degenerate denominator (" +
                            std::to_string(eval.excluded) + " excluded)");
  }
}

}  // namespace

double downstream_effect(const RunFn& run, const DownstreamEval& eval, int threads) {
  require_items(eval, "downstream_effect");
  std::vector<double> f(eval.items.size());
  parallel_for(eval.items.size(), threads, [&](std::size_t i) {
    f[i] = downstream_utility(run(eval.items[i].sequence), eval.items[i], eval.readout);
  });
  return normalized_down(eval, f);
}

RunFn restore_component(const ModelParams& base, const ModelParams& sft, ComponentId c, KnockoutMode side) {
  const ComponentId one[] = {c};
  return knockout(base, sft, one, side);
}

ScoreTable downstream_sweep(const ModelParams& base, const ModelParams& sft, const DownstreamEval& eval,
                            KnockoutMode side, std::span<const ComponentId> components, int threads) {
  require_same_config(base, sft, "downstream_sweep");
  require_items(eval, "downstream_sweep");
  const auto comps = all_or(base.config, components);
  std::vector<double> score(comps.size());
  if (side == KnockoutMode::Param) {
    std::vector<std::unique_ptr<PatchedModelView>> views(worker_count(comps.size(), threads));
    parallel_for_workers(comps.size(), threads, [&](std::size_t w, std::size_t k) {
      if (!views[w]) views[w] = std::make_unique<PatchedModelView>(base, sft);
      PatchedModelView& view = *views[w];
      view.replace(comps[k]);
      std::vector<double> f(eval.items.size());
      for (std::size_t i = 0; i < eval.items.size(); ++i) {
        f[i] = downstream_utility(forward(view.params(), eval.items[i].sequence), eval.items[i], eval.readout);
      }
      view.revert(comps[k]);
      score[k] = normalized_down(eval, f);
    });
  } else {
    std::vector<ActivationMap> donors(eval.items.size());
    parallel_for(eval.items.size(), threads, [&](std::size_t i) {
      donors[i] = capture_activations(forward(sft, eval.items[i].sequence), comps);
    });
    parallel_for(comps.size(), threads, [&](std::size_t k) {
      std::vector<double> f(eval.items.size());
      for (std::size_t i = 0; i < eval.items.size(); ++i) {
        ForwardOptions o;
        o.hooks = activation_patch_hooks({{comps[k], donors[i].at(comps[k])}});
        f[i] = downstream_utility(forward(base, eval.items[i].sequence, o), eval.items[i], eval.readout);
      }
      score[k] = normalized_down(eval, f);
    });
  }
  ScoreTable t;
  t.metric = "E_down";
  t.meta["mode"] = std::string(downstream_mode_name(eval.readout.mode));
  t.meta["intervention"] = std::string(knockout_mode_name(side));
  t.meta["steps"] = std::to_string(eval.readout.steps);
  t.meta["prompts"] = std::to_string(eval.items.size());
  t.meta["excluded"] = std::to_string(eval.excluded);
  for (std::size_t k = 0; k < comps.size(); ++k) t.scores[comps[k]] = score[k];
  t.check_finite();
  return t;
}

// ---- circuit -----------------------------------------------------------------

std::set<ComponentId> CircuitReport::circuit() const {
  std::set<ComponentId> out = sources;
  out.insert(aggregators.begin(), aggregators.end());
  out.insert(executors.begin(), executors.end());
  return out;
}

CircuitReport assemble_circuit(const ScoreTable& e_a, const ScoreTable& e_w, const LinkTable& links,
                               const ScoreTable& e_down, const Thresholds& t) {
  CircuitReport r;
  r.thresholds = t;
  for (const auto& [c, s] : e_a.scores) {
    if (s > t.tau_a) r.aggregators.insert(c);
  }
  for (const auto& target : r.aggregators) {
    const auto row = links.find(target);
    if (row == links.end()) {
      throw std::invalid_argument("assemble_circuit: no link row for aggregation target " + target.str());
    }
    for (const auto& [c, s] : row->second.scores) {
      if (validate_source(c, e_w, row->second, t)) {
        r.sources.insert(c);
        r.links.push_back({target, c, s});
      }
    }
  }
  for (const auto& [c, s] : e_down.scores) {
    if (s > t.tau_down) r.executors.insert(c);
  }
  const auto all = r.circuit();
  for (const auto* part : {&r.sources, &r.aggregators, &r.executors}) {
    for (const auto& c : *part) {
      if (!all.contains(c)) throw std::logic_error("circuit union identity violated");
    }
  }
  for (const auto& c : all) {
    if (!r.sources.contains(c) && !r.aggregators.contains(c) && !r.executors.contains(c)) {
      throw std::logic_error("circuit union identity violated");
    }
  }
  return r;
}

// ---- attention to instruction ------------------------------------------------

double attention_instruction_ratio(const ModelParams& model, std::span<const int> x,
                                   std::span<const std::size_t> instruction_positions,
                                   std::span<const ComponentId> heads) {
  if (instruction_positions.empty()) throw std::invalid_argument("attention_instruction_ratio: empty instruction span");
  if (heads.empty()) throw std::invalid_argument("attention_instruction_ratio: no heads");
  std::vector<bool> is_instr(x.size(), false);
  for (auto p : instruction_positions) {
    if (p >= x.size()) throw std::out_of_range("attention_instruction_ratio: instruction position past the input");
    is_instr[p] = true;
  }
  if (std::all_of(is_instr.begin(), is_instr.end(), [](bool b) { return b; })) {
    throw std::invalid_argument("attention_instruction_ratio: instruction span covers the whole input");
  }
  for (const auto& h : heads) {
    validate_component(model.config, h);
    if (!h.is_head()) throw std::invalid_argument("attention_instruction_ratio: " + h.str() + " is not a head");
  }
  ForwardOptions o;
  o.keep_attention = true;
  const Trace tr = forward(model, x, o);
  double instr_mass = 0.0, rest_mass = 0.0;
  std::size_t samples = 0;
  for (const auto& h : heads) {
    const Tensor& probs = tr.layer(h.layer).attn_probs.at(static_cast<std::size_t>(h.index));
    for (std::size_t q = 0; q < x.size(); ++q) {
      double a = 0.0, b = 0.0;
      std::size_t na = 0, nb = 0;
      for (std::size_t k = 0; k <= q; ++k) {
        if (is_instr[k]) {
          a += probs(q, k);
          ++na;
        } else {
          b += probs(q, k);
          ++nb;
        }
      }
      if (na == 0 || nb == 0) continue;
      instr_mass += a / static_cast<double>(na);
      rest_mass += b / static_cast<double>(nb);
      ++samples;
    }
  }
  if (samples == 0) throw std::invalid_argument("attention_instruction_ratio: no query position sees both regions");
  if (rest_mass <= 0.0) return kAttentionRatioCap;
  return std::min(kAttentionRatioCap, instr_mass / rest_mass);
}

}  // namespace wplab
