// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "fixtures.hpp"
#include "wplab/attribution.hpp"
#include "wplab/hierarchy.hpp"

using namespace wplab;
using namespace wplab::testing;

namespace {

using ForwardOptionsD = BasicForwardOptions<double>;

double anchor_cosine_d(const ModelParamsD& m, const std::vector<int>& x, const AnchorSpec& spec,
                       const ForwardOptionsD& o) {
  const TraceD tr = forward(m, x, o);
  const auto z = tr.residual_value(spec.layer).row(x.size() - 1);
  double zz = 0, zv = 0, vv = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    zz += z[i] * z[i];
    zv += z[i] * spec.v[i];
    vv += static_cast<double>(spec.v[i]) * spec.v[i];
  }
  return zv / std::sqrt(zz * vv);
}

TensorD cols_of(const TensorD& w, std::size_t start, std::size_t count) {
  TensorD out({w.rows(), count});
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < count; ++c) out(r, c) = w(r, start + c);
  }
  return out;
}

// F_a with only the target's own computation fed Psi + t * dir; everything
// else sees the unperturbed input.
double f_through_target(const ModelParamsD& m, const std::vector<int>& x, const AnchorSpec& spec, ComponentId c,
                        const TensorD& dir, double t) {
  const auto& cfg = m.config;
  const TraceD plain = forward(m, x);
  const auto& lt = plain.layer(c.layer);
  TensorD psi = c.is_head() ? lt.attn_input.value() : lt.mlp_input.value();
  for (std::size_t k = 0; k < psi.numel(); ++k) psi[k] += t * dir[k];
  const auto& lp = m.layers[static_cast<std::size_t>(c.layer)];
  ForwardOptionsD o;
  if (c.is_head()) {
    const auto dk = static_cast<std::size_t>(cfg.head_dim());
    const auto h = static_cast<std::size_t>(c.index);
    const auto g = static_cast<std::size_t>(cfg.kv_head_of(c.index));
    TapeD tape;
    const VarD p = tape.constant(psi);
    const VarD q = rope(matmul(p, tape.constant(cols_of(lp.wq, h * dk, dk))), dk, cfg.rope_base);
    const VarD k = rope(matmul(p, tape.constant(cols_of(lp.wk, g * dk, dk))), dk, cfg.rope_base);
    const VarD v = matmul(p, tape.constant(cols_of(lp.wv, g * dk, dk)));
    const TensorD mask = causal_mask<double>(x.size());
    const VarD probs = softmax_rows(scale(matmul_bt(q, k), 1.0 / std::sqrt(static_cast<double>(dk))), &mask);
    const TensorD head = matmul(probs, v).value();
    o.hooks.head_outputs = [head, h, dk, layer = c.layer](int l, VarD out) {
      return l == layer ? splice_cols(out, h * dk, out.tape->constant(head)) : out;
    };
  } else {
    const auto j = static_cast<std::size_t>(c.index);
    TensorD a({x.size(), 1});
    for (std::size_t r = 0; r < x.size(); ++r) {
      double gate = 0.0, up = 0.0;
      for (std::size_t i = 0; i < psi.cols(); ++i) {
        gate += psi(r, i) * lp.w_gate(i, j);
        up += psi(r, i) * lp.w_up(i, j);
      }
      a(r, 0) = gate / (1.0 + std::exp(-gate)) * up;
    }
    o.hooks.hidden = [a, j, layer = c.layer](int l, VarD out) {
      return l == layer ? splice_cols(out, j, out.tape->constant(a)) : out;
    };
  }
  return anchor_cosine_d(m, x, spec, o);
}

TensorD random_like(const Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  TensorD out(t.shape());
  for (auto& v : out.data()) v = nd(rng);
  return out;
}

double need_fd(const ModelParamsD& m, const std::vector<int>& x, const AnchorSpec& spec, ComponentId c,
               const TensorD& dir, double h) {
  return (f_through_target(m, x, spec, c, dir, h) - f_through_target(m, x, spec, c, dir, -h)) / (2.0 * h);
}

struct Chain {
  ModelParams base;
  ModelParams sft;
  std::vector<std::vector<int>> inputs;
  AnchorSpec spec;
  ComponentId target = ComponentId::head(1, 2);
  ComponentId source = ComponentId::neuron(0, 5);
};

Chain supplied_chain() {
  Chain ch;
  const auto cfg = small_config();
  ch.base = lively_model(cfg, 21);
  ch.inputs = random_inputs(cfg, 40, 6, 8);
  ch.spec = make_anchor_spec(random_direction(static_cast<std::size_t>(cfg.d_model), 4), 2);
  ch.sft = plant_supplier(ch.base, ch.inputs, ch.spec, ch.target, ch.source, 0.5);
  return ch;
}

}  // namespace

TEST_CASE("need direction") {
  const auto cfg = small_config();
  const auto base = lively_model(cfg, 11);
  const auto base_d = base.cast<double>();
  const auto x = random_inputs(cfg, 1, 7, 2)[0];
  const auto spec = make_anchor_spec(random_direction(static_cast<std::size_t>(cfg.d_model), 9), 2);

  for (const auto& c : {ComponentId::neuron(0, 3), ComponentId::head(0, 1), ComponentId::head(1, 3),
                        ComponentId::neuron(1, 6)}) {
    CAPTURE(c.str());
    const auto need = need_direction(base, x, c, spec);
    CHECK(need.target == c);
    CHECK(need.reaches_readout);
    REQUIRE(need.g_need.shape() == Shape{x.size(), static_cast<std::size_t>(cfg.d_model)});
    const TensorD dir = random_like(need.g_need, 31);
    double analytic = 0.0;
    for (std::size_t k = 0; k < dir.numel(); ++k) analytic += need.g_need[k] * dir[k];
    CHECK(analytic == doctest::Approx(need_fd(base_d, x, spec, c, dir, 1e-5)).epsilon(1e-4));
  }

  SUBCASE("targets past the readout have no need") {
    const auto early = make_anchor_spec(spec.v, 1);
    const auto need = need_direction(base, x, ComponentId::head(1, 0), early);
    CHECK_FALSE(need.reaches_readout);
    for (float v : need.g_need.data()) CHECK(v == 0.0f);
  }
  SUBCASE("deterministic") {
    CHECK(need_direction(base, x, ComponentId::head(1, 1), spec).g_need ==
          need_direction(base, x, ComponentId::head(1, 1), spec).g_need);
  }
}

TEST_CASE("need utility") {
  const auto cfg = small_config();
  const auto base = lively_model(cfg, 11);
  const auto x = random_inputs(cfg, 1, 7, 2)[0];
  const auto spec = make_anchor_spec(random_direction(static_cast<std::size_t>(cfg.d_model), 9), 2);
  const auto c = ComponentId::head(1, 2);
  const auto need = need_direction(base, x, c, spec);

  const auto psi = component_interface(forward(base, x), c).input;
  double oracle = 0.0;
  for (std::size_t k = 0; k < psi.numel(); ++k) oracle += static_cast<double>(psi[k]) * need.g_need[k];
  CHECK(need_utility(base, x, need) == doctest::Approx(oracle).epsilon(1e-12));

  NeedDirection zero = need;
  for (auto& v : zero.g_need.data()) v = 0.0f;
  CHECK(need_utility(base, x, zero) == 0.0);

  SUBCASE("change under a small edit matches the full parameter contraction") {
    PlantSpec ps;
    ps.seed = 4;
    ps.entries = {{ComponentId::neuron(0, 1), 0.3}, {ComponentId::head(0, 3), 0.3}};
    const auto delta = param_delta(base, plant_component_edits(base, ps));
    double predicted = 0.0;
    {
      const auto g = need_param_gradient(base, x, need);
      std::vector<const Tensor*> ds;
      delta.for_each_tensor([&](const std::string&, const Tensor& t) { ds.push_back(&t); });
      std::size_t i = 0;
      g.for_each_tensor([&](const std::string&, const Tensor& t) {
        for (std::size_t k = 0; k < t.numel(); ++k) predicted += static_cast<double>(t[k]) * (*ds[i])[k];
        ++i;
      });
    }
    REQUIRE(std::abs(predicted) > 1e-3);
    const double f0 = need_utility(base, x, need);
    double prev_err = std::numeric_limits<double>::infinity();
    for (double eps : {4e-2, 2e-2, 1e-2}) {
      const double measured = (need_utility(interpolate(base, delta, eps), x, need) - f0) / eps;
      const double err = std::abs(measured - predicted);
      CHECK(err < prev_err);
      prev_err = err;
    }
    CHECK(prev_err < 0.05 * std::abs(predicted));
  }
}

TEST_CASE("weight support") {
  const auto p = planted_pair({ComponentId::neuron(0, 2), ComponentId::head(0, 1), ComponentId::neuron(1, 4)});
  const auto delta = param_delta(p.base, p.sft);
  const auto& x = p.inputs[0];
  const auto target = ComponentId::neuron(1, 0);
  const auto need = need_direction(p.base, x, target, p.spec);
  const auto g = need_param_gradient(p.base, x, need);

  SUBCASE("matches the loop contraction") {
    for (const auto& s : {ComponentId::neuron(0, 2), ComponentId::head(0, 1)}) {
      const auto& gl = g.layers[static_cast<std::size_t>(s.layer)];
      const auto& dl = delta.layers[static_cast<std::size_t>(s.layer)];
      double oracle = 0.0;
      if (s.is_head()) {
        const auto dk = static_cast<std::size_t>(p.base.config.head_dim());
        for (std::size_t k = s.index * dk; k < (s.index + 1) * dk; ++k) {
          for (std::size_t r = 0; r < gl.wq.rows(); ++r) oracle += static_cast<double>(gl.wq(r, k)) * dl.wq(r, k);
          for (std::size_t col = 0; col < gl.wo.cols(); ++col) oracle += static_cast<double>(gl.wo(k, col)) * dl.wo(k, col);
        }
      } else {
        const auto j = static_cast<std::size_t>(s.index);
        for (std::size_t r = 0; r < gl.w_gate.rows(); ++r) {
          oracle += static_cast<double>(gl.w_gate(r, j)) * dl.w_gate(r, j) + static_cast<double>(gl.w_up(r, j)) * dl.w_up(r, j);
        }
        for (std::size_t col = 0; col < gl.w_down.cols(); ++col) oracle += static_cast<double>(gl.w_down(j, col)) * dl.w_down(j, col);
      }
      CHECK(oracle != 0.0);
      CHECK(weight_support(p.base, delta, x, need, s) == doctest::Approx(oracle).epsilon(1e-6));
    }
  }
  SUBCASE("matches central differences of the need utility") {
    const auto s = ComponentId::neuron(0, 2);
    const double h = 1e-4;
    auto shifted = [&](double t) {
      ModelParamsD m = p.base.cast<double>();
      const auto dd = delta.cast<double>();
      for (const auto& r : component_slice(p.base.config, s).regions) {
        auto& dst = layer_tensor(m, r.layer, r.tensor);
        const auto& src = layer_tensor(dd, r.layer, r.tensor);
        r.for_each_index(dst.shape(), [&](std::size_t k) { dst[k] += t * src[k]; });
      }
      const TraceD tr = forward(m, x);
      const auto& psi = tr.layer(target.layer).mlp_input.value();
      double acc = 0.0;
      for (std::size_t k = 0; k < psi.numel(); ++k) acc += psi[k] * need.g_need[k];
      return acc;
    };
    const double fd = (shifted(h) - shifted(-h)) / (2.0 * h);
    CHECK(weight_support(p.base, delta, x, need, s) == doctest::Approx(fd).epsilon(1e-3));
  }
  SUBCASE("zero delta and causal order give zero") {
    CHECK(weight_support(p.base, zeros_like(p.base.config), x, need, ComponentId::neuron(0, 2)) == 0.0);
    CHECK(weight_support(p.base, delta, x, need, ComponentId::neuron(1, 4)) == 0.0);
    const auto head_need = need_direction(p.base, x, ComponentId::head(1, 0), p.spec);
    CHECK(weight_support(p.base, delta, x, head_need, ComponentId::neuron(1, 4)) == 0.0);
    CHECK(weight_support(p.base, delta, x, head_need, ComponentId::head(1, 3)) == 0.0);
  }
}

TEST_CASE("link strength") {
  const auto p = planted_pair({ComponentId::neuron(0, 2), ComponentId::head(0, 1), ComponentId::neuron(1, 4)});
  const auto delta = param_delta(p.base, p.sft);
  const auto eval = filter_by_gap(p.base, p.sft, p.inputs, p.spec);
  REQUIRE(eval.inputs.size() >= 12);
  const std::vector<ComponentId> targets{ComponentId::head(1, 0), ComponentId::neuron(1, 1)};
  const auto links = link_strength(p.base, delta, p.spec, eval, targets);
  REQUIRE(links.size() == 2);
  CHECK(links.at(targets[0]).metric == "E_link");
  CHECK(links.at(targets[0]).size() == component_count(p.base.config));

  SUBCASE("mean of support over gap") {
    for (const auto& t : targets) {
      for (const auto& s : {ComponentId::neuron(0, 2), ComponentId::head(0, 1)}) {
        double acc = 0.0;
        for (const auto& g : eval.inputs) {
          acc += weight_support(p.base, delta, g.tokens, need_direction(p.base, g.tokens, t, p.spec), s) / g.gap;
        }
        CHECK(links.at(t).at(s) == doctest::Approx(acc / static_cast<double>(eval.inputs.size())).epsilon(1e-9));
      }
    }
  }
  SUBCASE("suppliers downstream of the target or without delta score zero") {
    CHECK(links.at(targets[0]).at(ComponentId::neuron(1, 4)) == 0.0);
    CHECK(links.at(targets[1]).at(ComponentId::neuron(1, 4)) == 0.0);
    CHECK(links.at(targets[0]).at(ComponentId::neuron(0, 3)) == 0.0);
  }
  SUBCASE("zero delta gives all-zero links") {
    const auto none = link_strength(p.base, zeros_like(p.base.config), p.spec, eval, targets);
    for (const auto& [t, row] : none) {
      for (const auto& [c, s] : row.scores) CHECK(s == 0.0);
    }
  }
  SUBCASE("order and thread invariance") {
    GapFilteredSet rev = eval;
    std::reverse(rev.inputs.begin(), rev.inputs.end());
    const auto r = link_strength(p.base, delta, p.spec, rev, targets, {}, 3);
    for (const auto& t : targets) {
      for (const auto& [c, s] : links.at(t).scores) CHECK(r.at(t).at(c) == doctest::Approx(s).epsilon(1e-12));
    }
  }
  SUBCASE("empty filtered set is an error") {
    CHECK_THROWS_AS(link_strength(p.base, delta, p.spec, GapFilteredSet{}, targets), std::invalid_argument);
  }
}

TEST_CASE("supplier plant is recovered as the source") {
  const auto ch = supplied_chain();
  const auto eval = filter_by_gap(ch.base, ch.sft, ch.inputs, ch.spec);
  REQUIRE(eval.inputs.size() >= 8);
  const auto delta = param_delta(ch.base, ch.sft);
  const ComponentId targets[] = {ch.target};
  const auto row = link_strength(ch.base, delta, ch.spec, eval, targets).at(ch.target);
  const auto e_w = wp_sweep(ch.base, ch.sft, ch.spec, eval);
  CHECK(row.at(ch.source) > 0.0);
  for (const auto& [c, s] : row.scores) {
    if (c != ch.source) CHECK(row.at(ch.source) > s);
  }
  Thresholds t;
  t.tau_w = 0.5;
  t.tau_link = 0.0;
  for (const auto& c : enumerate_components(ch.base.config)) {
    CHECK(validate_source(c, e_w, row, t) == (c == ch.source));
  }
  t.tau_w = 1.5;
  CHECK_FALSE(validate_source(ch.source, e_w, row, t));
}

TEST_CASE("downstream effect") {
  const auto p = planted_pair({ComponentId::neuron(0, 2), ComponentId::head(0, 1), ComponentId::neuron(1, 4),
                               ComponentId::head(1, 3)});
  const auto cfg = p.base.config;
  const auto prompts = random_inputs(cfg, 10, 5, 17);

  for (const auto mode : {DownstreamMode::Kl, DownstreamMode::Proj}) {
    CAPTURE(downstream_mode_name(mode));
    DownstreamReadout r;
    r.mode = mode;
    if (mode == DownstreamMode::Proj) r.v_out = shift_anchor(p.base, p.sft, prompts, cfg.n_layers).v;
    const auto eval = prepare_downstream(p.base, p.sft, prompts, r);
    REQUIRE(eval.items.size() >= 8);
    CHECK(eval.items[0].sequence.size() == 5 + kDownstreamSteps - 1);

    const auto all = enumerate_components(cfg);
    CHECK(downstream_effect(knockout(p.base, p.sft, all, KnockoutMode::Param), eval) ==
          doctest::Approx(1.0).epsilon(1e-6));
    CHECK(downstream_effect(plain_run(p.base), eval) == 0.0);
    CHECK(downstream_effect(plain_run(p.sft), eval) == doctest::Approx(1.0).epsilon(1e-12));

    const ComponentId probe[] = {ComponentId::neuron(0, 2), ComponentId::head(1, 3), ComponentId::neuron(1, 0)};
    for (const auto side : {KnockoutMode::Param, KnockoutMode::Activation}) {
      const auto table = downstream_sweep(p.base, p.sft, eval, side, probe, 2);
      CHECK(table.metric == "E_down");
      CHECK(table.meta.at("mode") == downstream_mode_name(mode));
      for (const auto& c : probe) {
        CHECK(table.at(c) == doctest::Approx(downstream_effect(restore_component(p.base, p.sft, c, side), eval)).epsilon(1e-9));
      }
    }
  }

  SUBCASE("kl value matches a direct computation") {
    const auto eval = prepare_downstream(p.base, p.sft, prompts, {});
    const auto& item = eval.items[0];
    const auto lb = forward(p.base, item.sequence).logits().value();
    const auto ls = forward(p.sft, item.sequence).logits().value();
    double f = 0.0;
    for (int k = 0; k < kDownstreamSteps; ++k) {
      const auto row = item.prompt_len - 1 + static_cast<std::size_t>(k);
      double mb = -1e300, ms = -1e300;
      for (std::size_t v = 0; v < lb.cols(); ++v) {
        mb = std::max(mb, static_cast<double>(lb(row, v)));
        ms = std::max(ms, static_cast<double>(ls(row, v)));
      }
      double zb = 0.0, zs = 0.0;
      for (std::size_t v = 0; v < lb.cols(); ++v) {
        zb += std::exp(lb(row, v) - mb);
        zs += std::exp(ls(row, v) - ms);
      }
      for (std::size_t v = 0; v < lb.cols(); ++v) {
        const double ps = std::exp(ls(row, v) - ms) / zs, pb = std::exp(lb(row, v) - mb) / zb;
        f -= ps * (std::log(ps + kKlGuard) - std::log(pb + kKlGuard));
      }
    }
    CHECK(item.f_base == doctest::Approx(f / kDownstreamSteps).epsilon(1e-9));
    CHECK(item.f_sft == 0.0);
  }
  SUBCASE("identical models leave nothing to normalize") {
    const auto eval = prepare_downstream(p.base, p.base, prompts, {});
    CHECK(eval.items.empty());
    CHECK(eval.excluded == prompts.size());
    CHECK_THROWS_AS(downstream_effect(plain_run(p.base), eval), std::domain_error);
  }
  SUBCASE("bad readouts") {
    DownstreamReadout r;
    r.mode = DownstreamMode::Proj;
    CHECK_THROWS_AS(prepare_downstream(p.base, p.sft, prompts, r), ShapeError);
    r.v_out = Tensor({static_cast<std::size_t>(cfg.d_model)});
    CHECK_THROWS_AS(prepare_downstream(p.base, p.sft, prompts, r), std::domain_error);
    CHECK(parse_downstream_mode("proj") == DownstreamMode::Proj);
    CHECK_THROWS_AS(parse_downstream_mode("cos"), std::invalid_argument);
  }
}

TEST_CASE("circuit assembly") {
  const auto h10 = ComponentId::head(1, 0), h11 = ComponentId::head(1, 1);
  const auto n01 = ComponentId::neuron(0, 1), n02 = ComponentId::neuron(0, 2), n03 = ComponentId::neuron(0, 3);
  const auto n17 = ComponentId::neuron(1, 7);
  ScoreTable e_a, e_w, e_down;
  e_a.scores = {{h10, 0.6}, {h11, 0.1}, {n01, 0.05}, {n17, 0.3}};
  e_w.scores = {{h10, 0.2}, {h11, 0.0}, {n01, 0.9}, {n02, 0.8}, {n03, 0.1}, {n17, 0.4}};
  e_down.scores = {{n17, 0.7}, {h10, 0.2}, {n01, 0.0}};
  LinkTable links;
  links[h10].scores = {{n01, 0.4}, {n02, -0.2}, {n03, 0.9}};
  links[n17].scores = {{n01, 0.0}, {n02, 0.3}, {h10, 0.5}};
  Thresholds t{0.25, 0.5, 0.0, 0.5};

  const auto r = assemble_circuit(e_a, e_w, links, e_down, t);
  CHECK(r.aggregators == std::set<ComponentId>{h10, n17});
  CHECK(r.sources == std::set<ComponentId>{n01, n02});
  CHECK(r.executors == std::set<ComponentId>{n17});
  CHECK(r.circuit() == std::set<ComponentId>{n01, n02, h10, n17});
  CHECK(r.thresholds == t);
  CHECK(r.links == std::vector<LinkEntry>{{h10, n01, 0.4}, {n17, n02, 0.3}});

  const double inf = std::numeric_limits<double>::infinity();
  const auto none = assemble_circuit(e_a, e_w, links, e_down, {inf, inf, inf, inf});
  CHECK(none.circuit().empty());
  CHECK(none.thresholds.tau_w == inf);

  LinkTable partial;
  partial[h10] = links[h10];
  CHECK_THROWS_AS(assemble_circuit(e_a, e_w, partial, e_down, t), std::invalid_argument);
}

TEST_CASE("attention to instruction") {
  const auto cfg = small_config();
  const std::vector<int> x{3, 5, 9, 1, 2, 7};
  const std::size_t instr[] = {1};
  const ComponentId heads[] = {ComponentId::head(0, 1), ComponentId::head(0, 2)};

  SUBCASE("uniform attention gives one") {
    ModelParams m = lively_model(cfg, 3);
    for (auto& v : m.layers[0].wq.data()) v = 0.0f;
    CHECK(attention_instruction_ratio(m, x, instr, heads) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("attention concentrated on the instruction hits the cap") {
    ModelParams m = init_model(cfg, 3);
    for (std::size_t tok = 0; tok < m.token_embedding.rows(); ++tok) m.token_embedding(tok, 1) = 1.0f;
    m.token_embedding(static_cast<std::size_t>(x[1]), 0) = 5.0f;
    const auto dk = static_cast<std::size_t>(cfg.head_dim());
    auto& wq = m.layers[0].wq;
    auto& wk = m.layers[0].wk;
    for (auto& v : wq.data()) v = 0.0f;
    for (auto& v : wk.data()) v = 0.0f;
    for (const auto& h : heads) {
      wq(1, static_cast<std::size_t>(h.index) * dk + 2) = 30.0f;
      wk(0, static_cast<std::size_t>(cfg.kv_head_of(h.index)) * dk + 2) = 30.0f;
    }
    CHECK(attention_instruction_ratio(m, x, instr, heads) == kAttentionRatioCap);
  }
  SUBCASE("errors") {
    const auto m = init_model(cfg, 3);
    CHECK_THROWS_AS(attention_instruction_ratio(m, x, std::span<const std::size_t>{}, heads), std::invalid_argument);
    const std::size_t all[] = {0, 1, 2, 3, 4, 5};
    CHECK_THROWS_AS(attention_instruction_ratio(m, x, all, heads), std::invalid_argument);
    const ComponentId neuron[] = {ComponentId::neuron(0, 1)};
    CHECK_THROWS_AS(attention_instruction_ratio(m, x, instr, neuron), std::invalid_argument);
  }
}

TEST_CASE("kl and proj readouts agree on the top downstream neurons") {
  const auto p = planted_pair({ComponentId::neuron(0, 2), ComponentId::head(0, 1), ComponentId::neuron(1, 4),
                               ComponentId::head(1, 3), ComponentId::neuron(0, 6)});
  const auto cfg = p.base.config;
  const auto prompts = random_inputs(cfg, 16, 5, 17);
  std::vector<ComponentId> neurons;
  for (const auto& c : enumerate_components(cfg)) {
    if (!c.is_head()) neurons.push_back(c);
  }
  DownstreamReadout proj;
  proj.mode = DownstreamMode::Proj;
  proj.v_out = shift_anchor(p.base, p.sft, prompts, cfg.n_layers).v;
  const auto kl_table =
      downstream_sweep(p.base, p.sft, prepare_downstream(p.base, p.sft, prompts, {}), KnockoutMode::Activation, neurons);
  const auto proj_table =
      downstream_sweep(p.base, p.sft, prepare_downstream(p.base, p.sft, prompts, proj), KnockoutMode::Activation, neurons);
  CHECK(overlap_fraction(topk_screen(kl_table, 10), topk_screen(proj_table, 10)) >= 0.5);
}
