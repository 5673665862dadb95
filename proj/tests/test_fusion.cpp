// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "fixtures.hpp"
#include "wplab/fusion.hpp"

using namespace wplab;
using namespace wplab::testing;

namespace {

ModelParams perturbed(const ModelParams& base, std::uint64_t seed, double scale = 0.05) {
  ModelParams out = base;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  out.for_each_tensor([&](const std::string&, Tensor& t) {
    for (auto& v : t.data()) v = static_cast<float>(v + nd(rng));
  });
  return out;
}

ScoreTable random_scores(const ModelConfig& cfg, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ScoreTable t;
  t.metric = "E_w";
  for (const auto& c : enumerate_components(cfg)) t.scores[c] = u(rng);
  return t;
}

ScoreTable constant_scores(const ModelConfig& cfg, double v) {
  ScoreTable t;
  t.metric = "E_w";
  for (const auto& c : enumerate_components(cfg)) t.scores[c] = v;
  return t;
}

}  // namespace

TEST_CASE("truncation") {
  const std::vector<double> s{-1.0, 2.0};
  CHECK(truncate_scores(s) == std::vector<double>{0.0, 2.0});
  CHECK(truncate_scores(std::vector<double>{0.0, 0.0}) == std::vector<double>{0.0, 0.0});
  CHECK(truncate_scores(truncate_scores(s)) == truncate_scores(s));
  CHECK(truncate_scores(std::vector<double>{-0.0})[0] == 0.0);
  CHECK_THROWS_AS(truncate_scores(std::vector<double>{1.0, std::nan("")}), std::invalid_argument);

  ScoreTable t;
  t.scores = {{ComponentId::head(0, 0), -3.0}, {ComponentId::neuron(0, 1), 0.5}};
  const auto tt = truncate_scores(t);
  CHECK(tt.at(ComponentId::head(0, 0)) == 0.0);
  CHECK(tt.at(ComponentId::neuron(0, 1)) == 0.5);
  t.scores[ComponentId::head(0, 1)] = std::nan("");
  CHECK_THROWS_AS(truncate_scores(t), std::invalid_argument);
}

TEST_CASE("fusion weights") {
  CHECK(fusion_weights(std::vector<double>{2.0, 6.0}) == std::vector<double>{0.25, 0.75});
  CHECK(fusion_weights(truncate_scores(std::vector<double>{-1.0, 0.0, -2.0})) ==
        std::vector<double>{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0});
  CHECK(fusion_weights(std::vector<double>{0.7}) == std::vector<double>{1.0});
  CHECK_THROWS_AS(fusion_weights(std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(fusion_weights(std::vector<double>{-1.0, 1.0}), std::invalid_argument);

  const auto cfg = small_config();
  const std::vector<ScoreTable> tables{random_scores(cfg, 1, -1.0, 1.0), random_scores(cfg, 2, -1.0, 1.0),
                                       random_scores(cfg, 3, -1.0, 0.5)};
  const auto w = fusion_weights(tables, cfg);
  CHECK(w.size() == component_count(cfg));
  for (const auto& [c, a] : w) {
    REQUIRE(a.size() == 3);
    double sum = 0.0;
    for (double v : a) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
  ScoreTable partial = tables[0];
  partial.scores.erase(ComponentId::neuron(1, 3));
  const std::vector<ScoreTable> bad{partial, tables[1]};
  CHECK_THROWS(fusion_weights(bad, cfg));
}

TEST_CASE("slice fusion") {
  const auto cfg = small_config();
  const auto base = lively_model(cfg, 5, 1.0f);
  const auto e1 = perturbed(base, 1), e2 = perturbed(base, 2);
  const ModelParams* experts[] = {&e1, &e2};
  const auto c = ComponentId::head(1, 2);
  const auto slice = component_slice(cfg, c);

  SUBCASE("one-hot weights reproduce the expert slice bit-exactly") {
    ModelParams out = base;
    const double alpha[] = {0.0, 1.0};
    fuse_component_slice(slice, base, experts, alpha, out);
    for (const auto& r : slice.regions) {
      const auto& o = layer_tensor(out, r.layer, r.tensor);
      const auto& e = layer_tensor(e2, r.layer, r.tensor);
      r.for_each_index(o.shape(), [&](std::size_t i) { CHECK(o[i] == e[i]); });
    }
    CHECK(out.layers[1].wq(0, 0) == base.layers[1].wq(0, 0));
    CHECK(out.layers[0].wo == base.layers[0].wo);
  }
  SUBCASE("uniform weights give the arithmetic mean") {
    ModelParams out = base;
    const double alpha[] = {0.5, 0.5};
    fuse_component_slice(slice, base, experts, alpha, out);
    const auto dk = static_cast<std::size_t>(cfg.head_dim());
    for (std::size_t r = 0; r < out.layers[1].wq.rows(); ++r) {
      for (std::size_t k = 2 * dk; k < 3 * dk; ++k) {
        const double mean = (static_cast<double>(e1.layers[1].wq(r, k)) + e2.layers[1].wq(r, k)) / 2.0;
        CHECK(out.layers[1].wq(r, k) == doctest::Approx(mean).epsilon(1e-6));
      }
    }
  }
  SUBCASE("random weights match the elementwise loop") {
    const auto n = ComponentId::neuron(0, 5);
    ModelParams out = base;
    const double alpha[] = {0.3141, 0.6859};
    fuse_component_slice(component_slice(cfg, n), base, experts, alpha, out);
    for (std::size_t r = 0; r < cfg.d_model; ++r) {
      for (auto [o, b, a1, a2] : {std::tuple{&out.layers[0].w_gate, &base.layers[0].w_gate, &e1.layers[0].w_gate, &e2.layers[0].w_gate},
                                  std::tuple{&out.layers[0].w_up, &base.layers[0].w_up, &e1.layers[0].w_up, &e2.layers[0].w_up}}) {
        const double want = (*b)(r, 5) + alpha[0] * ((*a1)(r, 5) - (*b)(r, 5)) + alpha[1] * ((*a2)(r, 5) - (*b)(r, 5));
        CHECK((*o)(r, 5) == doctest::Approx(want).epsilon(1e-6));
      }
      const double want = base.layers[0].w_down(5, r) + alpha[0] * (e1.layers[0].w_down(5, r) - base.layers[0].w_down(5, r)) +
                          alpha[1] * (e2.layers[0].w_down(5, r) - base.layers[0].w_down(5, r));
      CHECK(out.layers[0].w_down(5, r) == doctest::Approx(want).epsilon(1e-6));
    }
  }
  SUBCASE("errors") {
    ModelParams out = base;
    const double one[] = {1.0};
    CHECK_THROWS_AS(fuse_component_slice(slice, base, experts, one, out), std::invalid_argument);
    auto other = cfg;
    other.d_ff = 12;
    const auto wide = init_model(other, 1);
    const ModelParams* mismatched[] = {&wide};
    const auto nslice = component_slice(cfg, ComponentId::neuron(0, 1));
    CHECK_THROWS_AS(fuse_component_slice(nslice, base, mismatched, one, out), ShapeError);
  }
}

TEST_CASE("GQA key/value weights") {
  auto cfg = small_config();
  FusionWeights w;
  for (const auto& c : enumerate_components(cfg)) w[c] = {0.5, 0.5};
  w[ComponentId::head(0, 0)] = {1.0, 0.0};
  w[ComponentId::head(0, 1)] = {0.0, 1.0};
  w[ComponentId::head(0, 2)] = {0.2, 0.8};
  w[ComponentId::head(0, 3)] = {0.2, 0.8};
  CHECK(gqa_kv_weights(w, cfg, 0, 0) == std::vector<double>{0.5, 0.5});
  CHECK(gqa_kv_weights(w, cfg, 0, 1) == std::vector<double>{0.2, 0.8});
  CHECK_THROWS_AS(gqa_kv_weights(w, cfg, 0, 2), std::out_of_range);

  cfg.d_model = 24;
  cfg.n_heads = 6;
  cfg.n_kv_heads = 2;
  FusionWeights w3;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const auto& c : enumerate_components(cfg)) w3[c] = fusion_weights(std::vector<double>{u(rng), u(rng), u(rng)});
  for (int g = 0; g < 2; ++g) {
    const auto a = gqa_kv_weights(w3, cfg, 1, g);
    double sum = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      double mean = 0.0;
      for (int h = 3 * g; h < 3 * g + 3; ++h) mean += w3.at(ComponentId::head(1, h))[k];
      CHECK(a[k] == doctest::Approx(mean / 3.0).epsilon(1e-15));
      sum += a[k];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("fallback averaging") {
  const auto cfg = small_config();
  const auto base = lively_model(cfg, 5, 1.0f);
  const auto e = perturbed(base, 3);

  SUBCASE("identical experts leave values unchanged") {
    const std::vector<ModelParams> two{e, e};
    const auto out = fuse_fallback_params(base, two);
    CHECK(out.token_embedding == e.token_embedding);
    CHECK(out.lm_head == e.lm_head);
    CHECK(out.final_norm == e.final_norm);
    CHECK(out.layers[1].norms == e.layers[1].norms);
    CHECK(out.layers[1].wq == base.layers[1].wq);
  }
  SUBCASE("equal offsets give base plus the offset") {
    ModelParams a = base, b = base;
    for (auto* m : {&a, &b}) {
      for (auto& v : m->final_norm.data()) v += 0.25f;
    }
    const std::vector<ModelParams> two{a, b};
    const auto out = fuse_fallback_params(base, two);
    for (std::size_t i = 0; i < out.final_norm.numel(); ++i) CHECK(out.final_norm[i] == base.final_norm[i] + 0.25f);
  }
  SUBCASE("extra vocabulary is dropped before averaging") {
    auto big_cfg = cfg;
    big_cfg.vocab_size = cfg.vocab_size + 3;
    ModelParams big = init_model(big_cfg, 8);
    big.layers = e.layers;
    big.final_norm = e.final_norm;
    for (std::size_t r = 0; r < e.token_embedding.rows(); ++r) {
      for (std::size_t c = 0; c < e.token_embedding.cols(); ++c) big.token_embedding(r, c) = e.token_embedding(r, c);
    }
    for (std::size_t r = 0; r < e.lm_head.rows(); ++r) {
      for (std::size_t c = 0; c < e.lm_head.cols(); ++c) big.lm_head(r, c) = e.lm_head(r, c);
    }
    const std::vector<ModelParams> two{e, big};
    const auto out = fuse_fallback_params(base, two);
    CHECK(out.config == base.config);
    CHECK(out.token_embedding == e.token_embedding);
    CHECK(out.lm_head == e.lm_head);
    CHECK(reconcilable(cfg, big_cfg));
    CHECK_FALSE(reconcilable(big_cfg, cfg));
    const std::vector<ModelParams> smaller{base};
    CHECK_THROWS_AS(fuse_fallback_params(big, smaller), std::invalid_argument);
  }
}

TEST_CASE("model fusion") {
  const auto cfg = small_config();
  const auto base = lively_model(cfg, 5, 1.0f);
  const std::vector<ModelParams> experts{perturbed(base, 1), perturbed(base, 2), perturbed(base, 3)};
  const std::vector<ScoreTable> scores{random_scores(cfg, 11, -0.5, 1.0), random_scores(cfg, 12, -0.5, 1.0),
                                       random_scores(cfg, 13, -0.5, 1.0)};
  const auto fused = fuse_models(base, experts, scores);

  SUBCASE("slices follow their own weights") {
    const auto w = fusion_weights(scores, cfg);
    const auto c = ComponentId::neuron(1, 6);
    const auto& a = w.at(c);
    for (std::size_t r = 0; r < static_cast<std::size_t>(cfg.d_model); ++r) {
      double want = base.layers[1].w_up(r, 6);
      for (std::size_t k = 0; k < 3; ++k) want += a[k] * (experts[k].layers[1].w_up(r, 6) - static_cast<double>(base.layers[1].w_up(r, 6)));
      CHECK(fused.layers[1].w_up(r, 6) == doctest::Approx(want).epsilon(1e-6));
    }
    const auto kv = gqa_kv_weights(w, cfg, 0, 1);
    const auto dk = static_cast<std::size_t>(cfg.head_dim());
    for (std::size_t k = dk; k < 2 * dk; ++k) {
      double want = base.layers[0].wv(3, k);
      for (std::size_t e = 0; e < 3; ++e) want += kv[e] * (experts[e].layers[0].wv(3, k) - static_cast<double>(base.layers[0].wv(3, k)));
      CHECK(fused.layers[0].wv(3, k) == doctest::Approx(want).epsilon(1e-6));
    }
  }
  SUBCASE("fused values stay inside the expert envelope") {
    std::vector<std::vector<const Tensor*>> parts;
    for (const auto& e : experts) {
      std::size_t i = 0;
      e.for_each_tensor([&](const std::string&, const Tensor& t) {
        if (parts.size() <= i) parts.emplace_back();
        parts[i++].push_back(&t);
      });
    }
    std::size_t i = 0, outside = 0;
    fused.for_each_tensor([&](const std::string&, const Tensor& t) {
      for (std::size_t k = 0; k < t.numel(); ++k) {
        float lo = std::numeric_limits<float>::infinity(), hi = -lo;
        for (const auto* p : parts[i]) {
          lo = std::min(lo, (*p)[k]);
          hi = std::max(hi, (*p)[k]);
        }
        const float tol = 1e-6f * std::max(1.0f, std::abs(t[k]));
        if (t[k] < lo - tol || t[k] > hi + tol) ++outside;
      }
      ++i;
    });
    CHECK(outside == 0);
  }
  SUBCASE("single expert with positive scores is reproduced") {
    const std::vector<ModelParams> one{experts[1]};
    const std::vector<ScoreTable> pos{random_scores(cfg, 4, 0.1, 1.0)};
    const auto out = fuse_models(base, one, pos);
    std::size_t i = 0;
    std::vector<const Tensor*> want;
    experts[1].for_each_tensor([&](const std::string&, const Tensor& t) { want.push_back(&t); });
    out.for_each_tensor([&](const std::string& name, const Tensor& t) {
      CAPTURE(name);
      CHECK(t == *want[i++]);
    });
  }
  SUBCASE("copies of one expert fuse to that expert") {
    const std::vector<ModelParams> copies{experts[0], experts[0], experts[0]};
    const auto out = fuse_models(base, copies, scores);
    std::size_t i = 0;
    std::vector<const Tensor*> want;
    experts[0].for_each_tensor([&](const std::string&, const Tensor& t) { want.push_back(&t); });
    out.for_each_tensor([&](const std::string&, const Tensor& t) {
      const Tensor& w = *want[i++];
      for (std::size_t k = 0; k < t.numel(); ++k) CHECK(t[k] == doctest::Approx(w[k]).epsilon(1e-6));
    });
  }
  SUBCASE("all nonpositive scores give the uniform average") {
    const std::vector<ScoreTable> neg{constant_scores(cfg, -1.0), random_scores(cfg, 5, -2.0, 0.0),
                                      constant_scores(cfg, 0.0)};
    const auto out = fuse_models(base, experts, neg);
    const auto avg = uniform_average(base, experts);
    std::size_t i = 0;
    std::vector<const Tensor*> want;
    avg.for_each_tensor([&](const std::string&, const Tensor& t) { want.push_back(&t); });
    double worst = 0.0;
    out.for_each_tensor([&](const std::string&, const Tensor& t) {
      const Tensor& w = *want[i++];
      for (std::size_t k = 0; k < t.numel(); ++k) worst = std::max(worst, std::abs(static_cast<double>(t[k]) - w[k]));
    });
    CHECK(worst <= 1e-6);
  }
  SUBCASE("thread count does not matter") {
    const auto par = fuse_models(base, experts, scores, 2);
    std::size_t i = 0;
    std::vector<const Tensor*> want;
    fused.for_each_tensor([&](const std::string&, const Tensor& t) { want.push_back(&t); });
    par.for_each_tensor([&](const std::string&, const Tensor& t) { CHECK(t == *want[i++]); });
  }
  SUBCASE("config mismatch") {
    auto other = cfg;
    other.n_layers = 3;
    const std::vector<ModelParams> bad{init_model(other, 1)};
    const std::vector<ScoreTable> one{scores[0]};
    CHECK_THROWS_AS(fuse_models(base, bad, one), std::invalid_argument);
    CHECK_THROWS_AS(fuse_models(base, experts, one), std::invalid_argument);
  }
}
