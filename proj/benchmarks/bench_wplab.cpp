// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "wplab/anchor.hpp"
#include "wplab/attribution.hpp"
#include "wplab/patching.hpp"
#include "wplab/workshop.hpp"

namespace {

using namespace wplab;

// Default-size pair with every component planted, plus an anchor that sees
// the edit.
struct Fixture {
  ModelParams base;
  ModelParams sft;
  std::vector<std::vector<int>> inputs;
  AnchorSpec spec;
  GapFilteredSet eval;

  Fixture() {
    const ModelConfig cfg;
    base = init_model(cfg, 1);
    PlantSpec plant{{}, 2};
    for (const auto& c : enumerate_components(cfg)) plant.entries.push_back({c, 0.05});
    sft = plant_component_edits(base, plant);
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> tok(0, cfg.vocab_size - 1);
    inputs.assign(8, std::vector<int>(6));
    for (auto& x : inputs) {
      for (auto& t : x) t = tok(rng);
    }
    std::vector<PairedExample> pairs;
    for (const auto& x : inputs) pairs.push_back({x, std::vector<int>(x.begin() + 1, x.end()), {}});
    spec = make_anchor_spec(extract_layer_direction(sft, pairs, cfg.n_layers), cfg.n_layers);
    eval = filter_by_gap(base, sft, inputs, spec, 0.0);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_Forward(benchmark::State& state) {
  const auto& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(forward(f.base, f.inputs[0]).logits().value()[0]);
}
BENCHMARK(BM_Forward);

void BM_ForwardBackward(benchmark::State& state) {
  const auto& f = fixture();
  for (auto _ : state) {
    const auto g = anchor_param_gradient(f.base, f.inputs[0], f.spec);
    benchmark::DoNotOptimize(g.lm_head[0]);
  }
}
BENCHMARK(BM_ForwardBackward);

void BM_WpSweep(benchmark::State& state) {
  const auto& f = fixture();
  const int threads = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(wp_sweep(f.base, f.sft, f.spec, f.eval, {}, threads).size());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.eval.inputs.size()));
}
BENCHMARK(BM_WpSweep)->Arg(1)->Arg(4)->UseRealTime()->Unit(benchmark::kMillisecond);

void BM_AttrSweep(benchmark::State& state) {
  const auto& f = fixture();
  const auto delta = param_delta(f.base, f.sft);
  const int threads = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(weight_attr_sweep(f.base, delta, f.spec, f.eval, {}, threads).size());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.eval.inputs.size()));
}
BENCHMARK(BM_AttrSweep)->Arg(1)->Arg(4)->UseRealTime()->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
