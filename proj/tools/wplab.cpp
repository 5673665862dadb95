// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "wplab/parallel.hpp"
#include "wplab/pipeline.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> topk;
  std::optional<std::string> mode;
  std::optional<std::string> metric;
  std::optional<int> threads;
};

void add_flags(CLI::App& app, Flags& f) {
  app.add_option("--config", f.config, "JSON run config; flags override its values")->check(CLI::ExistingFile);
  app.add_option("--seed", f.seed, "Master seed");
  app.add_option("--out", f.out, "Output directory for artifacts");
  app.add_option("--topk", f.topk, "Components listed per table in the report");
  app.add_option("--mode", f.mode, "Intervention side for attr and trace")->check(CLI::IsMember({"param", "activation"}));
  app.add_option("--metric", f.metric, "Utility for wp and ap")->check(CLI::IsMember({"vec", "kl", "proj"}));
  app.add_option("--threads", f.threads, "Worker threads (default: WPLAB_THREADS, else 1)")->check(CLI::PositiveNumber);
}

wplab::RunConfig resolve(const Flags& f) {
  wplab::RunConfig c = f.config.empty() ? wplab::RunConfig{} : wplab::load_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out = *f.out;
  if (f.topk) c.topk = *f.topk;
  if (f.mode) c.mode = wplab::parse_knockout_mode(*f.mode);
  if (f.metric) c.metric = wplab::parse_anchor_metric(*f.metric);
  if (f.threads || std::getenv("WPLAB_THREADS")) c.threads = wplab::resolve_threads(f.threads);
  c.validate();
  return c;
}

std::string describe(wplab::Stage s) {
  switch (s) {
    case wplab::Stage::TrainPair: return "Pretrain a base model and specialize it on the instruction task";
    case wplab::Stage::ExtractAnchor: return "Extract the task direction and pick the anchor layer";
    case wplab::Stage::Wp: return "Exact weight patching of every head and neuron";
    case wplab::Stage::Ap: return "Exact cross-model activation patching of every head and neuron";
    case wplab::Stage::Attr: return "First-order weight (--mode param) or activation attribution";
    case wplab::Stage::Trace: return "Link strengths, downstream readouts and circuit assembly";
    case wplab::Stage::Merge: return "Train further experts and fuse them with the weight-patching scores";
    case wplab::Stage::Report: return "Join all artifacts into report.json and report.md";
  }
  return {};
}

void print(const wplab::StageResult& r, double seconds) {
  std::printf("[%s] %s (%.1fs)\n", std::string(wplab::stage_name(r.stage)).c_str(), r.summary.c_str(), seconds);
  for (const auto& p : r.written) std::printf("  %s\n", p.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weight patching and attribution on paired toy transformers"};
  app.require_subcommand(1);
  Flags flags;
  std::optional<wplab::Stage> chosen;
  bool all = false;
  for (auto stage : wplab::kStages) {
    auto* sub = app.add_subcommand(std::string(wplab::stage_name(stage)), describe(stage));
    add_flags(*sub, flags);
    sub->callback([&chosen, stage] { chosen = stage; });
  }
  auto* everything = app.add_subcommand("all", "Run train-pair through report");
  add_flags(*everything, flags);
  everything->callback([&all] { all = true; });
  auto* hash = app.add_subcommand("hash", "Print the config hash and the resolved config");
  add_flags(*hash, flags);

  CLI11_PARSE(app, argc, argv);
  try {
    const auto config = resolve(flags);
    if (hash->parsed()) {
      std::printf("%s\n%s\n", wplab::config_hash(config).c_str(), wplab::config_to_json(config).c_str());
      return 0;
    }
    std::printf("config %s -> %s (%d thread%s)\n", wplab::config_hash(config).c_str(), config.out.string().c_str(),
                config.threads, config.threads == 1 ? "" : "s");
    std::fflush(stdout);
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    auto last = t0;
    auto report = [&](const wplab::StageResult& r) {
      const auto now = clock::now();
      print(r, std::chrono::duration<double>(now - last).count());
      last = now;
    };
    if (all) {
      wplab::run_pipeline(config, report);
      std::printf("total %.1fs\n", std::chrono::duration<double>(clock::now() - t0).count());
    } else {
      report(wplab::run_stage(*chosen, config));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "wplab: %s\n", e.what());
    return 1;
  }
  return 0;
}
