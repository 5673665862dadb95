// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration, config hashing and machine-readable emission of score
// tables and circuit reports.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "wplab/anchor.hpp"
#include "wplab/hierarchy.hpp"
#include "wplab/patching.hpp"
#include "wplab/scores.hpp"
#include "wplab/workshop.hpp"

namespace wplab {

enum class AnchorMetric : std::uint8_t { Vec, Kl, Proj };
std::string_view anchor_metric_name(AnchorMetric m);
AnchorMetric parse_anchor_metric(std::string_view s);  // "vec", "kl" or "proj"

struct RunConfig {
  ModelConfig model;

  int n_content = 16;
  ToyTask task;
  PairHyper hyper;
  bool restrict_to_components = true;

  int anchor_layer = 0;  // 0 selects the layer with the best correction rate
  PositionRule position;
  double gap_floor = kDefaultGapFloor;

  Thresholds thresholds{0.05, 0.5, 0.0, 0.05};

  std::uint64_t seed = 1;
  std::size_t pairs = 96;           // instruction pairs, split into extraction and evaluation halves
  std::size_t accuracy_examples = 200;
  std::size_t downstream_prompts = 16;

  // Stage selectors, runtime settings: not part of the config hash. The
  // selectors are encoded in the artifact names instead.
  std::size_t topk = 20;
  KnockoutMode mode = KnockoutMode::Param;
  AnchorMetric metric = AnchorMetric::Vec;
  std::vector<TaskKind> merge_tasks{TaskKind::Mirror};

  std::filesystem::path out = "wplab-out";
  int threads = 1;

  // Throws std::invalid_argument naming the first bad field.
  void validate() const;
  friend bool operator==(const RunConfig& a, const RunConfig& b);
};

/// Canonical JSON (sorted keys). The selectors (topk, mode, metric), `out`
/// and `threads` are included only when `with_runtime` is set.
std::string config_to_json(const RunConfig& config, bool with_runtime = true);
/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig config_from_json(std::string_view text);
/// Throws std::runtime_error naming the path when it cannot be read.
RunConfig load_config(const std::filesystem::path& path);

/// 16 hex digits of FNV-1a over the canonical JSON without selectors and
/// runtime fields.
std::string config_hash(const RunConfig& config);

// ---- files -------------------------------------------------------------------

std::string read_file(const std::filesystem::path& path);
/// Writes a temporary next to `path`, then renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// ---- score tables ------------------------------------------------------------

/// `kind,layer,index,score` in component order, scores as %.17g. A non-empty
/// hash adds a leading `# config <hash>` line. Throws on non-finite scores.
std::string scores_to_csv(const ScoreTable& table, std::string_view config_hash = {});
ScoreTable scores_from_csv(std::string_view text, std::string* config_hash = nullptr);

std::string scores_to_json(const ScoreTable& table, std::string_view config_hash = {});
ScoreTable scores_from_json(std::string_view text, std::string* config_hash = nullptr);

// ---- circuit -----------------------------------------------------------------

std::string circuit_to_json(const CircuitReport& report, std::string_view config_hash = {});
CircuitReport circuit_from_json(std::string_view text, std::string* config_hash = nullptr);

}  // namespace wplab
