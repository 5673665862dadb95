// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Stage runner behind the `wplab` tool. Every stage reads its prerequisites
// from the output directory, checks that they were produced under the same
// config hash, and writes its own artifacts atomically.
//
//   train-pair      base.wpck sft.wpck dataset.jsonl pair.json config.json
//   extract-anchor  anchor.json
//   wp              wp_<metric>.{csv,json}
//   ap              ap_<metric>.{csv,json}
//   attr            attr_<mode>.{csv,json}
//   trace           circuit_<mode>_<readout>.json down_<mode>_<readout>.{csv,json}
//                   links.csv attention.csv
//   merge           expert_<task>.wpck wp_vec_<task>.{csv,json} fused.wpck uniform.wpck merge.json
//   report          report.json report.md

#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "wplab/report.hpp"

namespace wplab {

enum class Stage : std::uint8_t { TrainPair, ExtractAnchor, Wp, Ap, Attr, Trace, Merge, Report };

inline constexpr std::array<Stage, 8> kStages = {Stage::TrainPair, Stage::ExtractAnchor, Stage::Wp,    Stage::Ap,
                                                 Stage::Attr,      Stage::Trace,         Stage::Merge, Stage::Report};

std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view s);

/// A prerequisite file is absent or was produced under another config.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageResult {
  Stage stage = Stage::TrainPair;
  std::vector<std::filesystem::path> written;
  std::string summary;
};

StageResult run_stage(Stage stage, const RunConfig& config);

/// train-pair through report, with the config's metric and mode, plus the
/// vec-metric wp/ap tables that trace needs. `on_stage` sees each result as
/// soon as its stage finishes.
std::vector<StageResult> run_pipeline(const RunConfig& config,
                                      const std::function<void(const StageResult&)>& on_stage = {});

// ---- building blocks shared with tests and benchmarks -------------------------

Vocabulary run_vocabulary(const RunConfig& config);
/// Training hyperparameters with seeds derived from config.seed.
PairHyper run_pair_hyper(const RunConfig& config);
TrainingScope run_scope(const RunConfig& config);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

std::string anchor_to_json(const AnchorSelection& selection, const Tensor& readout_direction,
                           std::string_view config_hash = {});
struct StoredAnchor {
  AnchorSelection selection;
  Tensor readout_direction;  // final-residual direction for the proj readout
  std::string config_hash;
};
StoredAnchor anchor_from_json(std::string_view text, const ModelConfig& config);

}  // namespace wplab
