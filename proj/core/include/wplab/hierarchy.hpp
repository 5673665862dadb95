// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Source -> aggregation -> execution structure: target-side need directions,
// supplier weight support and link strength, source validation, downstream
// execution readouts, circuit assembly, and the attention-to-instruction
// ratio.

#pragma once

#include <map>
#include <set>
#include <span>
#include <string_view>
#include <vector>

#include "wplab/anchor.hpp"
#include "wplab/patching.hpp"
#include "wplab/scores.hpp"

namespace wplab {

// ---- need and supply ---------------------------------------------------------

struct NeedDirection {
  ComponentId target;
  Tensor g_need;  // T x d_model, shaped like the target's normalized residual input
  // False when the gradient is identically zero: the target has no path to
  // the anchor readout.
  bool reaches_readout = false;
};

/// Gradient of F_a at `base` with respect to the target's residual input,
/// taken along the path through the target only.
NeedDirection need_direction(const ModelParams& base, std::span<const int> x, ComponentId target,
                             const AnchorSpec& spec);

/// <Psi_target(Z(model, x)), g_need>, summed over positions.
double need_utility(const Trace& trace, const NeedDirection& need);
double need_utility(const ModelParams& model, std::span<const int> x, const NeedDirection& need);

/// dF_need/dtheta at `base`, laid out like the parameters.
ModelParams need_param_gradient(const ModelParams& base, std::span<const int> x, const NeedDirection& need);

/// Supplier's parameter delta contracted with dF_need/dtheta. Zero for
/// suppliers that are not upstream of the target.
double weight_support(const ModelParams& base, const ModelParams& delta, std::span<const int> x,
                      const NeedDirection& need, ComponentId supplier);

/// E_link rows keyed by target; each row scores every supplier.
using LinkTable = std::map<ComponentId, ScoreTable>;

/// mean over x of s_wt(target, supplier) / G(x), with g_need recomputed per
/// input at the base.
LinkTable link_strength(const ModelParams& base, const ModelParams& delta, const AnchorSpec& spec,
                        const GapFilteredSet& eval, std::span<const ComponentId> targets,
                        std::span<const ComponentId> suppliers = {}, int threads = 1);

// ---- thresholds and validation ----------------------------------------------

struct Thresholds {
  double tau_a = 0.0;
  double tau_w = 0.0;
  double tau_link = 0.0;
  double tau_down = 0.0;
  friend bool operator==(const Thresholds&, const Thresholds&) = default;
};

/// E_w(c) > tau_w and E_link(target, c) > tau_link. Components missing from
/// either table fail.
bool validate_source(ComponentId c, const ScoreTable& e_w, const ScoreTable& link_row, const Thresholds& t);

// ---- downstream execution ----------------------------------------------------

enum class DownstreamMode : std::uint8_t { Kl, Proj };

std::string_view downstream_mode_name(DownstreamMode m);
DownstreamMode parse_downstream_mode(std::string_view s);  // "kl" or "proj"

inline constexpr int kDownstreamSteps = 8;
inline constexpr double kKlGuard = 1e-9;

struct DownstreamReadout {
  DownstreamMode mode = DownstreamMode::Kl;
  Tensor v_out;  // d_model; proj mode only
  int steps = kDownstreamSteps;
};

/// One prompt with the specialized model's greedy continuation and cached
/// reference readouts.
struct DownstreamItem {
  std::vector<int> sequence;  // prompt + the first steps-1 generated tokens
  std::size_t prompt_len = 0;
  std::vector<std::vector<double>> p_sft;  // per scored position (kl mode)
  double f_base = 0.0;
  double f_sft = 0.0;
};

struct DownstreamEval {
  DownstreamReadout readout;
  std::vector<DownstreamItem> items;
  std::size_t excluded = 0;  // prompts with a degenerate denominator
};

/// Rolls out the specialized model and scores base and sft on each prefix.
/// Prompts whose |F_sft - F_base| is below `floor` are excluded.
DownstreamEval prepare_downstream(const ModelParams& base, const ModelParams& sft,
                                  std::span<const std::vector<int>> prompts, DownstreamReadout readout,
                                  double floor = 1e-9, int threads = 1);

/// F_down of a run on one item, averaged over the scored positions: minus
/// KL(p_sft || p_M) in kl mode, cosine of the final residual with v_out in
/// proj mode.
double downstream_utility(const Trace& trace, const DownstreamItem& item, const DownstreamReadout& readout);

/// mean over items of (F(run) - F_base) / (F_sft - F_base). Throws when every
/// prompt was excluded.
double downstream_effect(const RunFn& run, const DownstreamEval& eval, int threads = 1);

/// The base with component c restored from sft, on the parameter side
/// (KnockoutMode::Param) or the activation side (KnockoutMode::Activation).
RunFn restore_component(const ModelParams& base, const ModelParams& sft, ComponentId c, KnockoutMode side);

ScoreTable downstream_sweep(const ModelParams& base, const ModelParams& sft, const DownstreamEval& eval,
                            KnockoutMode side, std::span<const ComponentId> components = {}, int threads = 1);

// ---- circuit -----------------------------------------------------------------

struct LinkEntry {
  ComponentId target;
  ComponentId supplier;
  double score = 0.0;
  friend bool operator==(const LinkEntry&, const LinkEntry&) = default;
};

struct CircuitReport {
  std::set<ComponentId> sources;
  std::set<ComponentId> aggregators;
  std::set<ComponentId> executors;
  Thresholds thresholds;
  std::vector<LinkEntry> links;  // validated (target, source) pairs

  std::set<ComponentId> circuit() const;
};

/// S_conv = {E_a > tau_a}; S_src = sources validated against at least one
/// S_conv target; S_exe = {E_down > tau_down}. Throws when an S_conv target
/// has no link row.
CircuitReport assemble_circuit(const ScoreTable& e_a, const ScoreTable& e_w, const LinkTable& links,
                               const ScoreTable& e_down, const Thresholds& t);

// ---- attention to instruction ------------------------------------------------

inline constexpr double kAttentionRatioCap = 1e6;

/// Mean per-token attention mass on the instruction positions divided by the
/// mean per-token mass on the rest, averaged over the chosen heads and over
/// query positions that see both regions. Capped at kAttentionRatioCap.
/// Throws on an empty or all-covering span.
double attention_instruction_ratio(const ModelParams& model, std::span<const int> x,
                                   std::span<const std::size_t> instruction_positions,
                                   std::span<const ComponentId> heads);

}  // namespace wplab
