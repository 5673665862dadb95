// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Exact interventions scored through the anchor utility: weight patching
// (component slices copied from the specialized model into the base), cross-
// model activation patching, and knockout in either space.

#pragma once

#include <map>
#include <set>
#include <span>
#include <vector>

#include "wplab/anchor.hpp"
#include "wplab/model.hpp"
#include "wplab/scores.hpp"
#include "wplab/slice.hpp"

namespace wplab {

inline constexpr double kDefaultGapFloor = 0.05;

/// `into` with the slices of chosen components taken from `from`. Holds one
/// working copy, so replacing or reverting a component costs O(slice).
/// Both parameter sets must outlive the view.
class PatchedModelView {
 public:
  PatchedModelView(const ModelParams& into, const ModelParams& from);

  void replace(ComponentId c);
  void replace(std::span<const ComponentId> set);
  void revert(ComponentId c);
  void clear();

  bool is_replaced(ComponentId c) const { return replaced_.contains(c); }
  const std::set<ComponentId>& replaced() const { return replaced_; }
  const ModelParams& params() const { return work_; }
  const ModelParams& into() const { return *into_; }
  const ModelParams& from() const { return *from_; }

 private:
  const ModelParams* into_;
  const ModelParams* from_;
  ModelParams work_;
  std::set<ComponentId> replaced_;
};

/// Base parameters with the slices of S taken from sft. Throws on a config
/// mismatch.
PatchedModelView replace_params(const ModelParams& base, const ModelParams& sft, std::span<const ComponentId> set);

struct GapInput {
  std::vector<int> tokens;
  double f_base = 0.0;
  double f_sft = 0.0;
  double gap = 0.0;
};

/// Inputs whose anchor gap passes the floor, in input order.
struct GapFilteredSet {
  std::vector<GapInput> inputs;
  std::size_t excluded = 0;
  double floor = kDefaultGapFloor;
};

GapFilteredSet filter_by_gap(const ModelParams& base, const ModelParams& sft,
                             std::span<const std::vector<int>> inputs, const AnchorSpec& spec,
                             double floor = kDefaultGapFloor, int threads = 1);

/// mean over x of (F_a(patched, x) - F_a(base, x)) / G(x). Throws on an
/// empty filtered set.
double exact_wp_effect(const ModelParams& base, const ModelParams& sft, std::span<const ComponentId> set,
                       const AnchorSpec& spec, const GapFilteredSet& eval, int threads = 1);
double exact_wp_effect(const ModelParams& base, const ModelParams& sft, ComponentId c, const AnchorSpec& spec,
                       const GapFilteredSet& eval, int threads = 1);

/// Single-component E_w for every component in `components` (all of them
/// when empty). Each worker owns one PatchedModelView.
ScoreTable wp_sweep(const ModelParams& base, const ModelParams& sft, const AnchorSpec& spec,
                    const GapFilteredSet& eval, std::span<const ComponentId> components = {}, int threads = 1);

// ---- activation side ---------------------------------------------------------

/// Captured activations: head outputs O(l,h) (T x d_head) or neuron
/// activations a(l,j) (T x 1), keyed by component.
using ActivationMap = std::map<ComponentId, Tensor>;

ActivationMap capture_activations(const Trace& trace, std::span<const ComponentId> set);

/// Hooks that overwrite the listed activations with the captured values.
/// Captured tensors must cover at least the run's sequence length.
ForwardHooks activation_patch_hooks(ActivationMap values);

/// Base forward on x with c's activation replaced by the one the specialized
/// model produces on the same x.
Trace cross_model_ap_run(const ModelParams& base, const ModelParams& sft, std::span<const int> x, ComponentId c);

/// Base forward with the whole residual at `layer` replaced by the
/// specialized model's.
Trace residual_patch_run(const ModelParams& base, const ModelParams& sft, std::span<const int> x, int layer);

/// Run of `receiver` whose activations of S are replaced, on every call, by
/// those `donor` produces on the same tokens.
RunFn activation_patched_run(const ModelParams& receiver, const ModelParams& donor, std::vector<ComponentId> set);

/// mean over x of (F_a(ap-run, x) - F_a(base, x)) / G(x).
double activation_effect(const ModelParams& base, const ModelParams& sft, ComponentId c, const AnchorSpec& spec,
                         const GapFilteredSet& eval, int threads = 1);

ScoreTable ap_sweep(const ModelParams& base, const ModelParams& sft, const AnchorSpec& spec,
                    const GapFilteredSet& eval, std::span<const ComponentId> components = {}, int threads = 1);

// ---- knockout ----------------------------------------------------------------

enum class KnockoutMode : std::uint8_t { Param, Activation };

std::string_view knockout_mode_name(KnockoutMode m);
KnockoutMode parse_knockout_mode(std::string_view s);

/// The specialized model with S reverted to the base: param mode swaps the
/// slices back (reverse weight patching), activation mode overwrites the
/// specialized run's activations with the base run's (reverse activation
/// patching). The returned run keeps references to both models.
RunFn knockout(const ModelParams& sft, const ModelParams& base, std::span<const ComponentId> set, KnockoutMode mode);

}  // namespace wplab
