// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Mechanism-aware merging of experts finetuned from one base: per-component
// scores are truncated at zero and normalized across experts, each head and
// neuron slice is fused with its own weights, KV groups take the mean of
// their query heads' weights, and everything else is averaged uniformly.

#pragma once

#include <map>
#include <span>
#include <vector>

#include "wplab/model.hpp"
#include "wplab/scores.hpp"
#include "wplab/slice.hpp"

namespace wplab {

/// max(s, 0) elementwise. Throws on NaN.
std::vector<double> truncate_scores(std::span<const double> scores);
ScoreTable truncate_scores(const ScoreTable& table);

/// Truncated scores normalized to sum to one; uniform when they sum to zero.
/// Throws when empty.
std::vector<double> fusion_weights(std::span<const double> truncated);

/// alpha(k)(c) for every component, one entry per expert.
using FusionWeights = std::map<ComponentId, std::vector<double>>;

/// Weights for every component of `config` from per-expert score tables.
/// Throws when a table lacks a component.
FusionWeights fusion_weights(std::span<const ScoreTable> expert_scores, const ModelConfig& config);

/// Writes base + sum_k alpha_k (expert_k - base) over the slice into `out`,
/// accumulated in double. Throws on a shape mismatch.
void fuse_component_slice(const ParamSlice& slice, const ModelParams& base,
                          std::span<const ModelParams* const> experts, std::span<const double> alpha,
                          ModelParams& out);

/// Mean of the query heads' weights over KV group `group` of `layer`.
std::vector<double> gqa_kv_weights(const FusionWeights& weights, const ModelConfig& config, int layer, int group);

/// True when `expert` matches `base` in everything but a vocabulary at least
/// as large.
bool reconcilable(const ModelConfig& base, const ModelConfig& expert);

/// Base-shaped parameters whose embedding, norm gains, final norm and
/// lm_head are the elementwise mean of the experts' (extra vocabulary rows
/// dropped first); all other tensors are the base's. Throws when an expert
/// is not reconcilable with the base.
ModelParams fuse_fallback_params(const ModelParams& base, std::span<const ModelParams> experts);

/// Full fusion: head and neuron slices by their weights, W_K/W_V columns of
/// each KV group by the group mean, the rest by uniform averaging.
ModelParams fuse_models(const ModelParams& base, std::span<const ModelParams> experts,
                        std::span<const ScoreTable> expert_scores, int threads = 1);

/// Elementwise mean of the experts (after vocabulary truncation).
ModelParams uniform_average(const ModelParams& base, std::span<const ModelParams> experts);

}  // namespace wplab
