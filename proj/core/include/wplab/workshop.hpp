// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic instruction tasks and the paired base/specialized models built
// from them, either by training or by planting edits into chosen components.
//
// Vocabulary layout: content tokens [0, n_content) split into a lower and an
// upper half ("case"), then a separator, one instruction token per task and
// one pretraining cue token per task. The base model is pretrained to copy
// and, when a task's cue leads the prompt, to apply that task. Instruction
// tokens appear in pretraining only as leading noise that never changes the
// answer; specialization teaches the model to obey them.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wplab/model.hpp"
#include "wplab/slice.hpp"

namespace wplab {

enum class TaskKind : std::uint8_t { Upper = 0, Mirror = 1, Reverse = 2 };
inline constexpr int kTaskKinds = 3;

std::string_view task_name(TaskKind k);
TaskKind parse_task(std::string_view s);

struct Vocabulary {
  int n_content = 16;

  int half() const { return n_content / 2; }
  int sep() const { return n_content; }
  int instruction(TaskKind k) const { return n_content + 1 + static_cast<int>(k); }
  int cue(TaskKind k) const { return n_content + 1 + kTaskKinds + static_cast<int>(k); }
  int size() const { return n_content + 1 + 2 * kTaskKinds; }
  bool is_content(int t) const { return t >= 0 && t < n_content; }
  // Throws unless n_content is even, >= 2 and the model vocab holds every token.
  void validate(const ModelConfig& config) const;
};

struct ToyTask {
  TaskKind kind = TaskKind::Upper;
  int context_len = 4;
  int answer_len = 1;
  // Draw contexts from the lower half only (otherwise the full content range).
  bool lower_only = true;
};

/// Full transformed context: Upper shifts by half the content range (mod
/// n_content), Mirror reflects the letter within its half, Reverse reverses.
std::vector<int> apply_task(const Vocabulary& vocab, TaskKind kind, std::span<const int> ctx);

struct PairedExample {
  std::vector<int> x_r;     // [instruction, ctx..., sep]
  std::vector<int> x_cf;    // [ctx..., sep]
  std::vector<int> target;  // first answer_len tokens of apply_task(ctx)

  friend bool operator==(const PairedExample&, const PairedExample&) = default;
};

/// Contexts are partitioned once and for all: held-out contexts never appear
/// in training data.
enum class Split : std::uint8_t { Train, HeldOut };
bool is_held_out(std::span<const int> ctx);

/// n examples with distinct contexts from the requested split. Deterministic
/// in seed. Throws if the split holds fewer than n contexts.
std::vector<PairedExample> make_instruction_dataset(const Vocabulary& vocab, const ToyTask& task, std::size_t n,
                                                    std::uint64_t seed, Split split = Split::HeldOut);

struct DatasetHalves {
  std::vector<PairedExample> extraction;
  std::vector<PairedExample> evaluation;
};
/// First ceil(n/2) examples extract, the rest evaluate.
DatasetHalves split_halves(const std::vector<PairedExample>& data);

std::vector<std::vector<int>> instructed_inputs(std::span<const PairedExample> data);

/// Dataset dump, one JSON object per line: {"x_r":[..],"x_cf":[..],"target":[..]}.
std::string dataset_to_jsonl(std::span<const PairedExample> data);
std::vector<PairedExample> dataset_from_jsonl(const std::string& text);

// ---- training ----------------------------------------------------------------

struct TrainHyper {
  int steps = 600;
  int batch = 16;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  int threads = 1;
};

/// Which parameters specialization may change.
struct TrainingScope {
  enum class Mode : std::uint8_t {
    Components,    // only head/neuron slices (all of them unless `only` is set)
    Unrestricted,  // every tensor
  };
  Mode mode = Mode::Components;
  std::optional<std::vector<ComponentId>> only;
};

struct PairHyper {
  TrainHyper pretrain{1500, 16, 3e-3};
  TrainHyper specialize{400, 16, 2e-3};
  // Fraction of specialization examples that are uninstructed copies, which
  // keeps the specialized behavior conditional on the instruction.
  double copy_fraction = 0.5;
  std::uint64_t init_seed = 1;
};

struct TrainExample {
  std::vector<int> tokens;   // prompt followed by all but the last answer token
  std::vector<int> targets;  // next-token targets, -1 where unscored
};

/// Example emitting `answer` after `prompt`.
TrainExample make_train_example(std::span<const int> prompt, std::span<const int> answer);

/// Draws a batch of training examples for step `step`. Must be deterministic.
using BatchSource = std::function<std::vector<TrainExample>(int step, std::uint64_t seed)>;

/// Adam on mean token cross-entropy. `trainable` masks parameters elementwise
/// (nullptr: everything trains). Returns the per-step mean loss.
std::vector<double> train(ModelParams& params, const BatchSource& source, const TrainHyper& hyper,
                          const ModelParams* trainable = nullptr);

/// 1 where the scope allows updates, 0 elsewhere.
ModelParams scope_mask(const ModelConfig& config, const TrainingScope& scope);

/// Shared pretraining: copy on the full content range plus every task in
/// `cue_tasks` triggered by its cue token at the start of the prompt. Half of
/// all prompts get one ignored instruction token in front.
ModelParams pretrain_base(const ModelConfig& config, const Vocabulary& vocab, std::span<const TaskKind> cue_tasks,
                          const ToyTask& shape, const TrainHyper& hyper, std::uint64_t init_seed);

ModelParams specialize(const ModelParams& base, const Vocabulary& vocab, const ToyTask& task,
                       const TrainHyper& hyper, const TrainingScope& scope, double copy_fraction);

struct ModelPair {
  ModelParams base;
  ModelParams sft;
  double base_accuracy = 0.0;
  double sft_accuracy = 0.0;
  // sft_accuracy >= 0.95 and base_accuracy <= 0.1 on held-out prompts.
  bool converged = false;
  std::string summary() const;
};

ModelPair train_base_and_specialized(const ModelConfig& config, const Vocabulary& vocab, const ToyTask& task,
                                     const PairHyper& hyper, const TrainingScope& scope = {},
                                     std::size_t eval_examples = 200);

// ---- planting ----------------------------------------------------------------

struct PlantEntry {
  ComponentId component;
  double scale = 0.1;  // std of the Gaussian perturbation on every slice entry
};

struct PlantSpec {
  std::vector<PlantEntry> entries;
  std::uint64_t seed = 1;
};

/// Adds Gaussian noise on the named slices only. Throws on repeated or
/// overlapping components.
ModelParams plant_component_edits(const ModelParams& base, const PlantSpec& spec);

// ---- evaluation --------------------------------------------------------------

/// Strict greedy match of the whole answer, over the instructed prompts.
double task_accuracy(const RunFn& run, std::span<const PairedExample> data, int threads = 1);
double task_accuracy(const ModelParams& model, std::span<const PairedExample> data, int threads = 1);

/// Run builder for prompt-dependent interventions (steering): given the
/// prompt, returns the run used for every decoding step of that prompt.
using PromptRunFactory = std::function<RunFn(std::span<const int> prompt)>;
double task_accuracy(const PromptRunFactory& factory, std::span<const PairedExample> data, int threads = 1);

}  // namespace wplab
