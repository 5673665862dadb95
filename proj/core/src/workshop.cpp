// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/workshop.hpp"

#include <cmath>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "wplab/parallel.hpp"

namespace wplab {

std::string_view task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Upper: return "upper";
    case TaskKind::Mirror: return "mirror";
    case TaskKind::Reverse: return "reverse";
  }
  return "?";
}

TaskKind parse_task(std::string_view s) {
  for (int k = 0; k < kTaskKinds; ++k) {
    if (task_name(static_cast<TaskKind>(k)) == s) return static_cast<TaskKind>(k);
  }
  throw std::invalid_argument("unknown task '" + std::string(s) + "' (expected upper, mirror or reverse)");
}

void Vocabulary::validate(const ModelConfig& config) const {
  if (n_content < 2 || n_content % 2 != 0) {
    throw std::invalid_argument("content vocabulary must be even and >= 2, got " + std::to_string(n_content));
  }
  if (size() > config.vocab_size) {
    throw std::invalid_argument("task vocabulary needs " + std::to_string(size()) + " tokens but the model has " +
                                std::to_string(config.vocab_size));
  }
}

std::vector<int> apply_task(const Vocabulary& vocab, TaskKind kind, std::span<const int> ctx) {
  std::vector<int> out(ctx.begin(), ctx.end());
  const int n = vocab.n_content, h = vocab.half();
  for (int t : ctx) {
    if (!vocab.is_content(t)) throw std::invalid_argument("apply_task: non-content token " + std::to_string(t));
  }
  switch (kind) {
    case TaskKind::Upper:
      for (auto& t : out) t = (t + h) % n;
      break;
    case TaskKind::Mirror:
      for (auto& t : out) t = (t / h) * h + (h - 1 - t % h);
      break;
    case TaskKind::Reverse:
      std::reverse(out.begin(), out.end());
      break;
  }
  return out;
}

bool is_held_out(std::span<const int> ctx) {
  std::uint64_t h = 1469598103934665603ULL;
  for (int t : ctx) {
    h ^= static_cast<std::uint64_t>(t) + 0x9e3779b97f4a7c15ULL;
    h *= 1099511628211ULL;
  }
  h ^= h >> 29;
  return h % 4 == 0;
}

namespace {

std::vector<int> sample_context(std::mt19937_64& rng, int alphabet, int len) {
  std::uniform_int_distribution<int> pick(0, alphabet - 1);
  std::vector<int> ctx(static_cast<std::size_t>(len));
  for (auto& t : ctx) t = pick(rng);
  return ctx;
}

std::vector<int> sample_split_context(std::mt19937_64& rng, int alphabet, int len, Split split) {
  for (;;) {
    auto ctx = sample_context(rng, alphabet, len);
    if (is_held_out(ctx) == (split == Split::HeldOut)) return ctx;
  }
}

PairedExample make_pair(const Vocabulary& vocab, const ToyTask& task, std::vector<int> ctx) {
  PairedExample ex;
  ex.x_cf = ctx;
  ex.x_cf.push_back(vocab.sep());
  ex.x_r.push_back(vocab.instruction(task.kind));
  ex.x_r.insert(ex.x_r.end(), ex.x_cf.begin(), ex.x_cf.end());
  auto full = apply_task(vocab, task.kind, ctx);
  ex.target.assign(full.begin(), full.begin() + task.answer_len);
  return ex;
}

void validate_task(const ToyTask& task) {
  if (task.context_len < 1) throw std::invalid_argument("task context length must be >= 1");
  if (task.answer_len < 1 || task.answer_len > task.context_len) {
    throw std::invalid_argument("task answer length must lie in [1, context length]");
  }
}

int task_alphabet(const Vocabulary& vocab, const ToyTask& task) {
  return task.lower_only ? vocab.half() : vocab.n_content;
}

}  // namespace

std::vector<PairedExample> make_instruction_dataset(const Vocabulary& vocab, const ToyTask& task, std::size_t n,
                                                    std::uint64_t seed, Split split) {
  validate_task(task);
  if (n < 1) throw std::invalid_argument("make_instruction_dataset: n must be >= 1");
  const int alphabet = task_alphabet(vocab, task);
  const double total = std::pow(static_cast<double>(alphabet), task.context_len);
  // Expected split share is 1/4 (held out) or 3/4 (train); leave slack.
  const double available = total * (split == Split::HeldOut ? 0.2 : 0.7);
  if (static_cast<double>(n) > available) {
    throw std::invalid_argument("make_instruction_dataset: cannot draw " + std::to_string(n) +
                                " distinct contexts from a pool of about " +
                                std::to_string(static_cast<long long>(available)));
  }
  std::mt19937_64 rng(seed);
  std::set<std::vector<int>> seen;
  std::vector<PairedExample> out;
  out.reserve(n);
  while (out.size() < n) {
    auto ctx = sample_split_context(rng, alphabet, task.context_len, split);
    if (!seen.insert(ctx).second) continue;
    out.push_back(make_pair(vocab, task, std::move(ctx)));
  }
  return out;
}

DatasetHalves split_halves(const std::vector<PairedExample>& data) {
  const std::size_t mid = (data.size() + 1) / 2;
  return {std::vector<PairedExample>(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(mid)),
          std::vector<PairedExample>(data.begin() + static_cast<std::ptrdiff_t>(mid), data.end())};
}

std::vector<std::vector<int>> instructed_inputs(std::span<const PairedExample> data) {
  std::vector<std::vector<int>> out;
  out.reserve(data.size());
  for (const auto& ex : data) out.push_back(ex.x_r);
  return out;
}

std::string dataset_to_jsonl(std::span<const PairedExample> data) {
  std::string out;
  for (const auto& ex : data) {
    nlohmann::json j = {{"x_r", ex.x_r}, {"x_cf", ex.x_cf}, {"target", ex.target}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<PairedExample> dataset_from_jsonl(const std::string& text) {
  std::vector<PairedExample> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("x_r").get<std::vector<int>>(), j.at("x_cf").get<std::vector<int>>(),
                     j.at("target").get<std::vector<int>>()});
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- training ------------------------------------------------------------------

TrainExample make_train_example(std::span<const int> prompt, std::span<const int> answer) {
  if (prompt.empty() || answer.empty()) throw std::invalid_argument("make_train_example: empty prompt or answer");
  TrainExample ex;
  ex.tokens.assign(prompt.begin(), prompt.end());
  ex.tokens.insert(ex.tokens.end(), answer.begin(), answer.end() - 1);
  ex.targets.assign(ex.tokens.size(), -1);
  for (std::size_t i = 0; i < answer.size(); ++i) ex.targets[prompt.size() - 1 + i] = answer[i];
  return ex;
}

std::vector<double> train(ModelParams& params, const BatchSource& source, const TrainHyper& hyper,
                          const ModelParams* trainable) {
  validate_params(params);
  if (hyper.steps < 0 || hyper.batch < 1) throw std::invalid_argument("train: steps must be >= 0 and batch >= 1");
  std::vector<Tensor*> tensors;
  params.for_each_tensor([&](const std::string&, Tensor& t) { tensors.push_back(&t); });
  std::vector<const Tensor*> masks;
  if (trainable) {
    if (!(trainable->config == params.config)) throw std::invalid_argument("train: mask config mismatch");
    trainable->for_each_tensor([&](const std::string&, const Tensor& t) { masks.push_back(&t); });
  }
  std::vector<std::vector<double>> m(tensors.size()), v(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    m[i].assign(tensors[i]->numel(), 0.0);
    v[i].assign(tensors[i]->numel(), 0.0);
  }

  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(hyper.steps));
  for (int step = 0; step < hyper.steps; ++step) {
    const auto batch = source(step, hyper.seed);
    if (batch.empty()) throw std::invalid_argument("train: empty batch");
    std::vector<std::vector<Tensor>> grads(batch.size());
    std::vector<double> batch_loss(batch.size());
    parallel_for(batch.size(), hyper.threads, [&](std::size_t b) {
      Trace tr = forward(params, batch[b].tokens, ForwardOptions::with_grad(GradMode::kParameters));
      Var loss = cross_entropy(tr.logits(), batch[b].targets);
      batch_loss[b] = loss.value().item();
      auto g = tr.tape().backward(loss);
      for (const auto& pv : tr.param_vars()) grads[b].push_back(g.get(pv));
    });
    double loss_sum = 0.0;
    for (double l : batch_loss) loss_sum += l;
    losses.push_back(loss_sum / static_cast<double>(batch.size()));

    const double t = step + 1;
    const double c1 = 1.0 - std::pow(hyper.beta1, t);
    const double c2 = 1.0 - std::pow(hyper.beta2, t);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      auto data = tensors[i]->data();
      for (std::size_t k = 0; k < data.size(); ++k) {
        if (!masks.empty() && (*masks[i])[k] == 0.0f) continue;
        double g = 0.0;
        for (std::size_t b = 0; b < batch.size(); ++b) g += grads[b][i][k];
        g *= inv_b;
        m[i][k] = hyper.beta1 * m[i][k] + (1.0 - hyper.beta1) * g;
        v[i][k] = hyper.beta2 * v[i][k] + (1.0 - hyper.beta2) * g * g;
        const double upd = hyper.lr * (m[i][k] / c1) / (std::sqrt(v[i][k] / c2) + hyper.adam_eps);
        data[k] = static_cast<float>(static_cast<double>(data[k]) - upd);
      }
    }
  }
  validate_params(params);
  return losses;
}

ModelParams scope_mask(const ModelConfig& config, const TrainingScope& scope) {
  ModelParams mask = zeros_like(config);
  if (scope.mode == TrainingScope::Mode::Unrestricted) {
    mask.for_each_tensor([](const std::string&, Tensor& t) {
      for (auto& x : t.data()) x = 1.0f;
    });
    return mask;
  }
  const auto comps = scope.only ? *scope.only : enumerate_components(config);
  for (const auto& c : comps) {
    for (const auto& r : component_slice(config, c).regions) {
      auto& t = layer_tensor(mask, r.layer, r.tensor);
      r.for_each_index(t.shape(), [&](std::size_t i) { t[i] = 1.0f; });
    }
  }
  return mask;
}

ModelParams pretrain_base(const ModelConfig& config, const Vocabulary& vocab, std::span<const TaskKind> cue_tasks,
                          const ToyTask& shape, const TrainHyper& hyper, std::uint64_t init_seed) {
  vocab.validate(config);
  validate_task(shape);
  ModelParams params = init_model(config, init_seed);
  const std::vector<TaskKind> cues(cue_tasks.begin(), cue_tasks.end());
  BatchSource source = [&](int step, std::uint64_t seed) {
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(step));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<TrainExample> batch;
    for (int b = 0; b < hyper.batch; ++b) {
      auto ctx = sample_split_context(rng, vocab.n_content, shape.context_len, Split::Train);
      std::vector<int> prompt = ctx;
      prompt.push_back(vocab.sep());
      std::vector<int> answer;
      const double r = u(rng);
      if (cues.empty() || r < 0.5) {
        answer = ctx;
      } else {
        const auto k = cues[std::min(cues.size() - 1, static_cast<std::size_t>((r - 0.5) * 2.0 * cues.size()))];
        prompt.insert(prompt.begin(), vocab.cue(k));
        answer = apply_task(vocab, k, ctx);
      }
      answer.resize(static_cast<std::size_t>(shape.answer_len));
      if (u(rng) < 0.5) {
        const int k = std::min(kTaskKinds - 1, static_cast<int>(u(rng) * kTaskKinds));
        prompt.insert(prompt.begin(), vocab.instruction(static_cast<TaskKind>(k)));
      }
      batch.push_back(make_train_example(prompt, answer));
    }
    return batch;
  };
  train(params, source, hyper);
  return params;
}

ModelParams specialize(const ModelParams& base, const Vocabulary& vocab, const ToyTask& task,
                       const TrainHyper& hyper, const TrainingScope& scope, double copy_fraction) {
  vocab.validate(base.config);
  validate_task(task);
  if (copy_fraction < 0.0 || copy_fraction >= 1.0) throw std::invalid_argument("copy_fraction must lie in [0, 1)");
  ModelParams params = base;
  const ModelParams mask = scope_mask(base.config, scope);
  const int alphabet = task_alphabet(vocab, task);
  BatchSource source = [&](int step, std::uint64_t seed) {
    std::mt19937_64 rng(seed * 0xbf58476d1ce4e5b9ULL + static_cast<std::uint64_t>(step) + 17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<TrainExample> batch;
    for (int b = 0; b < hyper.batch; ++b) {
      if (u(rng) < copy_fraction) {
        auto ctx = sample_split_context(rng, vocab.n_content, task.context_len, Split::Train);
        std::vector<int> prompt = ctx;
        prompt.push_back(vocab.sep());
        ctx.resize(static_cast<std::size_t>(task.answer_len));
        batch.push_back(make_train_example(prompt, ctx));
      } else {
        auto ex = make_pair(vocab, task, sample_split_context(rng, alphabet, task.context_len, Split::Train));
        batch.push_back(make_train_example(ex.x_r, ex.target));
      }
    }
    return batch;
  };
  if (hyper.steps > 0) train(params, source, hyper, &mask);
  return params;
}

std::string ModelPair::summary() const {
  std::ostringstream os;
  os << "base accuracy " << base_accuracy << ", specialized accuracy " << sft_accuracy
     << (converged ? "" : " (did not reach >= 0.95 specialized and <= 0.1 base)");
  return os.str();
}

ModelPair train_base_and_specialized(const ModelConfig& config, const Vocabulary& vocab, const ToyTask& task,
                                     const PairHyper& hyper, const TrainingScope& scope, std::size_t eval_examples) {
  std::vector<TaskKind> cues;
  for (int k = 0; k < kTaskKinds; ++k) cues.push_back(static_cast<TaskKind>(k));
  ModelPair pair;
  pair.base = pretrain_base(config, vocab, cues, task, hyper.pretrain, hyper.init_seed);
  pair.sft = specialize(pair.base, vocab, task, hyper.specialize, scope, hyper.copy_fraction);
  const auto eval = make_instruction_dataset(vocab, task, eval_examples, hyper.init_seed + 7919, Split::HeldOut);
  pair.base_accuracy = task_accuracy(pair.base, eval, hyper.pretrain.threads);
  pair.sft_accuracy = task_accuracy(pair.sft, eval, hyper.pretrain.threads);
  pair.converged = pair.sft_accuracy >= 0.95 && pair.base_accuracy <= 0.1;
  return pair;
}

ModelParams plant_component_edits(const ModelParams& base, const PlantSpec& spec) {
  validate_params(base);
  std::vector<ParamSlice> slices;
  for (const auto& e : spec.entries) {
    if (!(e.scale >= 0.0) || !std::isfinite(e.scale)) {
      throw std::invalid_argument("plant scale must be finite and >= 0 for " + e.component.str());
    }
    ParamSlice s = component_slice(base.config, e.component);
    for (const auto& prev : slices) {
      for (const auto& a : prev.regions) {
        for (const auto& b : s.regions) {
          if (a.overlaps(b)) {
            throw std::invalid_argument("plant: slices of " + prev.component.str() + " and " + e.component.str() +
                                        " overlap");
          }
        }
      }
    }
    slices.push_back(std::move(s));
  }
  ModelParams out = base;
  std::mt19937_64 rng(spec.seed);
  for (std::size_t i = 0; i < slices.size(); ++i) {
    std::normal_distribution<double> nd(0.0, spec.entries[i].scale);
    for (const auto& r : slices[i].regions) {
      auto& t = layer_tensor(out, r.layer, r.tensor);
      r.for_each_index(t.shape(), [&](std::size_t k) { t[k] = static_cast<float>(t[k] + nd(rng)); });
    }
  }
  return out;
}

double task_accuracy(const PromptRunFactory& factory, std::span<const PairedExample> data, int threads) {
  if (data.empty()) return 0.0;
  std::vector<char> ok(data.size(), 0);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto& ex = data[i];
    auto seq = generate_greedy(factory(ex.x_r), ex.x_r, static_cast<int>(ex.target.size()));
    ok[i] = std::equal(ex.target.begin(), ex.target.end(), seq.begin() + static_cast<std::ptrdiff_t>(ex.x_r.size()));
  });
  std::size_t hits = 0;
  for (char c : ok) hits += c ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

double task_accuracy(const RunFn& run, std::span<const PairedExample> data, int threads) {
  return task_accuracy([&](std::span<const int>) { return run; }, data, threads);
}

double task_accuracy(const ModelParams& model, std::span<const PairedExample> data, int threads) {
  return task_accuracy(plain_run(model), data, threads);
}

}  // namespace wplab
