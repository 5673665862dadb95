// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/fusion.hpp"

#include <cmath>
#include <stdexcept>

#include "wplab/parallel.hpp"

namespace wplab {

std::vector<double> truncate_scores(std::span<const double> scores) {
  std::vector<double> out;
  out.reserve(scores.size());
  for (double s : scores) {
    if (std::isnan(s)) throw std::invalid_argument("truncate_scores: NaN score");
    out.push_back(s > 0.0 ? s : 0.0);
  }
  return out;
}

ScoreTable truncate_scores(const ScoreTable& table) {
  ScoreTable out = table;
  for (auto& [c, s] : out.scores) {
    if (std::isnan(s)) throw std::invalid_argument("truncate_scores: NaN score for " + c.str());
    if (!(s > 0.0)) s = 0.0;
  }
  out.meta["truncated"] = "relu";
  return out;
}

std::vector<double> fusion_weights(std::span<const double> truncated) {
  if (truncated.empty()) throw std::invalid_argument("fusion_weights: no experts");
  double sum = 0.0;
  for (double s : truncated) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw std::invalid_argument("fusion_weights: scores must be truncated and finite");
    sum += s;
  }
  const auto k = static_cast<double>(truncated.size());
  std::vector<double> out(truncated.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sum > 0.0 ? truncated[i] / sum : 1.0 / k;
  return out;
}

FusionWeights fusion_weights(std::span<const ScoreTable> expert_scores, const ModelConfig& config) {
  if (expert_scores.empty()) throw std::invalid_argument("fusion_weights: no experts");
  FusionWeights out;
  std::vector<double> raw(expert_scores.size());
  for (const auto& c : enumerate_components(config)) {
    for (std::size_t k = 0; k < expert_scores.size(); ++k) raw[k] = expert_scores[k].at(c);
    out[c] = fusion_weights(truncate_scores(raw));
  }
  return out;
}

namespace {

void fuse_region(const SliceRegion& r, const ModelParams& base, std::span<const ModelParams* const> experts,
                 std::span<const double> alpha, ModelParams& out) {
  const Tensor& b = layer_tensor(base, r.layer, r.tensor);
  Tensor& o = layer_tensor(out, r.layer, r.tensor);
  std::vector<const Tensor*> e;
  e.reserve(experts.size());
  for (const auto* m : experts) {
    const Tensor& t = layer_tensor(*m, r.layer, r.tensor);
    if (t.shape() != b.shape()) throw ShapeError("fuse: expert " + r.tensor_name() + " differs in shape from the base");
    e.push_back(&t);
  }
  if (o.shape() != b.shape()) throw ShapeError("fuse: output " + r.tensor_name() + " differs in shape from the base");
  r.for_each_index(b.shape(), [&](std::size_t i) {
    const double bi = b[i];
    double acc = bi;
    for (std::size_t k = 0; k < e.size(); ++k) acc += alpha[k] * (static_cast<double>((*e[k])[i]) - bi);
    o[i] = static_cast<float>(acc);
  });
}

void require_alpha(std::span<const ModelParams* const> experts, std::span<const double> alpha) {
  if (experts.empty()) throw std::invalid_argument("fuse: no experts");
  if (alpha.size() != experts.size()) throw std::invalid_argument("fuse: one weight per expert required");
}

}  // namespace

void fuse_component_slice(const ParamSlice& slice, const ModelParams& base,
                          std::span<const ModelParams* const> experts, std::span<const double> alpha,
                          ModelParams& out) {
  require_alpha(experts, alpha);
  for (const auto& r : slice.regions) fuse_region(r, base, experts, alpha, out);
}

std::vector<double> gqa_kv_weights(const FusionWeights& weights, const ModelConfig& config, int layer, int group) {
  if (group < 0 || group >= config.n_kv_heads) throw std::out_of_range("gqa_kv_weights: KV group out of range");
  const int size = config.kv_group();
  std::vector<double> out;
  for (int h = group * size; h < (group + 1) * size; ++h) {
    const auto& a = weights.at(ComponentId::head(layer, h));
    if (out.empty()) out.assign(a.size(), 0.0);
    if (a.size() != out.size()) throw std::invalid_argument("gqa_kv_weights: heads disagree on the expert count");
    for (std::size_t k = 0; k < a.size(); ++k) out[k] += a[k];
  }
  for (auto& v : out) v /= static_cast<double>(size);
  return out;
}

bool reconcilable(const ModelConfig& base, const ModelConfig& expert) {
  ModelConfig e = expert;
  e.vocab_size = base.vocab_size;
  return e == base && expert.vocab_size >= base.vocab_size;
}

namespace {

void require_reconcilable(const ModelParams& base, std::span<const ModelParams> experts) {
  if (experts.empty()) throw std::invalid_argument("fuse: no experts");
  for (const auto& e : experts) {
    if (!reconcilable(base.config, e.config)) {
      throw std::invalid_argument("fuse: expert config differs from the base beyond a larger vocabulary");
    }
  }
}

// out[i] = mean_k t_k[map(i)], where t_k is the same tensor in expert k and
// `map` drops the extra vocabulary rows or columns.
void average_into(Tensor& out, const std::vector<const Tensor*>& parts, bool vocab_cols) {
  const std::size_t rows = out.rank() == 2 ? out.rows() : 1;
  const std::size_t cols = out.rank() == 2 ? out.cols() : out.numel();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (const auto* t : parts) {
        const std::size_t tc = t->rank() == 2 ? t->cols() : t->numel();
        acc += (*t)[r * (vocab_cols ? tc : cols) + c];
      }
      out[r * cols + c] = static_cast<float>(acc / static_cast<double>(parts.size()));
    }
  }
}

void average_fallback(const ModelParams& base, std::span<const ModelParams> experts, ModelParams& out) {
  auto gather = [&](auto&& pick) {
    std::vector<const Tensor*> parts;
    for (const auto& e : experts) parts.push_back(&pick(e));
    return parts;
  };
  average_into(out.token_embedding, gather([](const ModelParams& m) -> const Tensor& { return m.token_embedding; }), false);
  average_into(out.final_norm, gather([](const ModelParams& m) -> const Tensor& { return m.final_norm; }), false);
  average_into(out.lm_head, gather([](const ModelParams& m) -> const Tensor& { return m.lm_head; }), true);
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    average_into(out.layers[l].norms,
                 gather([l](const ModelParams& m) -> const Tensor& { return m.layers[l].norms; }), false);
  }
}

}  // namespace

ModelParams fuse_fallback_params(const ModelParams& base, std::span<const ModelParams> experts) {
  require_reconcilable(base, experts);
  ModelParams out = base;
  average_fallback(base, experts, out);
  return out;
}

ModelParams fuse_models(const ModelParams& base, std::span<const ModelParams> experts,
                        std::span<const ScoreTable> expert_scores, int threads) {
  require_reconcilable(base, experts);
  if (expert_scores.size() != experts.size()) throw std::invalid_argument("fuse_models: one score table per expert");
  const auto& cfg = base.config;
  const FusionWeights alpha = fusion_weights(expert_scores, cfg);
  std::vector<const ModelParams*> ptrs;
  for (const auto& e : experts) ptrs.push_back(&e);

  ModelParams out = base;
  average_fallback(base, experts, out);
  const auto dk = static_cast<std::size_t>(cfg.head_dim());
  parallel_for(static_cast<std::size_t>(cfg.n_layers), threads, [&](std::size_t li) {
    const int l = static_cast<int>(li);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const ComponentId c = ComponentId::head(l, h);
      fuse_component_slice(component_slice(cfg, c), base, ptrs, alpha.at(c), out);
    }
    for (int j = 0; j < cfg.d_ff; ++j) {
      const ComponentId c = ComponentId::neuron(l, j);
      fuse_component_slice(component_slice(cfg, c), base, ptrs, alpha.at(c), out);
    }
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      const auto a = gqa_kv_weights(alpha, cfg, l, g);
      const auto start = static_cast<std::size_t>(g) * dk;
      fuse_region({l, LayerTensor::Wk, SliceAxis::Cols, start, dk}, base, ptrs, a, out);
      fuse_region({l, LayerTensor::Wv, SliceAxis::Cols, start, dk}, base, ptrs, a, out);
    }
  });
  validate_params(out);
  return out;
}

ModelParams uniform_average(const ModelParams& base, std::span<const ModelParams> experts) {
  require_reconcilable(base, experts);
  ModelParams out = base;
  std::vector<std::vector<const Tensor*>> parts;
  for (const auto& e : experts) {
    std::size_t i = 0;
    e.for_each_tensor([&](const std::string&, const Tensor& t) {
      if (parts.size() <= i) parts.emplace_back();
      parts[i++].push_back(&t);
    });
  }
  std::size_t i = 0;
  out.for_each_tensor([&](const std::string& name, Tensor& t) { average_into(t, parts[i++], name == "lm_head"); });
  return out;
}

}  // namespace wplab
