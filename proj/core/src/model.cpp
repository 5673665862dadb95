// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace wplab {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid model config: " + what); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 1) fail("d_model must be >= 1");
  if (n_heads < 1 || n_kv_heads < 1) fail("head counts must be >= 1");
  if (n_heads % n_kv_heads != 0) fail("n_heads must be a multiple of n_kv_heads");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("head dim must be even for rotary embeddings");
  if (d_ff < 1) fail("d_ff must be >= 1");
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (max_seq_len < 1) fail("max_seq_len must be >= 1");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
  if (!(rope_base > 1.0)) fail("rope_base must exceed 1");
}

std::string_view kind_name(ComponentKind kind) { return kind == ComponentKind::Head ? "head" : "neuron"; }

ComponentKind parse_kind(std::string_view s) {
  if (s == "head") return ComponentKind::Head;
  if (s == "neuron") return ComponentKind::Neuron;
  throw std::invalid_argument("unknown component kind '" + std::string(s) + "'");
}

std::string ComponentId::str() const {
  return std::string(is_head() ? "H(" : "N(") + std::to_string(layer) + "," + std::to_string(index) + ")";
}

std::vector<ComponentId> enumerate_components(const ModelConfig& config) {
  std::vector<ComponentId> out;
  out.reserve(component_count(config));
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) out.push_back(ComponentId::head(l, h));
    for (int j = 0; j < config.d_ff; ++j) out.push_back(ComponentId::neuron(l, j));
  }
  return out;
}

std::size_t component_count(const ModelConfig& config) {
  return static_cast<std::size_t>(config.n_layers) * static_cast<std::size_t>(config.n_heads + config.d_ff);
}

void validate_component(const ModelConfig& config, ComponentId c) {
  const int limit = c.is_head() ? config.n_heads : config.d_ff;
  if (c.layer < 0 || c.layer >= config.n_layers || c.index < 0 || c.index >= limit) {
    throw std::out_of_range("component " + c.str() + " outside model");
  }
}

std::size_t component_ordinal(const ModelConfig& config, ComponentId c) {
  validate_component(config, c);
  const std::size_t per_layer = static_cast<std::size_t>(config.n_heads + config.d_ff);
  std::size_t base = static_cast<std::size_t>(c.layer) * per_layer;
  return c.is_head() ? base + static_cast<std::size_t>(c.index)
                     : base + static_cast<std::size_t>(config.n_heads + c.index);
}

std::size_t tensor_count(const ModelConfig& config) {
  return 3 + std::size(kLayerTensorSuffixes) * static_cast<std::size_t>(config.n_layers);
}

Shape expected_tensor_shape(const ModelConfig& c, std::string_view name) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const auto ff = static_cast<std::size_t>(c.d_ff);
  const auto qw = static_cast<std::size_t>(c.n_heads * c.head_dim());
  const auto kw = static_cast<std::size_t>(c.n_kv_heads * c.head_dim());
  if (name == "token_embedding") return {v, d};
  if (name == "final_norm") return {d};
  if (name == "lm_head") return {d, v};
  if (name.starts_with("layers.")) {
    const auto dot = name.find('.', 7);
    if (dot != std::string_view::npos) {
      int layer = -1;
      try {
        layer = std::stoi(std::string(name.substr(7, dot - 7)));
      } catch (const std::exception&) {
      }
      const auto suffix = name.substr(dot + 1);
      if (layer >= 0 && layer < c.n_layers) {
        if (suffix == "wq") return {d, qw};
        if (suffix == "wk" || suffix == "wv") return {d, kw};
        if (suffix == "wo") return {qw, d};
        if (suffix == "w_gate" || suffix == "w_up") return {d, ff};
        if (suffix == "w_down") return {ff, d};
        if (suffix == "norms") return {2, d};
      }
    }
  }
  throw std::out_of_range("unknown tensor name '" + std::string(name) + "'");
}

template <class T>
std::vector<std::string> BasicModelParams<T>::tensor_names() const {
  std::vector<std::string> names;
  for_each_tensor([&](const std::string& n, const BasicTensor<T>&) { names.push_back(n); });
  return names;
}

template <class T>
const BasicTensor<T>& BasicModelParams<T>::tensor(std::string_view name) const {
  const BasicTensor<T>* found = nullptr;
  for_each_tensor([&](const std::string& n, const BasicTensor<T>& t) {
    if (!found && n == name) found = &t;
  });
  if (!found) throw std::out_of_range("unknown tensor name '" + std::string(name) + "'");
  return *found;
}

template <class T>
BasicTensor<T>& BasicModelParams<T>::tensor(std::string_view name) {
  return const_cast<BasicTensor<T>&>(std::as_const(*this).tensor(name));
}

template <class T>
void validate_params(const BasicModelParams<T>& params) {
  params.config.validate();
  if (params.layers.size() != static_cast<std::size_t>(params.config.n_layers)) {
    throw ShapeError("layer count " + std::to_string(params.layers.size()) + " != config n_layers " +
                     std::to_string(params.config.n_layers));
  }
  params.for_each_tensor([&](const std::string& name, const BasicTensor<T>& t) {
    const Shape want = expected_tensor_shape(params.config, name);
    if (t.shape() != want) {
      throw ShapeError("tensor " + name + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(want));
    }
    if (!t.all_finite()) throw NonFiniteError("tensor " + name + " holds non-finite values");
  });
}

ModelParams zeros_like(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  p.for_each_tensor([&](const std::string& name, Tensor& t) { t = Tensor(expected_tensor_shape(config, name)); });
  return p;
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = zeros_like(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  p.for_each_tensor([&](const std::string& name, Tensor& t) {
    if (t.rank() == 1 || name.ends_with(".norms")) {
      for (auto& v : t.data()) v = 1.0f;
    } else {
      for (auto& v : t.data()) v = static_cast<float>(normal(rng));
    }
  });
  return p;
}

// ---- trace -------------------------------------------------------------------

template <class T>
BasicTrace<T>::BasicTrace(const BasicModelParams<T>& params, std::vector<int> tokens)
    : tape_(std::make_unique<BasicTape<T>>()), params_(&params), tokens_(std::move(tokens)) {}

template <class T>
BasicVar<T> BasicTrace<T>::param(std::string_view name) const {
  for (std::size_t i = 0; i < param_names_.size(); ++i) {
    if (param_names_[i] == name) return param_vars_[i];
  }
  throw std::out_of_range("trace has no parameter '" + std::string(name) + "'");
}

template <class T>
BasicTensor<T> BasicTrace<T>::head_output(int l, int h) const {
  const auto& O = layer(l).head_outputs.value();
  const auto dk = static_cast<std::size_t>(params_->config.head_dim());
  BasicTensor<T> out({O.rows(), dk});
  for (std::size_t t = 0; t < O.rows(); ++t) {
    for (std::size_t i = 0; i < dk; ++i) out(t, i) = O(t, static_cast<std::size_t>(h) * dk + i);
  }
  return out;
}

template <class T>
BasicTensor<T> BasicTrace<T>::neuron_activation(int l, int j) const {
  const auto& A = layer(l).hidden.value();
  BasicTensor<T> out({A.rows()});
  for (std::size_t t = 0; t < A.rows(); ++t) out[t] = A(t, static_cast<std::size_t>(j));
  return out;
}

template <class T>
BasicTrace<T> forward(const BasicModelParams<T>& params, std::span<const int> tokens,
                      const BasicForwardOptions<T>& options) {
  const ModelConfig& cfg = params.config;
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw std::out_of_range("forward: token " + std::to_string(t) + " outside vocab of " +
                              std::to_string(cfg.vocab_size));
    }
  }
  if (options.isolate_input) validate_component(cfg, *options.isolate_input);

  BasicTrace<T> tr(params, std::vector<int>(tokens.begin(), tokens.end()));
  BasicTape<T>& tape = *tr.tape_;
  const bool param_grads = options.grad == GradMode::kParameters;
  params.for_each_tensor([&](const std::string& name, const BasicTensor<T>& t) {
    const bool rg = param_grads || (options.grad == GradMode::kActivations && name == "token_embedding");
    tr.param_names_.push_back(name);
    tr.param_vars_.push_back(tape.borrow(t, rg));
  });
  std::size_t pi = 0;
  auto next_param = [&] { return tr.param_vars_[pi++]; };

  const std::size_t n = tokens.size();
  const auto dk = static_cast<std::size_t>(cfg.head_dim());
  const double eps = cfg.norm_eps;
  const BasicTensor<T> mask = causal_mask<T>(n);
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const auto& hooks = options.hooks;

  BasicVar<T> emb = next_param();
  BasicVar<T> z = embedding(emb, tokens);
  if (hooks.residual) z = hooks.residual(0, z);
  tr.residual_.push_back(z);

  for (int l = 0; l < cfg.n_layers; ++l) {
    BasicVar<T> wq = next_param(), wk = next_param(), wv = next_param(), wo = next_param();
    BasicVar<T> wg = next_param(), wu = next_param(), wd = next_param();
    BasicVar<T> norms = next_param();
    BasicVar<T> attn_norm = row(norms, 0), mlp_norm = row(norms, 1);
    BasicLayerTrace<T> lt;

    const bool iso_head = options.isolate_input && options.isolate_input->layer == l &&
                          options.isolate_input->is_head();
    const bool iso_neuron = options.isolate_input && options.isolate_input->layer == l &&
                            !options.isolate_input->is_head();

    lt.attn_input = rmsnorm(z, attn_norm, eps);
    BasicVar<T> q = matmul(lt.attn_input, wq);
    BasicVar<T> k = matmul(lt.attn_input, wk);
    BasicVar<T> v = matmul(lt.attn_input, wv);
    BasicVar<T> iso_k, iso_v;
    int iso_h = -1;
    if (iso_head) {
      iso_h = options.isolate_input->index;
      const auto g = static_cast<std::size_t>(cfg.kv_head_of(iso_h));
      BasicVar<T> xi = identity(lt.attn_input);
      tr.isolated_ = xi;
      BasicVar<T> qh = matmul(xi, slice_cols(wq, static_cast<std::size_t>(iso_h) * dk, dk));
      q = splice_cols(q, static_cast<std::size_t>(iso_h) * dk, qh);
      iso_k = rope(matmul(xi, slice_cols(wk, g * dk, dk)), dk, cfg.rope_base);
      iso_v = matmul(xi, slice_cols(wv, g * dk, dk));
    }
    lt.q = rope(q, dk, cfg.rope_base);
    lt.k = rope(k, dk, cfg.rope_base);
    lt.v = v;

    std::vector<BasicVar<T>> heads;
    heads.reserve(static_cast<std::size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto g = static_cast<std::size_t>(cfg.kv_head_of(h));
      BasicVar<T> qh = slice_cols(lt.q, static_cast<std::size_t>(h) * dk, dk);
      BasicVar<T> kg = h == iso_h ? iso_k : slice_cols(lt.k, g * dk, dk);
      BasicVar<T> vg = h == iso_h ? iso_v : slice_cols(lt.v, g * dk, dk);
      BasicVar<T> probs = softmax_rows(scale(matmul_bt(qh, kg), score_scale), &mask);
      if (options.keep_attention) lt.attn_probs.push_back(probs.value());
      heads.push_back(matmul(probs, vg));
    }
    lt.head_outputs = concat_cols<T>(heads);
    if (hooks.head_outputs) lt.head_outputs = hooks.head_outputs(l, lt.head_outputs);
    lt.attn_out = matmul(lt.head_outputs, wo);
    lt.resid_mid = add(z, lt.attn_out);

    lt.mlp_input = rmsnorm(lt.resid_mid, mlp_norm, eps);
    lt.gate_pre = matmul(lt.mlp_input, wg);
    lt.up_pre = matmul(lt.mlp_input, wu);
    if (iso_neuron) {
      const auto j = static_cast<std::size_t>(options.isolate_input->index);
      BasicVar<T> xi = identity(lt.mlp_input);
      tr.isolated_ = xi;
      lt.gate_pre = splice_cols(lt.gate_pre, j, matmul(xi, slice_cols(wg, j, 1)));
      lt.up_pre = splice_cols(lt.up_pre, j, matmul(xi, slice_cols(wu, j, 1)));
    }
    lt.hidden = mul(silu(lt.gate_pre), lt.up_pre);
    if (hooks.hidden) lt.hidden = hooks.hidden(l, lt.hidden);
    lt.mlp_out = matmul(lt.hidden, wd);
    z = add(lt.resid_mid, lt.mlp_out);
    if (hooks.residual) z = hooks.residual(l + 1, z);
    tr.residual_.push_back(z);
    tr.layers_.push_back(std::move(lt));
  }

  BasicVar<T> final_norm = next_param();
  BasicVar<T> lm_head = next_param();
  tr.logits_ = matmul(rmsnorm(z, final_norm, eps), lm_head);
  return tr;
}

RunFn plain_run(const ModelParams& params) {
  return [&params](std::span<const int> tokens) { return forward(params, tokens); };
}

int argmax_last(const Trace& trace) {
  const auto& logits = trace.logits().value();
  const auto last = logits.row(logits.rows() - 1);
  int best = 0;
  for (std::size_t j = 1; j < last.size(); ++j) {
    if (last[j] > last[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  }
  return best;
}

std::vector<int> generate_greedy(const RunFn& run, std::span<const int> prompt, int max_new) {
  if (prompt.empty()) throw std::invalid_argument("generate_greedy: empty prompt");
  std::vector<int> seq(prompt.begin(), prompt.end());
  for (int i = 0; i < max_new; ++i) seq.push_back(argmax_last(run(seq)));
  return seq;
}

std::vector<int> generate_greedy(const ModelParams& params, std::span<const int> prompt, int max_new) {
  return generate_greedy(plain_run(params), prompt, max_new);
}

ComponentInterface component_interface(const Trace& trace, ComponentId c) {
  const auto& p = trace.params();
  validate_component(p.config, c);
  const auto& lt = trace.layer(c.layer);
  const auto d = static_cast<std::size_t>(p.config.d_model);
  const auto n = trace.length();
  ComponentInterface out;
  out.writeback = Tensor({n, d});
  if (c.is_head()) {
    out.input = lt.attn_input.value();
    const auto dk = static_cast<std::size_t>(p.config.head_dim());
    const auto off = static_cast<std::size_t>(c.index) * dk;
    const auto& O = lt.head_outputs.value();
    const auto& wo = p.layers[static_cast<std::size_t>(c.layer)].wo;
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < dk; ++i) s += static_cast<double>(O(t, off + i)) * wo(off + i, j);
        out.writeback(t, j) = static_cast<float>(s);
      }
    }
  } else {
    out.input = lt.mlp_input.value();
    const auto j = static_cast<std::size_t>(c.index);
    const auto& A = lt.hidden.value();
    const auto& wd = p.layers[static_cast<std::size_t>(c.layer)].w_down;
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t e = 0; e < d; ++e) out.writeback(t, e) = static_cast<float>(static_cast<double>(A(t, j)) * wd(j, e));
    }
  }
  return out;
}

template struct BasicModelParams<float>;
template struct BasicModelParams<double>;
template void validate_params(const BasicModelParams<float>&);
template void validate_params(const BasicModelParams<double>&);
template class BasicTrace<float>;
template class BasicTrace<double>;
template BasicTrace<float> forward(const BasicModelParams<float>&, std::span<const int>,
                                   const BasicForwardOptions<float>&);
template BasicTrace<double> forward(const BasicModelParams<double>&, std::span<const int>,
                                    const BasicForwardOptions<double>&);

}  // namespace wplab
