// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Pre-norm decoder-only transformer (RMSNorm, RoPE, grouped-query attention,
// SwiGLU MLP) whose forward pass records every residual-stream write-back so
// heads and MLP neurons can be read, replaced and differentiated one at a
// time.

#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "wplab/autodiff.hpp"
#include "wplab/tensor.hpp"

namespace wplab {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 32;
  int n_heads = 4;
  int n_kv_heads = 2;
  int d_ff = 128;
  int vocab_size = 64;
  int max_seq_len = 32;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }
  int kv_group() const { return n_heads / n_kv_heads; }
  int kv_head_of(int head) const { return head / kv_group(); }
  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ComponentKind : std::uint8_t { Head = 0, Neuron = 1 };

/// A head H(l,h) or neuron N(l,j). `layer` is the 0-based block index.
/// Ordering is layer-major with heads before neurons.
struct ComponentId {
  int layer = 0;
  ComponentKind kind = ComponentKind::Head;
  int index = 0;

  static ComponentId head(int layer, int h) { return {layer, ComponentKind::Head, h}; }
  static ComponentId neuron(int layer, int j) { return {layer, ComponentKind::Neuron, j}; }
  bool is_head() const { return kind == ComponentKind::Head; }
  std::string str() const;

  friend auto operator<=>(const ComponentId&, const ComponentId&) = default;
};

std::string_view kind_name(ComponentKind kind);
ComponentKind parse_kind(std::string_view s);

std::vector<ComponentId> enumerate_components(const ModelConfig& config);
std::size_t component_count(const ModelConfig& config);
// Position of `c` in enumerate_components order; throws if out of range.
std::size_t component_ordinal(const ModelConfig& config, ComponentId c);
void validate_component(const ModelConfig& config, ComponentId c);

template <class T>
struct BasicLayerParams {
  BasicTensor<T> wq;        // d_model x n_heads*d_head
  BasicTensor<T> wk;        // d_model x n_kv_heads*d_head
  BasicTensor<T> wv;        // d_model x n_kv_heads*d_head
  BasicTensor<T> wo;        // n_heads*d_head x d_model
  BasicTensor<T> w_gate;    // d_model x d_ff
  BasicTensor<T> w_up;      // d_model x d_ff
  BasicTensor<T> w_down;    // d_ff x d_model
  BasicTensor<T> norms;     // 2 x d_model: attention gain, MLP gain

  friend bool operator==(const BasicLayerParams&, const BasicLayerParams&) = default;
};

inline constexpr std::string_view kLayerTensorSuffixes[] = {
    "wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "norms"};

template <class T>
struct BasicModelParams {
  ModelConfig config;
  BasicTensor<T> token_embedding;  // vocab x d_model
  std::vector<BasicLayerParams<T>> layers;
  BasicTensor<T> final_norm;       // d_model
  BasicTensor<T> lm_head;          // d_model x vocab

  /// Stable tensor directory: token_embedding, layers.{l}.{suffix}...,
  /// final_norm, lm_head.
  std::vector<std::string> tensor_names() const;
  const BasicTensor<T>& tensor(std::string_view name) const;
  BasicTensor<T>& tensor(std::string_view name);

  template <class F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }
  template <class F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }

  template <class U>
  BasicModelParams<U> cast() const {
    BasicModelParams<U> out;
    out.config = config;
    out.token_embedding = token_embedding.template cast<U>();
    for (const auto& lp : layers) {
      out.layers.push_back({lp.wq.template cast<U>(), lp.wk.template cast<U>(), lp.wv.template cast<U>(),
                            lp.wo.template cast<U>(), lp.w_gate.template cast<U>(),
                            lp.w_up.template cast<U>(), lp.w_down.template cast<U>(),
                            lp.norms.template cast<U>()});
    }
    out.final_norm = final_norm.template cast<U>();
    out.lm_head = lm_head.template cast<U>();
    return out;
  }

  friend bool operator==(const BasicModelParams&, const BasicModelParams&) = default;

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f(std::string("token_embedding"), self.token_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& lp = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "wq", lp.wq);
      f(p + "wk", lp.wk);
      f(p + "wv", lp.wv);
      f(p + "wo", lp.wo);
      f(p + "w_gate", lp.w_gate);
      f(p + "w_up", lp.w_up);
      f(p + "w_down", lp.w_down);
      f(p + "norms", lp.norms);
    }
    f(std::string("final_norm"), self.final_norm);
    f(std::string("lm_head"), self.lm_head);
  }
};

using ModelParams = BasicModelParams<float>;
using ModelParamsD = BasicModelParams<double>;

Shape expected_tensor_shape(const ModelConfig& config, std::string_view name);
std::size_t tensor_count(const ModelConfig& config);

// Throws if any tensor disagrees with the shapes implied by `config` or holds
// a non-finite value.
template <class T>
void validate_params(const BasicModelParams<T>& params);

/// Scaled-normal (std 0.02) weight matrices, unit norm gains. Deterministic in seed.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

/// Zero-filled parameters of the right shapes.
ModelParams zeros_like(const ModelConfig& config);

// ---- forward ---------------------------------------------------------------

/// Intervention points. Each hook receives the current value and returns the
/// value to continue the pass with (return the argument to leave it as is).
template <class T>
struct BasicForwardHooks {
  // Concatenated per-head outputs O(l,h), T x n_heads*d_head, before W_O.
  std::function<BasicVar<T>(int layer, BasicVar<T> head_outputs)> head_outputs;
  // SwiGLU hidden activations a(l,j), T x d_ff, before W_down.
  std::function<BasicVar<T>(int layer, BasicVar<T> hidden)> hidden;
  // Residual state Z_l after l blocks, 0 <= l <= n_layers.
  std::function<BasicVar<T>(int l, BasicVar<T> residual)> residual;

  bool empty() const { return !head_outputs && !hidden && !residual; }
};

enum class GradMode {
  kNone,         // nothing on the tape requires grad
  kActivations,  // intermediate activations carry gradients, parameters do not
  kParameters,   // parameters and activations
};

template <class T>
struct BasicForwardOptions {
  BasicForwardHooks<T> hooks;
  GradMode grad = GradMode::kNone;
  // Route this component's residual-stream input through a private copy so
  // its gradient reflects only the path through that component.
  std::optional<ComponentId> isolate_input;
  bool keep_attention = false;

  static BasicForwardOptions with_grad(GradMode mode) {
    BasicForwardOptions o;
    o.grad = mode;
    return o;
  }
};

template <class T>
struct BasicLayerTrace {
  BasicVar<T> attn_input;    // Norm(Z_{l-1})
  BasicVar<T> q;             // post-RoPE queries, T x n_heads*d_head
  BasicVar<T> k;             // post-RoPE keys, T x n_kv_heads*d_head
  BasicVar<T> v;
  BasicVar<T> head_outputs;  // after hooks
  BasicVar<T> attn_out;      // sum of head write-backs
  BasicVar<T> resid_mid;     // Z'_l
  BasicVar<T> mlp_input;     // Norm(Z'_l)
  BasicVar<T> gate_pre;
  BasicVar<T> up_pre;
  BasicVar<T> hidden;        // after hooks
  BasicVar<T> mlp_out;
  std::vector<BasicTensor<T>> attn_probs;  // per head, T x T (when kept)
};

template <class T>
class BasicTrace;

template <class T>
BasicTrace<T> forward(const BasicModelParams<T>& params, std::span<const int> tokens,
                      const BasicForwardOptions<T>& options = {});

/// Everything recorded by one forward pass. Holds references to the
/// parameters it was computed from; those must outlive the trace.
template <class T>
class BasicTrace {
 public:
  BasicTrace(const BasicModelParams<T>& params, std::vector<int> tokens);

  BasicTape<T>& tape() { return *tape_; }
  const BasicTape<T>& tape() const { return *tape_; }
  const BasicModelParams<T>& params() const { return *params_; }
  const std::vector<int>& tokens() const { return tokens_; }
  std::size_t length() const { return tokens_.size(); }
  int n_layers() const { return static_cast<int>(layers_.size()); }

  BasicVar<T> residual(int l) const { return residual_.at(static_cast<std::size_t>(l)); }
  const BasicTensor<T>& residual_value(int l) const { return residual(l).value(); }
  const BasicLayerTrace<T>& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
  BasicVar<T> logits() const { return logits_; }
  BasicVar<T> param(std::string_view name) const;
  // Parameter leaves in tensor-directory order.
  const std::vector<BasicVar<T>>& param_vars() const { return param_vars_; }
  std::optional<BasicVar<T>> isolated_input() const { return isolated_; }

  BasicTensor<T> head_output(int l, int h) const;        // T x d_head
  BasicTensor<T> neuron_activation(int l, int j) const;  // T

 private:
  template <class U>
  friend BasicTrace<U> forward(const BasicModelParams<U>&, std::span<const int>, const BasicForwardOptions<U>&);

  std::unique_ptr<BasicTape<T>> tape_;
  const BasicModelParams<T>* params_;
  std::vector<int> tokens_;
  std::vector<std::string> param_names_;
  std::vector<BasicVar<T>> param_vars_;
  std::vector<BasicVar<T>> residual_;
  std::vector<BasicLayerTrace<T>> layers_;
  BasicVar<T> logits_;
  std::optional<BasicVar<T>> isolated_;
};

using Trace = BasicTrace<float>;
using TraceD = BasicTrace<double>;
using ForwardOptions = BasicForwardOptions<float>;
using ForwardHooks = BasicForwardHooks<float>;

/// Anything that turns a token sequence into a trace: a plain model, a
/// patched model, an activation-intervened run.
using RunFn = std::function<Trace(std::span<const int> tokens)>;

RunFn plain_run(const ModelParams& params);

int argmax_last(const Trace& trace);

/// Greedy (argmax) continuation; ties go to the lowest token id.
std::vector<int> generate_greedy(const ModelParams& params, std::span<const int> prompt, int max_new);
std::vector<int> generate_greedy(const RunFn& run, std::span<const int> prompt, int max_new);

/// Residual input Psi_c(Z) of a component and its residual write-back dZ_c.
struct ComponentInterface {
  Tensor input;      // T x d_model
  Tensor writeback;  // T x d_model
};

ComponentInterface component_interface(const Trace& trace, ComponentId c);

}  // namespace wplab
