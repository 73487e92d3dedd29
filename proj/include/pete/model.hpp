#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pete/batch.hpp"
#include "pete/fourier.hpp"
#include "pete/tensor.hpp"

namespace pete {

enum class EmbeddingKind { kFourier, kLearned };

std::string to_string(EmbeddingKind kind);
EmbeddingKind embedding_kind_from_string(const std::string& name);

struct ModelConfig {
  int n_layers = 1;
  int n_heads = 1;
  int d_model = 256;
  // Hidden width factor of the per-layer GeGLU feed-forward blocks.
  double ffn_factor = 4.0;
  // Hidden width factor of the fourier embedding head's GeGLU block. Kept
  // separate from ffn_factor: the head is deliberately low-rank.
  double head_factor = 0.25;
  EmbeddingKind embedding_kind = EmbeddingKind::kFourier;
  int64_t vocab_size = 30522;
  double dropout_p = 0.0;
  int max_seq_len = 128;
  uint64_t seed = 0x5eedULL;

  int head_dim() const { return d_model / n_heads; }
  int ffn_hidden() const;
  int head_hidden() const;

  // Throws ConfigError on structural problems. Forces dropout_p to 0 for the
  // fourier embedding kind (the fourier model trains without dropout).
  void validate();

  EmbeddingConfig embedding() const { return {vocab_size, d_model}; }
};

// Encoder parameters. Fourier kind owns a small GeGLU head refining the
// deterministic base embedding; learned kind owns the V x d table instead.
struct Model {
  struct Layer {
    Tensor attn_gain;  // [d]
    Tensor wq, wk, wv, wo;  // [d, d] each
    Tensor ffn_gain;   // [d]
    Tensor ffn_wa, ffn_wb;  // [d, hidden]
    Tensor ffn_wout;        // [hidden, d]
  };

  ModelConfig cfg;

  // fourier embedding head (undefined tensors for learned kind)
  Tensor emb_gain;          // [d]
  Tensor emb_wa, emb_wb;    // [d, head_hidden]
  Tensor emb_wout;          // [head_hidden, d]
  // learned embedding table (undefined for fourier kind)
  Tensor table;  // [V, d]

  std::vector<Layer> layers;
  Tensor final_gain;   // [d]
  Tensor sent_proj;    // [d, d]; residual projection on the pooled vector
  Tensor logit_scale;  // rank-0 learnable temperature (log scale)

  // Parameters in checkpoint manifest order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  int64_t allocated_parameter_count() const;
  void zero_grad() const;
  void set_requires_grad(bool value) const;
};

// Deterministic initialization from the seed: linear weights are
// Normal(0, 0.02) truncated at +/-2 sigma, norm gains start at 1, the
// learned table is Normal(0, 0.02) and logit_scale at ln(1/0.07).
Model build_model(const ModelConfig& cfg, uint64_t seed);

// Closed-form parameter accounting, by component and total.
struct ParamCount {
  int64_t embedding = 0;    // head MLP + gain, or V*d table
  int64_t per_layer = 0;
  int64_t layers_total = 0;
  int64_t final_norm = 0;
  int64_t projection = 0;
  int64_t logit_scale = 0;
  int64_t total = 0;

  std::string report_text() const;
};

ParamCount param_count(const ModelConfig& cfg);

// Mutable forward-pass context. Default is inference: no dropout, no
// recording beyond what the active tape requests.
struct ForwardCtx {
  bool train = false;
  Rng* dropout_rng = nullptr;
};

// RMSNorm: x / sqrt(mean(x^2, last axis) + eps) * gain.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, Real eps = Real(1e-6));

// Rotary positional rotation of consecutive pairs of the last axis.
// x is [..., S, hd]; pair j at position m is rotated by
// theta = m * 10000^(-2j/hd). positions defaults to 0..S-1.
Tensor rotary_apply(const Tensor& x,
                    const std::vector<int64_t>& positions = {});

// Token embedding [B,S,d]. Fourier kind: GeGLU head over the fused base with
// a residual connection, E = T + MLP(T); gradient reaches the head only.
// Learned kind: table row lookup, gradient reaches the touched rows only.
Tensor embedding_forward(const TokenBatch& batch, const Model& model,
                         ForwardCtx& ctx);

// Pre-norm residual attention: x + Attn(RMSNorm(x)) with rotary q/k and
// masked scaled dot-product. mask is [B,S] with 1 = valid.
Tensor attention_block(const Tensor& x, const Tensor& mask,
                       const Model::Layer& layer, const ModelConfig& cfg,
                       ForwardCtx& ctx);

// Pre-norm residual GeGLU feed-forward: x + Wout(gelu(h Wa) * (h Wb)).
Tensor geglu_ffn(const Tensor& x, const Model::Layer& layer,
                 const ModelConfig& cfg, ForwardCtx& ctx);

// Full encoder: embedding, n_layers x (attention, ffn), final RMSNorm,
// masked mean pooling, residual sentence projection. Returns [B, d].
Tensor encode(const TokenBatch& batch, const Model& model, ForwardCtx ctx = {});

}  // namespace pete
