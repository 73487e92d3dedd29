#include "pete/model.hpp"

#include <cmath>
#include <sstream>

namespace pete {

namespace {

int hidden_width(int d_model, double factor) {
  const auto h = static_cast<int>(std::llround(d_model * factor));
  return h < 1 ? 1 : h;
}

Tensor init_linear(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.data()) {
    v = static_cast<Real>(rng.truncated_normal(0.02));
  }
  return t;
}

// Flattens [B,S,d] to [B*S,d], applies a 2-D matmul, restores the batch
// shape.
Tensor project(const Tensor& x, const Tensor& w) {
  const auto& s = x.shape();
  Tensor flat = reshape(x, {s[0] * s[1], s[2]});
  Tensor y = matmul(flat, w);
  return reshape(y, {s[0], s[1], w.shape()[1]});
}

}  // namespace

std::string to_string(EmbeddingKind kind) {
  return kind == EmbeddingKind::kFourier ? "fourier" : "learned";
}

EmbeddingKind embedding_kind_from_string(const std::string& name) {
  if (name == "fourier") return EmbeddingKind::kFourier;
  if (name == "learned") return EmbeddingKind::kLearned;
  throw ConfigError("unknown embedding kind '" + name +
                    "' (expected fourier or learned)");
}

int ModelConfig::ffn_hidden() const { return hidden_width(d_model, ffn_factor); }
int ModelConfig::head_hidden() const {
  return hidden_width(d_model, head_factor);
}

void ModelConfig::validate() {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (n_heads < 1) throw ConfigError("n_heads must be >= 1");
  if (d_model < 2 || d_model % 2 != 0) {
    throw ConfigError("d_model must be a positive even integer, got " +
                      std::to_string(d_model));
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (head_dim() % 2 != 0) {
    throw ConfigError("head_dim " + std::to_string(head_dim()) +
                      " must be even for rotary pairs");
  }
  if (ffn_factor <= 0 || head_factor <= 0) {
    throw ConfigError("ffn_factor and head_factor must be positive");
  }
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (dropout_p < 0 || dropout_p >= 1) {
    throw ConfigError("dropout_p must be in [0,1), got " +
                      std::to_string(dropout_p));
  }
  if (max_seq_len < 3) throw ConfigError("max_seq_len must be >= 3");
  if (embedding_kind == EmbeddingKind::kFourier) dropout_p = 0.0;
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  if (cfg.embedding_kind == EmbeddingKind::kFourier) {
    out.emplace_back("emb.gain", emb_gain);
    out.emplace_back("emb.wa", emb_wa);
    out.emplace_back("emb.wb", emb_wb);
    out.emplace_back("emb.wout", emb_wout);
  } else {
    out.emplace_back("emb.table", table);
  }
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    const Layer& l = layers[i];
    out.emplace_back(p + "attn.gain", l.attn_gain);
    out.emplace_back(p + "attn.wq", l.wq);
    out.emplace_back(p + "attn.wk", l.wk);
    out.emplace_back(p + "attn.wv", l.wv);
    out.emplace_back(p + "attn.wo", l.wo);
    out.emplace_back(p + "ffn.gain", l.ffn_gain);
    out.emplace_back(p + "ffn.wa", l.ffn_wa);
    out.emplace_back(p + "ffn.wb", l.ffn_wb);
    out.emplace_back(p + "ffn.wout", l.ffn_wout);
  }
  out.emplace_back("final.gain", final_gain);
  out.emplace_back("sent.proj", sent_proj);
  out.emplace_back("logit_scale", logit_scale);
  return out;
}

int64_t Model::allocated_parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

void Model::zero_grad() const {
  for (const auto& [name, t] : named_parameters()) {
    Tensor copy = t;
    copy.zero_grad();
  }
}

void Model::set_requires_grad(bool value) const {
  for (const auto& [name, t] : named_parameters()) {
    Tensor copy = t;
    copy.set_requires_grad(value);
  }
}

Model build_model(const ModelConfig& config, uint64_t seed) {
  ModelConfig cfg = config;
  cfg.validate();
  Rng rng(seed);
  Model m;
  m.cfg = cfg;
  const int64_t d = cfg.d_model;
  if (cfg.embedding_kind == EmbeddingKind::kFourier) {
    const int64_t h = cfg.head_hidden();
    m.emb_gain = Tensor::full({d}, 1, true);
    m.emb_wa = init_linear({d, h}, rng);
    m.emb_wb = init_linear({d, h}, rng);
    m.emb_wout = init_linear({h, d}, rng);
  } else {
    m.table = Tensor::zeros({cfg.vocab_size, d}, true);
    for (auto& v : m.table.data()) {
      v = static_cast<Real>(rng.normal() * 0.02);
    }
  }
  const int64_t fh = cfg.ffn_hidden();
  for (int i = 0; i < cfg.n_layers; ++i) {
    Model::Layer l;
    l.attn_gain = Tensor::full({d}, 1, true);
    l.wq = init_linear({d, d}, rng);
    l.wk = init_linear({d, d}, rng);
    l.wv = init_linear({d, d}, rng);
    l.wo = init_linear({d, d}, rng);
    l.ffn_gain = Tensor::full({d}, 1, true);
    l.ffn_wa = init_linear({d, fh}, rng);
    l.ffn_wb = init_linear({d, fh}, rng);
    l.ffn_wout = init_linear({fh, d}, rng);
    m.layers.push_back(std::move(l));
  }
  m.final_gain = Tensor::full({d}, 1, true);
  m.sent_proj = init_linear({d, d}, rng);
  m.logit_scale = Tensor::scalar(static_cast<Real>(std::log(1.0 / 0.07)), true);
  return m;
}

ParamCount param_count(const ModelConfig& config) {
  ModelConfig cfg = config;
  cfg.validate();
  const int64_t d = cfg.d_model;
  ParamCount pc;
  if (cfg.embedding_kind == EmbeddingKind::kFourier) {
    const int64_t h = cfg.head_hidden();
    pc.embedding = d + 2 * d * h + h * d;  // gain + wa + wb + wout
  } else {
    pc.embedding = cfg.vocab_size * d;
  }
  const int64_t fh = cfg.ffn_hidden();
  pc.per_layer = 2 * d          // two norm gains
                 + 4 * d * d    // q, k, v, o
                 + 2 * d * fh   // ffn wa, wb
                 + fh * d;      // ffn wout
  pc.layers_total = pc.per_layer * cfg.n_layers;
  pc.final_norm = d;
  pc.projection = d * d;
  pc.logit_scale = 1;
  pc.total = pc.embedding + pc.layers_total + pc.final_norm + pc.projection +
             pc.logit_scale;
  return pc;
}

std::string ParamCount::report_text() const {
  std::ostringstream out;
  out << "embedding   " << embedding << "\n";
  out << "per layer   " << per_layer << "\n";
  out << "layers      " << layers_total << "\n";
  out << "final norm  " << final_norm << "\n";
  out << "projection  " << projection << "\n";
  out << "logit scale " << logit_scale << "\n";
  out << "total       " << total << " (" << (static_cast<double>(total) / 1e6)
      << "m)\n";
  return out.str();
}

// --------------------------------------------------------------------------
// Forward pieces
// --------------------------------------------------------------------------

Tensor rmsnorm(const Tensor& x, const Tensor& gain, Real eps) {
  return mul(rms_normalize(x, eps), gain);
}

Tensor rotary_apply(const Tensor& x, const std::vector<int64_t>& positions) {
  const int64_t hd = x.shape().back();
  const int64_t s = x.shape()[x.shape().size() - 2];
  if (hd % 2 != 0) {
    throw ConfigError("rotary_apply: head dim must be even, got " +
                      std::to_string(hd));
  }
  std::vector<int64_t> pos = positions;
  if (pos.empty()) {
    pos.resize(static_cast<size_t>(s));
    for (int64_t i = 0; i < s; ++i) pos[static_cast<size_t>(i)] = i;
  }
  if (static_cast<int64_t>(pos.size()) != s) {
    throw ShapeError("rotary_apply: positions size " +
                     std::to_string(pos.size()) + " != seq len " +
                     std::to_string(s));
  }
  const int64_t pairs = hd / 2;
  Tensor cos_tab = Tensor::zeros({s, pairs});
  Tensor sin_tab = Tensor::zeros({s, pairs});
  for (int64_t m = 0; m < s; ++m) {
    for (int64_t j = 0; j < pairs; ++j) {
      const double theta =
          static_cast<double>(pos[static_cast<size_t>(m)]) *
          std::pow(10000.0, -2.0 * static_cast<double>(j) /
                                static_cast<double>(hd));
      cos_tab.data()[m * pairs + j] = static_cast<Real>(std::cos(theta));
      sin_tab.data()[m * pairs + j] = static_cast<Real>(std::sin(theta));
    }
  }
  return rotate_pairs(x, cos_tab, sin_tab);
}

Tensor embedding_forward(const TokenBatch& batch, const Model& model,
                         ForwardCtx& ctx) {
  (void)ctx;
  const ModelConfig& cfg = model.cfg;
  if (cfg.embedding_kind == EmbeddingKind::kLearned) {
    Tensor rows = gather_rows(model.table, batch.ids);
    return reshape(rows, {batch.batch, batch.seq, cfg.d_model});
  }
  // Deterministic base; no gradient flows into it.
  Tensor base = embed_batch_fused(batch, cfg.embedding());
  Tensor h = rmsnorm(base, model.emb_gain);
  Tensor a = project(h, model.emb_wa);
  Tensor b = project(h, model.emb_wb);
  Tensor gated = mul(gelu(a), b);
  Tensor out = project(gated, model.emb_wout);
  return add(base, out);
}

namespace {

// [B,S,S] keep mask from the [B,S] validity mask: position (b,i,j) is kept
// when key j is a real token.
Tensor expand_key_mask(const Tensor& mask, int64_t b, int64_t s) {
  Tensor keep = Tensor::zeros({b, s, s});
  auto kv = keep.data();
  const auto mv = mask.data();
  for (int64_t bb = 0; bb < b; ++bb) {
    for (int64_t i = 0; i < s; ++i) {
      for (int64_t j = 0; j < s; ++j) {
        kv[(bb * s + i) * s + j] = mv[bb * s + j];
      }
    }
  }
  return keep;
}

}  // namespace

Tensor attention_block(const Tensor& x, const Tensor& mask,
                       const Model::Layer& layer, const ModelConfig& cfg,
                       ForwardCtx& ctx) {
  const auto& s = x.shape();
  const int64_t b = s[0], n = s[1];
  if (mask.shape() != Shape{b, n}) {
    throw ShapeError("attention_block: mask shape " + shape_str(mask.shape()) +
                     " does not match input " + shape_str(x.shape()));
  }
  const int heads = cfg.n_heads;
  const int64_t hd = cfg.head_dim();
  Tensor h = rmsnorm(x, layer.attn_gain);
  Tensor q = project(h, layer.wq);
  Tensor k = project(h, layer.wk);
  Tensor v = project(h, layer.wv);

  std::vector<Tensor> qs = split_lastdim(q, heads);
  std::vector<Tensor> ks = split_lastdim(k, heads);
  std::vector<Tensor> vs = split_lastdim(v, heads);

  Tensor keep = expand_key_mask(mask, b, n);
  const Real scale = static_cast<Real>(1.0 / std::sqrt(double(hd)));

  std::vector<Tensor> ctx_heads;
  ctx_heads.reserve(static_cast<size_t>(heads));
  for (int head = 0; head < heads; ++head) {
    Tensor qh = rotary_apply(qs[static_cast<size_t>(head)]);
    Tensor kh = rotary_apply(ks[static_cast<size_t>(head)]);
    Tensor scores = scalar_mul(matmul(qh, transpose_last2(kh)), scale);
    scores = masked_fill(scores, keep, Real(-1e9));
    Tensor attn = softmax_lastdim(scores);
    ctx_heads.push_back(matmul(attn, vs[static_cast<size_t>(head)]));
  }
  Tensor merged = heads == 1 ? ctx_heads[0] : concat_lastdim(ctx_heads);
  Tensor out = project(merged, layer.wo);
  if (ctx.train && cfg.dropout_p > 0 && ctx.dropout_rng != nullptr) {
    out = dropout(out, cfg.dropout_p, *ctx.dropout_rng, true);
  }
  return add(x, out);
}

Tensor geglu_ffn(const Tensor& x, const Model::Layer& layer,
                 const ModelConfig& cfg, ForwardCtx& ctx) {
  Tensor h = rmsnorm(x, layer.ffn_gain);
  Tensor a = project(h, layer.ffn_wa);
  Tensor b = project(h, layer.ffn_wb);
  Tensor gated = mul(gelu(a), b);
  Tensor out = project(gated, layer.ffn_wout);
  if (ctx.train && cfg.dropout_p > 0 && ctx.dropout_rng != nullptr) {
    out = dropout(out, cfg.dropout_p, *ctx.dropout_rng, true);
  }
  return add(x, out);
}

Tensor encode(const TokenBatch& batch, const Model& model, ForwardCtx ctx) {
  const ModelConfig& cfg = model.cfg;
  const int64_t b = batch.batch, s = batch.seq;
  if (static_cast<int64_t>(batch.mask.size()) != b * s) {
    throw ShapeError("encode: mask size mismatch");
  }
  // Per-row token counts; every row must contain at least one valid token.
  std::vector<Real> inv_counts(static_cast<size_t>(b));
  for (int64_t bb = 0; bb < b; ++bb) {
    double count = 0;
    for (int64_t i = 0; i < s; ++i) count += batch.mask[bb * s + i];
    if (count == 0) {
      throw Error("encode: row " + std::to_string(bb) +
                  " has no valid tokens");
    }
    inv_counts[static_cast<size_t>(bb)] = static_cast<Real>(1.0 / count);
  }

  Tensor mask = Tensor::zeros({b, s});
  for (size_t i = 0; i < batch.mask.size(); ++i) {
    mask.data()[i] = static_cast<Real>(batch.mask[i]);
  }

  Tensor x = embedding_forward(batch, model, ctx);
  for (const Model::Layer& layer : model.layers) {
    x = attention_block(x, mask, layer, cfg, ctx);
    x = geglu_ffn(x, layer, cfg, ctx);
  }
  x = rmsnorm(x, model.final_gain);

  // Masked mean pooling over valid positions.
  Tensor mask3 = Tensor::zeros({b, s, cfg.d_model});
  for (int64_t bb = 0; bb < b; ++bb) {
    for (int64_t i = 0; i < s; ++i) {
      const Real mv = static_cast<Real>(batch.mask[bb * s + i]);
      Real* row = mask3.data().data() + (bb * s + i) * cfg.d_model;
      for (int64_t c = 0; c < cfg.d_model; ++c) row[c] = mv;
    }
  }
  Tensor summed = sum_axis(mul(x, mask3), 1);  // [B, d]
  Tensor inv = Tensor::zeros({b, cfg.d_model});
  for (int64_t bb = 0; bb < b; ++bb) {
    Real* row = inv.data().data() + bb * cfg.d_model;
    for (int64_t c = 0; c < cfg.d_model; ++c) {
      row[c] = inv_counts[static_cast<size_t>(bb)];
    }
  }
  Tensor pooled = mul(summed, inv);
  // Residual sentence projection: zeroing sent_proj leaves pooling intact.
  return add(pooled, matmul(pooled, model.sent_proj));
}

}  // namespace pete
