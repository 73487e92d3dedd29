#include "pete/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "pete/checkpoint.hpp"
#include "pete/queue.hpp"

namespace pete {

namespace {

constexpr double kLogitScaleMax = 4.605170185988091;  // ln(100)

double clampd(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

// Mean over rows of -log(softmax(S)_ii).
Tensor diagonal_cross_entropy(const Tensor& scores) {
  Tensor probs = softmax_lastdim(scores);
  Tensor diag = diagonal(probs);
  return scalar_mul(mean_all(log(diag)), Real(-1));
}

int env_threads() {
  const char* raw = std::getenv("PETE_THREADS");
  if (raw == nullptr) return 1;
  const int v = std::atoi(raw);
  return v < 0 ? 1 : v;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 2) {
    throw ConfigError("batch_size must be >= 2 (contrastive loss needs "
                      "in-batch negatives)");
  }
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (peak_lr <= 0) throw ConfigError("peak_lr must be positive");
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw ConfigError("warmup_steps must lie in [0, total_steps]");
  }
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1) {
    throw ConfigError("adam betas must lie in (0,1)");
  }
  if (adam_eps <= 0) throw ConfigError("adam_eps must be positive");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (queue_capacity < 2) throw ConfigError("queue_capacity must be >= 2");
}

Tensor info_nce_loss(const Tensor& a_vecs, const Tensor& b_vecs,
                     const Tensor& logit_scale) {
  if (a_vecs.dim() != 2 || b_vecs.dim() != 2 ||
      a_vecs.shape() != b_vecs.shape()) {
    throw ShapeError("info_nce_loss: shape mismatch " +
                     shape_str(a_vecs.shape()) + " vs " +
                     shape_str(b_vecs.shape()));
  }
  if (a_vecs.shape()[0] < 2) {
    throw ConfigError("info_nce_loss: batch must be >= 2, got " +
                      std::to_string(a_vecs.shape()[0]));
  }
  if (logit_scale.dim() != 0) {
    throw ShapeError("info_nce_loss: logit_scale must be rank-0");
  }
  Tensor an = l2_normalize_rows(a_vecs);
  Tensor bn = l2_normalize_rows(b_vecs);
  Tensor sims = matmul(an, transpose_last2(bn));
  Tensor scaled = mul(sims, exp(logit_scale));
  Tensor ce_ab = diagonal_cross_entropy(scaled);
  Tensor ce_ba = diagonal_cross_entropy(transpose_last2(scaled));
  return scalar_mul(add(ce_ab, ce_ba), Real(0.5));
}

double lr_schedule(int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) {
    throw ConfigError("lr_schedule: step " + std::to_string(step) +
                      " outside [0, total_steps]");
  }
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step) /
           static_cast<double>(cfg.warmup_steps);
  }
  return cfg.peak_lr;
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params,
             const TrainConfig& cfg)
    : beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay) {
  for (auto& [name, t] : params) {
    Slot slot;
    slot.name = name;
    slot.param = t;
    slot.m.assign(static_cast<size_t>(t.numel()), Real(0));
    slot.v.assign(static_cast<size_t>(t.numel()), Real(0));
    slots_.push_back(std::move(slot));
  }
}

void AdamW::step(double lr) {
  if (lr < 0) throw ConfigError("AdamW::step: negative learning rate");
  // Validate every gradient before touching any parameter.
  for (Slot& slot : slots_) {
    for (const Real g : slot.param.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("AdamW: non-finite gradient in parameter '" +
                           slot.name + "'; step aborted");
      }
    }
  }
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (Slot& slot : slots_) {
    auto p = slot.param.data();
    auto g = slot.param.grad();
    for (size_t i = 0; i < p.size(); ++i) {
      // Decoupled decay, independent of the adaptive term.
      double pv = double(p[i]) * (1.0 - lr * weight_decay_);
      const double gv = g[i];
      const double m = beta1_ * slot.m[i] + (1.0 - beta1_) * gv;
      const double v = beta2_ * slot.v[i] + (1.0 - beta2_) * gv * gv;
      slot.m[i] = static_cast<Real>(m);
      slot.v[i] = static_cast<Real>(v);
      pv -= lr * (m / bc1) / (std::sqrt(v / bc2) + eps_);
      p[i] = static_cast<Real>(pv);
    }
  }
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  out.precision(10);
  out << "step,loss,lr,elapsed_seconds\n";
  for (const MetricsRow& r : rows) {
    out << r.step << ',' << r.loss << ',' << r.lr << ',' << r.elapsed_seconds
        << '\n';
  }
  return out.str();
}

TrainResult train_loop(Model& model, const std::vector<SentencePair>& pairs,
                       const TrainConfig& cfg, const Vocab& vocab,
                       const std::filesystem::path& out_dir) {
  cfg.validate();
  if (pairs.empty()) throw ConfigError("train_loop: empty dataset");
  if (static_cast<int>(pairs.size()) < cfg.batch_size) {
    throw ConfigError("train_loop: dataset smaller than one batch");
  }
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&t0]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  // Deterministic batch plan: epoch e reshuffles with a seed derived from
  // (cfg.seed, e); batches flow through the queue in plan order.
  BoundedQueue<Batch> queue(cfg.queue_capacity);
  const bool threaded = env_threads() > 0;
  auto produce = [&](auto&& deliver) {
    int64_t produced = 0;
    for (uint64_t epoch = 0; produced < cfg.total_steps; ++epoch) {
      auto batches = make_batches(pairs, cfg.batch_size, model.cfg.max_seq_len,
                                  vocab, cfg.seed ^ (epoch * 0x9e3779b9ULL));
      for (Batch& b : batches) {
        if (produced >= cfg.total_steps) break;
        deliver(std::move(b));
        ++produced;
      }
    }
  };

  std::thread producer;
  std::vector<Batch> inline_plan;
  if (threaded) {
    producer = std::thread([&] {
      produce([&](Batch&& b) { queue.push(std::move(b)); });
    });
  } else {
    inline_plan.reserve(static_cast<size_t>(cfg.total_steps));
    produce([&](Batch&& b) { inline_plan.push_back(std::move(b)); });
  }
  size_t inline_next = 0;
  auto next_batch = [&]() -> std::optional<Batch> {
    if (threaded) return queue.pop();
    if (inline_next >= inline_plan.size()) return std::nullopt;
    return std::move(inline_plan[inline_next++]);
  };

  auto params = model.named_parameters();
  AdamW opt(params, cfg);
  Rng dropout_rng = Rng(cfg.seed).fork(0xd20);

  TrainResult result;
  auto write_checkpoint = [&](const std::string& name) {
    if (out_dir.empty()) return std::filesystem::path{};
    const auto path = out_dir / name;
    save_checkpoint(model, path);
    return path;
  };

  for (int64_t step = 0; step < cfg.total_steps; ++step) {
    auto maybe = next_batch();
    if (!maybe) break;
    const Batch& batch = *maybe;
    const double lr = lr_schedule(step, cfg);

    double loss_value = 0;
    bool finite = true;
    try {
      Tape tape;
      Tape::Scope scope(tape);
      ForwardCtx ctx{true, &dropout_rng};
      Tensor a = encode(batch.a, model, ctx);
      Tensor b = encode(batch.b, model, ctx);
      Tensor loss = info_nce_loss(a, b, model.logit_scale);
      loss_value = loss.item();
      finite = std::isfinite(loss_value);
      if (finite) {
        tape.backward(loss);
        if (cfg.clip_gradients) {
          double sq = 0;
          for (auto& [name, t] : params) {
            for (const Real g : t.grad()) sq += double(g) * g;
          }
          const double norm = std::sqrt(sq);
          if (norm > cfg.clip_norm) {
            const Real k = static_cast<Real>(cfg.clip_norm / norm);
            for (auto& [name, t] : params) {
              for (Real& g : t.grad()) g *= k;
            }
          }
        }
        opt.step(lr);
        // Temperature stays within exp(logit_scale) in [1/100, 100].
        auto ls = model.logit_scale.data();
        ls[0] = static_cast<Real>(
            clampd(double(ls[0]), -kLogitScaleMax, kLogitScaleMax));
      }
    } catch (const NumericError&) {
      finite = false;
    }
    model.zero_grad();

    if (!finite) {
      result.halted_non_finite = true;
      break;
    }
    result.steps_run = step + 1;
    if (step % cfg.log_every == 0 || step == cfg.total_steps - 1) {
      result.log.push_back({step, loss_value, lr, elapsed()});
    }
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < cfg.total_steps) {
      write_checkpoint("ckpt-" + std::to_string(step + 1) + ".bin");
    }
  }

  if (threaded) {
    queue.close();
    producer.join();
  }
  if (!result.halted_non_finite) {
    result.final_checkpoint = write_checkpoint("ckpt-final.bin");
  }
  return result;
}

}  // namespace pete
