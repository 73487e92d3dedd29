#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pete/data.hpp"
#include "pete/model.hpp"
#include "pete/tensor.hpp"

namespace pete {

struct TrainConfig {
  int batch_size = 128;
  int64_t total_steps = 1000;
  double peak_lr = 2e-5;
  int64_t warmup_steps = 1000;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 0x5eedULL;
  int64_t log_every = 10;
  int64_t checkpoint_every = 0;  // 0 = only the final checkpoint
  bool clip_gradients = true;
  double clip_norm = 1.0;
  size_t queue_capacity = 2;

  void validate() const;
};

// Symmetric CLIP-style InfoNCE over L2-normalized rows:
//   S = exp(logit_scale) * A_n B_n^T
//   loss = 1/2 * (CE(S, diag) + CE(S^T, diag)), mean over the batch.
// Differentiable in a_vecs, b_vecs and logit_scale. B >= 2 required.
Tensor info_nce_loss(const Tensor& a_vecs, const Tensor& b_vecs,
                     const Tensor& logit_scale);

// Linear warmup 0 -> peak_lr over warmup_steps, constant afterwards.
double lr_schedule(int64_t step, const TrainConfig& cfg);

// AdamW with decoupled weight decay and bias-corrected moments. The decay
// multiplies the parameter by (1 - lr*wd) independently of the adaptive
// update. A NaN gradient aborts the step before any parameter changes.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params,
        const TrainConfig& cfg);

  void step(double lr);
  int64_t step_count() const { return step_count_; }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<Real> m, v;
  };
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_, weight_decay_;
  int64_t step_count_ = 0;
};

struct MetricsRow {
  int64_t step = 0;
  double loss = 0;
  double lr = 0;
  double elapsed_seconds = 0;
};

std::string metrics_csv(const std::vector<MetricsRow>& rows);

struct TrainResult {
  std::vector<MetricsRow> log;
  int64_t steps_run = 0;
  bool halted_non_finite = false;
  std::filesystem::path final_checkpoint;  // empty when out_dir was empty
};

// Contrastive training: deterministic given cfg.seed (batch order, init
// consumption, dropout), metrics at log_every, checkpoints under out_dir.
// A non-finite loss halts the loop; the last written checkpoint survives.
// Batches are staged through a bounded queue by one producer thread
// (PETE_THREADS=0 switches to inline assembly; order is identical).
TrainResult train_loop(Model& model, const std::vector<SentencePair>& pairs,
                       const TrainConfig& cfg, const Vocab& vocab,
                       const std::filesystem::path& out_dir = {});

}  // namespace pete
