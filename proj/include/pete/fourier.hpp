#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pete/batch.hpp"
#include "pete/tensor.hpp"

namespace pete {

// Shape of the deterministic base embedding.
struct EmbeddingConfig {
  int64_t vocab_size = 0;  // V >= 2
  int64_t d_model = 0;     // even, >= 2

  void validate() const;
};

// Affine map of a token id into [-1, 1]: x = 2*p/(V-1) - 1. Computed at
// 64-bit precision; for V ~ 30k adjacent ids differ by ~6.6e-5, which is
// near 32-bit resolution at the interval ends.
double normalize_id(int64_t p, int64_t vocab_size);

// Spacing between the normalized ids of adjacent tokens: 2/(V-1).
double adjacent_delta(int64_t vocab_size);

// Base embedding of one normalized id: component i is
// sin((floor(i/2)+1)*pi*x) for even i, cos of the same angle for odd i.
void fourier_expand(double x, int64_t d_model, std::span<Real> out);
std::vector<Real> fourier_expand(double x, int64_t d_model);

// Single-pass fused kernel: normalization and expansion in one sweep of the
// output buffer, one sin/cos call per token plus an angle-addition
// recurrence over the frequencies. No V x d table, no per-token intermediate
// beyond x itself. Stays within 1e-6 of direct evaluation.
void fourier_embed_fused(std::span<const int64_t> ids, int64_t batch,
                         int64_t seq, const EmbeddingConfig& cfg,
                         std::span<Real> out);

// Reference two-pass path: materialize all normalized ids, then expand each.
// The oracle the fused kernel is checked against.
void fourier_embed_naive(std::span<const int64_t> ids, int64_t batch,
                         int64_t seq, const EmbeddingConfig& cfg,
                         std::span<Real> out);

// Fused batch embedding as a tensor [B, S, d]. The result is a deterministic
// leaf: it never requires or accumulates gradient.
Tensor embed_batch_fused(const std::vector<int64_t>& ids, int64_t batch,
                         int64_t seq, const EmbeddingConfig& cfg);
Tensor embed_batch_fused(const TokenBatch& batch, const EmbeddingConfig& cfg);

// Distance structure of the base embedding, measured. The minimum over
// adjacent id pairs bounds how close neighbours get; random pairs
// cross-check it; the (0, V-1) endpoint pair is reported separately because
// x = -1 and x = +1 alias to identical embeddings.
struct CollisionStats {
  int64_t vocab_size = 0;
  int64_t d_model = 0;
  int64_t tokens_scanned = 0;
  int64_t random_pairs = 0;
  bool exact_sample_mode = false;

  double min_adjacent = 0;  // min over adjacent id pairs (closest sampled
                            // ids in sample mode)
  std::pair<int64_t, int64_t> argmin_adjacent{0, 0};
  double min_sampled = 0;      // min over random pairs, or exact all-pairs
                               // min within the sample
  double endpoint_distance = 0;  // |T(0) - T(V-1)|
  double min_pairwise = 0;       // min over everything scanned
  double mean_nn = 0;            // mean nearest-neighbour distance

  std::vector<double> nn_distances;  // per scanned token, sorted ascending
  std::vector<int64_t> histogram;    // counts over [0, hist_max]
  double hist_max = 0;

  std::string report_text() const;
  // CSV with header pair_rank,distance over the sorted nn distances.
  std::string to_csv() const;
};

// Full-vocab mode (sample == nullopt): streaming adjacent-pair scan plus
// `random_pair_count` sampled pairs and the endpoint pair. Sample mode:
// exact all-pairs statistics over `sample` distinct random ids.
CollisionStats collision_stats(const EmbeddingConfig& cfg,
                               std::optional<int64_t> sample = std::nullopt,
                               uint64_t seed = 0,
                               int64_t random_pair_count = 1'000'000);

}  // namespace pete
