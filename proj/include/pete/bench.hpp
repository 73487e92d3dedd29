#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pete/fourier.hpp"

namespace pete {

struct BenchResult {
  std::string variant;
  double tokens_per_second = 0;   // median over measured iterations
  double mean_tokens_per_second = 0;
  double cv = 0;                  // coefficient of variation of iter times
  double bytes_touched_per_token = 0;  // arithmetic estimate of memory traffic
  int64_t bytes_table = 0;        // V*d*4 for the table variant, else 0
  int warmup_iters = 0;
  int measured_iters = 0;
  std::vector<double> iter_seconds;
};

// Times three embedding paths on one random id batch [B, S]:
//   fused  - single-pass normalization + expansion kernel
//   naive  - two passes with an intermediate normalized-id buffer
//   table  - row gather from a materialized float32 V x d array
// Outputs of fused and naive must agree within 1e-6 per component before any
// timing happens, otherwise the benchmark aborts. threads > 1 adds a
// "fused-threads" variant that splits the batch across that many workers.
// No speed assertion is made; the measurement is the deliverable.
std::vector<BenchResult> bench_embedding(const EmbeddingConfig& cfg,
                                         int64_t batch, int64_t seq, int iters,
                                         uint64_t seed, int threads = 1);

// CSV: variant,tokens_per_second,cv,bytes_table
std::string bench_csv(const std::vector<BenchResult>& results);

}  // namespace pete
