#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pete/data.hpp"
#include "pete/model.hpp"

namespace pete {

// u.v / (|u| |v|), accumulated at 64-bit, clamped to [-1, 1]. Zero vectors
// are an error.
double cosine(std::span<const Real> u, std::span<const Real> v);

// Sample Pearson correlation; throws on constant series.
double pearson(std::span<const double> xs, std::span<const double> ys);

// Spearman rank correlation; ties receive their average rank.
double spearman(std::span<const double> xs, std::span<const double> ys);

// Average ranks (1-based) with mean rank for ties.
std::vector<double> average_ranks(std::span<const double> values);

struct PairRecord {
  double cosine = 0;
  double gold = 0;
};

struct EvalReport {
  double pearson_r = 0;
  double spearman_r = 0;
  int64_t n = 0;
  std::vector<PairRecord> pairs;  // input order

  std::string to_text() const;
  std::string to_json() const;  // {"pearson":..,"spearman":..,"n":..}
};

using SentenceEncoder = std::function<Tensor(const TokenBatch&)>;

// Core evaluation loop against any encoder; the result is independent of
// batch_size because per-pair cosines are computed from the per-row vectors.
EvalReport evaluate_sts_with(const SentenceEncoder& encoder,
                             const std::vector<SentencePair>& pairs,
                             int batch_size, int64_t pad_id);

// Zero-shot STS: encode both sides, cosine per pair, Pearson/Spearman
// against the gold scores. All pairs must carry scores and n >= 2.
EvalReport evaluate_sts(const Model& model,
                        const std::vector<SentencePair>& pairs,
                        int batch_size = 32);

// Fraction of rows whose best in-batch match (argmax over the scaled cosine
// row) is their own pair. Runs in inference mode.
double in_batch_retrieval_accuracy(const Model& model,
                                   const std::vector<Batch>& batches);

}  // namespace pete
