#include "pete/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace pete {

double cosine(std::span<const Real> u, std::span<const Real> v) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine: length mismatch " + std::to_string(u.size()) +
                     " vs " + std::to_string(v.size()));
  }
  double dot = 0, nu = 0, nv = 0;
  for (size_t i = 0; i < u.size(); ++i) {
    dot += double(u[i]) * v[i];
    nu += double(u[i]) * u[i];
    nv += double(v[i]) * v[i];
  }
  if (nu == 0 || nv == 0) throw NumericError("cosine: zero vector");
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  const size_t n = xs.size();
  if (n != ys.size()) throw ShapeError("pearson: length mismatch");
  if (n < 2) throw ConfigError("pearson: need at least 2 points");
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0 || syy == 0) {
    throw NumericError("pearson: undefined correlation for a constant series");
  }
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> average_ranks(std::span<const double> values) {
  const size_t n = values.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    // positions i..j share the mean of ranks i+1..j+1
    const double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("spearman: length mismatch");
  const std::vector<double> rx = average_ranks(xs);
  const std::vector<double> ry = average_ranks(ys);
  return pearson(rx, ry);
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  out << "sts evaluation over " << n << " pairs\n";
  out << "  pearson-r  : " << pearson_r << "\n";
  out << "  spearman-r : " << spearman_r << "\n";
  return out.str();
}

std::string EvalReport::to_json() const {
  return nlohmann::json{
      {"pearson", pearson_r}, {"spearman", spearman_r}, {"n", n}}
      .dump();
}

EvalReport evaluate_sts_with(const SentenceEncoder& encoder,
                             const std::vector<SentencePair>& pairs,
                             int batch_size, int64_t pad_id) {
  if (pairs.size() < 2) {
    throw ConfigError("evaluate_sts: need at least 2 scored pairs, got " +
                      std::to_string(pairs.size()));
  }
  for (size_t i = 0; i < pairs.size(); ++i) {
    if (!pairs[i].score.has_value()) {
      throw ConfigError("evaluate_sts: pair " + std::to_string(i) +
                        " has no gold score");
    }
  }
  EvalReport report;
  report.n = static_cast<int64_t>(pairs.size());
  report.pairs.reserve(pairs.size());
  for (const Batch& batch : eval_batches(pairs, batch_size, pad_id)) {
    Tensor va = encoder(batch.a);
    Tensor vb = encoder(batch.b);
    const int64_t d = va.shape()[1];
    for (int64_t r = 0; r < batch.a.batch; ++r) {
      const auto ua = va.data().subspan(static_cast<size_t>(r * d),
                                        static_cast<size_t>(d));
      const auto ub = vb.data().subspan(static_cast<size_t>(r * d),
                                        static_cast<size_t>(d));
      report.pairs.push_back(
          {cosine(ua, ub), batch.scores[static_cast<size_t>(r)]});
    }
  }
  std::vector<double> cosines, golds;
  for (const PairRecord& rec : report.pairs) {
    cosines.push_back(rec.cosine);
    golds.push_back(rec.gold);
  }
  report.pearson_r = pearson(cosines, golds);
  report.spearman_r = spearman(cosines, golds);
  return report;
}

EvalReport evaluate_sts(const Model& model,
                        const std::vector<SentencePair>& pairs,
                        int batch_size) {
  SentenceEncoder encoder = [&model](const TokenBatch& batch) {
    return encode(batch, model);
  };
  // Pad id does not influence pooled vectors (masked positions are ignored);
  // 0 is always a valid id.
  return evaluate_sts_with(encoder, pairs, batch_size, 0);
}

double in_batch_retrieval_accuracy(const Model& model,
                                   const std::vector<Batch>& batches) {
  int64_t hits = 0, total = 0;
  for (const Batch& batch : batches) {
    Tensor va = l2_normalize_rows(encode(batch.a, model));
    Tensor vb = l2_normalize_rows(encode(batch.b, model));
    Tensor sims = matmul(va, transpose_last2(vb));
    const int64_t n = sims.shape()[0];
    for (int64_t i = 0; i < n; ++i) {
      int64_t best = 0;
      Real best_v = sims.data()[i * n];
      for (int64_t j = 1; j < n; ++j) {
        const Real v = sims.data()[i * n + j];
        if (v > best_v) {
          best_v = v;
          best = j;
        }
      }
      hits += best == i ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace pete
