#include "pete/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <thread>

#include "pete/rng.hpp"

namespace pete {

namespace {

using Clock = std::chrono::steady_clock;

BenchResult time_variant(const std::string& name, int64_t tokens, int iters,
                         int warmup, const std::function<void()>& body) {
  BenchResult r;
  r.variant = name;
  r.warmup_iters = warmup;
  r.measured_iters = iters;
  for (int i = 0; i < warmup; ++i) body();
  r.iter_seconds.reserve(static_cast<size_t>(iters));
  for (int i = 0; i < iters; ++i) {
    const auto t0 = Clock::now();
    body();
    const auto t1 = Clock::now();
    r.iter_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::vector<double> sorted = r.iter_seconds;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[sorted.size() / 2];
  double mean = 0;
  for (double s : r.iter_seconds) mean += s;
  mean /= static_cast<double>(iters);
  double var = 0;
  for (double s : r.iter_seconds) var += (s - mean) * (s - mean);
  var /= static_cast<double>(iters);
  r.tokens_per_second = static_cast<double>(tokens) / median;
  r.mean_tokens_per_second = static_cast<double>(tokens) / mean;
  r.cv = mean > 0 ? std::sqrt(var) / mean : 0.0;
  return r;
}

}  // namespace

std::vector<BenchResult> bench_embedding(const EmbeddingConfig& cfg,
                                         int64_t batch, int64_t seq, int iters,
                                         uint64_t seed, int threads) {
  cfg.validate();
  if (iters < 10) {
    throw ConfigError("bench_embedding: need >= 10 measured iterations, got " +
                      std::to_string(iters));
  }
  if (batch < 1 || seq < 1) {
    throw ConfigError("bench_embedding: batch and seq must be >= 1");
  }
  constexpr int kWarmup = 3;
  const int64_t n = batch * seq;
  const int64_t d = cfg.d_model;

  Rng rng(seed);
  std::vector<int64_t> ids(static_cast<size_t>(n));
  for (auto& id : ids) id = rng.uniform_int(0, cfg.vocab_size - 1);

  std::vector<Real> out_fused(static_cast<size_t>(n * d));
  std::vector<Real> out_naive(static_cast<size_t>(n * d));

  // Correctness gate: the two analytic paths must agree before anything is
  // timed.
  fourier_embed_fused(ids, batch, seq, cfg, out_fused);
  fourier_embed_naive(ids, batch, seq, cfg, out_naive);
  for (size_t i = 0; i < out_fused.size(); ++i) {
    if (std::abs(double(out_fused[i]) - double(out_naive[i])) > 1e-6) {
      throw NumericError(
          "bench_embedding: fused and naive outputs disagree at component " +
          std::to_string(i));
    }
  }

  // Memory-traffic estimates per token: every variant reads one id (8 bytes)
  // and writes d outputs; naive also writes and re-reads the intermediate
  // normalized id, the table variant reads a d-float row.
  const double out_bytes = static_cast<double>(d) * sizeof(Real);

  std::vector<BenchResult> results;
  results.push_back(time_variant("fused", n, iters, kWarmup, [&] {
    fourier_embed_fused(ids, batch, seq, cfg, out_fused);
  }));
  results.back().bytes_touched_per_token = 8.0 + out_bytes;
  results.push_back(time_variant("naive", n, iters, kWarmup, [&] {
    fourier_embed_naive(ids, batch, seq, cfg, out_naive);
  }));
  results.back().bytes_touched_per_token = 8.0 + 16.0 + out_bytes;

  // Learned-table lookup: the one variant that must hold V*d floats live.
  std::vector<float> table(static_cast<size_t>(cfg.vocab_size * d));
  Rng table_rng(seed ^ 0x7ab1eULL);
  for (auto& v : table) v = static_cast<float>(table_rng.normal() * 0.02);
  std::vector<Real> out_table(static_cast<size_t>(n * d));
  BenchResult tb = time_variant("table", n, iters, kWarmup, [&] {
    for (int64_t t = 0; t < n; ++t) {
      const float* row = table.data() + ids[static_cast<size_t>(t)] * d;
      Real* dst = out_table.data() + t * d;
      for (int64_t c = 0; c < d; ++c) dst[c] = static_cast<Real>(row[c]);
    }
  });
  tb.bytes_table = cfg.vocab_size * d * 4;
  tb.bytes_touched_per_token = 8.0 + 4.0 * static_cast<double>(d) + out_bytes;
  results.push_back(std::move(tb));

  if (threads > 1) {
    std::vector<std::thread> pool;
    results.push_back(time_variant(
        "fused-threads" + std::to_string(threads), n, iters, kWarmup, [&] {
          pool.clear();
          const int64_t rows_per = (batch + threads - 1) / threads;
          for (int w = 0; w < threads; ++w) {
            const int64_t row0 = w * rows_per;
            const int64_t row1 = std::min<int64_t>(batch, row0 + rows_per);
            if (row0 >= row1) break;
            pool.emplace_back([&, row0, row1] {
              const auto offset = static_cast<size_t>(row0 * seq);
              fourier_embed_fused(
                  std::span<const int64_t>(ids).subspan(
                      offset, static_cast<size_t>((row1 - row0) * seq)),
                  row1 - row0, seq, cfg,
                  std::span<Real>(out_fused)
                      .subspan(offset * static_cast<size_t>(d),
                               static_cast<size_t>((row1 - row0) * seq * d)));
            });
          }
          for (auto& th : pool) th.join();
        }));
    results.back().bytes_touched_per_token = 8.0 + out_bytes;
  }
  return results;
}

std::string bench_csv(const std::vector<BenchResult>& results) {
  std::ostringstream out;
  out << "variant,tokens_per_second,cv,bytes_table\n";
  for (const BenchResult& r : results) {
    out << r.variant << ',' << r.tokens_per_second << ',' << r.cv << ','
        << r.bytes_table << '\n';
  }
  return out.str();
}

}  // namespace pete
