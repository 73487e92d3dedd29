#include "pete/fourier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "pete/rng.hpp"

namespace pete {

namespace {

constexpr double kPi = std::numbers::pi;

[[noreturn]] void id_out_of_range(int64_t p, int64_t v, int64_t flat,
                                  int64_t seq) {
  std::ostringstream msg;
  msg << "token id " << p << " out of range [0," << v << ")";
  if (flat >= 0) {
    msg << " at batch " << flat / seq << ", seq " << flat % seq;
  }
  throw IndexError(msg.str());
}

// Writes T(x) into out[0..d) via the angle-addition recurrence:
// s_{k+1} = s_k*c1 + c_k*s1, c_{k+1} = c_k*c1 - s_k*s1 with theta = pi*x.
// Double-precision recurrence keeps the drift orders of magnitude below the
// 1e-6 agreement contract for any practical d.
void expand_recurrence(double x, int64_t d, Real* out) {
  const double s1 = std::sin(kPi * x);
  const double c1 = std::cos(kPi * x);
  double sk = s1, ck = c1;
  for (int64_t k = 0; k < d / 2; ++k) {
    out[2 * k] = static_cast<Real>(sk);
    out[2 * k + 1] = static_cast<Real>(ck);
    const double sn = sk * c1 + ck * s1;
    const double cn = ck * c1 - sk * s1;
    sk = sn;
    ck = cn;
  }
}

double euclid(const Real* a, const Real* b, int64_t d) {
  double acc = 0;
  for (int64_t i = 0; i < d; ++i) {
    const double diff = double(a[i]) - double(b[i]);
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

}  // namespace

void EmbeddingConfig::validate() const {
  if (vocab_size < 2) {
    throw ConfigError("vocab_size must be >= 2, got " +
                      std::to_string(vocab_size));
  }
  if (d_model < 2 || d_model % 2 != 0) {
    throw ConfigError("d_model must be a positive even integer, got " +
                      std::to_string(d_model));
  }
}

double normalize_id(int64_t p, int64_t vocab_size) {
  if (vocab_size < 2) {
    throw ConfigError("normalize_id: vocab_size must be >= 2, got " +
                      std::to_string(vocab_size));
  }
  if (p < 0 || p >= vocab_size) id_out_of_range(p, vocab_size, -1, 1);
  return 2.0 * static_cast<double>(p) / static_cast<double>(vocab_size - 1) -
         1.0;
}

double adjacent_delta(int64_t vocab_size) {
  if (vocab_size < 2) {
    throw ConfigError("adjacent_delta: vocab_size must be >= 2, got " +
                      std::to_string(vocab_size));
  }
  return 2.0 / static_cast<double>(vocab_size - 1);
}

void fourier_expand(double x, int64_t d_model, std::span<Real> out) {
  if (d_model < 2 || d_model % 2 != 0) {
    throw ConfigError("fourier_expand: d_model must be a positive even "
                      "integer, got " +
                      std::to_string(d_model));
  }
  if (static_cast<int64_t>(out.size()) != d_model) {
    throw ShapeError("fourier_expand: output span size " +
                     std::to_string(out.size()) + " != d_model " +
                     std::to_string(d_model));
  }
  for (int64_t k = 0; k < d_model / 2; ++k) {
    const double angle = static_cast<double>(k + 1) * kPi * x;
    out[2 * k] = static_cast<Real>(std::sin(angle));
    out[2 * k + 1] = static_cast<Real>(std::cos(angle));
  }
}

std::vector<Real> fourier_expand(double x, int64_t d_model) {
  std::vector<Real> out(static_cast<size_t>(d_model));
  fourier_expand(x, d_model, out);
  return out;
}

void fourier_embed_fused(std::span<const int64_t> ids, int64_t batch,
                         int64_t seq, const EmbeddingConfig& cfg,
                         std::span<Real> out) {
  cfg.validate();
  const int64_t n = batch * seq;
  if (static_cast<int64_t>(ids.size()) != n) {
    throw ShapeError("fourier_embed_fused: " + std::to_string(ids.size()) +
                     " ids for batch " + std::to_string(batch) + " x seq " +
                     std::to_string(seq));
  }
  if (static_cast<int64_t>(out.size()) != n * cfg.d_model) {
    throw ShapeError("fourier_embed_fused: output buffer size mismatch");
  }
  const double inv = 2.0 / static_cast<double>(cfg.vocab_size - 1);
  for (int64_t t = 0; t < n; ++t) {
    const int64_t p = ids[t];
    if (p < 0 || p >= cfg.vocab_size) {
      id_out_of_range(p, cfg.vocab_size, t, seq);
    }
    const double x = static_cast<double>(p) * inv - 1.0;
    expand_recurrence(x, cfg.d_model, out.data() + t * cfg.d_model);
  }
}

void fourier_embed_naive(std::span<const int64_t> ids, int64_t batch,
                         int64_t seq, const EmbeddingConfig& cfg,
                         std::span<Real> out) {
  cfg.validate();
  const int64_t n = batch * seq;
  if (static_cast<int64_t>(ids.size()) != n ||
      static_cast<int64_t>(out.size()) != n * cfg.d_model) {
    throw ShapeError("fourier_embed_naive: buffer size mismatch");
  }
  // Pass 1: normalization into an intermediate buffer.
  std::vector<double> xs(static_cast<size_t>(n));
  for (int64_t t = 0; t < n; ++t) {
    if (ids[t] < 0 || ids[t] >= cfg.vocab_size) {
      id_out_of_range(ids[t], cfg.vocab_size, t, seq);
    }
    xs[static_cast<size_t>(t)] = normalize_id(ids[t], cfg.vocab_size);
  }
  // Pass 2: direct expansion of each x.
  for (int64_t t = 0; t < n; ++t) {
    fourier_expand(xs[static_cast<size_t>(t)], cfg.d_model,
                   out.subspan(static_cast<size_t>(t * cfg.d_model),
                               static_cast<size_t>(cfg.d_model)));
  }
}

Tensor embed_batch_fused(const std::vector<int64_t>& ids, int64_t batch,
                         int64_t seq, const EmbeddingConfig& cfg) {
  Tensor out = Tensor::zeros({batch, seq, cfg.d_model});
  fourier_embed_fused(ids, batch, seq, cfg, out.data());
  return out;
}

Tensor embed_batch_fused(const TokenBatch& batch, const EmbeddingConfig& cfg) {
  return embed_batch_fused(batch.ids, batch.batch, batch.seq, cfg);
}

// --------------------------------------------------------------------------
// Collision analysis
// --------------------------------------------------------------------------

namespace {

void finalize_stats(CollisionStats& st) {
  std::sort(st.nn_distances.begin(), st.nn_distances.end());
  double sum = 0;
  for (double v : st.nn_distances) sum += v;
  st.mean_nn = st.nn_distances.empty()
                   ? 0.0
                   : sum / static_cast<double>(st.nn_distances.size());
  constexpr int kBins = 20;
  st.hist_max = st.nn_distances.empty() ? 0.0 : st.nn_distances.back();
  st.histogram.assign(kBins, 0);
  if (st.hist_max > 0) {
    for (double v : st.nn_distances) {
      int bin = static_cast<int>(v / st.hist_max * kBins);
      bin = std::min(bin, kBins - 1);
      ++st.histogram[static_cast<size_t>(bin)];
    }
  } else if (!st.nn_distances.empty()) {
    st.histogram[0] = static_cast<int64_t>(st.nn_distances.size());
  }
}

}  // namespace

CollisionStats collision_stats(const EmbeddingConfig& cfg,
                               std::optional<int64_t> sample, uint64_t seed,
                               int64_t random_pair_count) {
  cfg.validate();
  const int64_t v = cfg.vocab_size;
  const int64_t d = cfg.d_model;
  if (sample) {
    if (*sample < 2) throw ConfigError("collision_stats: sample must be >= 2");
    if (*sample > v) {
      throw ConfigError("collision_stats: sample " + std::to_string(*sample) +
                        " exceeds vocab size " + std::to_string(v));
    }
  }

  CollisionStats st;
  st.vocab_size = v;
  st.d_model = d;

  auto embed_one = [&](int64_t p, Real* buf) {
    expand_recurrence(normalize_id(p, v), d, buf);
  };

  if (sample) {
    // Exact all-pairs statistics over a random id subset.
    st.exact_sample_mode = true;
    const int64_t m = *sample;
    Rng rng(seed);
    std::vector<int64_t> pool(static_cast<size_t>(v));
    for (int64_t i = 0; i < v; ++i) pool[static_cast<size_t>(i)] = i;
    rng.shuffle(pool);
    pool.resize(static_cast<size_t>(m));
    std::sort(pool.begin(), pool.end());

    std::vector<Real> rows(static_cast<size_t>(m * d));
    for (int64_t i = 0; i < m; ++i) {
      embed_one(pool[static_cast<size_t>(i)], rows.data() + i * d);
    }
    std::vector<double> nn(static_cast<size_t>(m),
                           std::numeric_limits<double>::infinity());
    double min_all = std::numeric_limits<double>::infinity();
    double min_adj = std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = i + 1; j < m; ++j) {
        const double dist = euclid(rows.data() + i * d, rows.data() + j * d, d);
        min_all = std::min(min_all, dist);
        if (j == i + 1 && dist < min_adj) {
          // closest-id neighbours within the sorted sample
          min_adj = dist;
          st.argmin_adjacent = {pool[static_cast<size_t>(i)],
                                pool[static_cast<size_t>(j)]};
        }
        nn[static_cast<size_t>(i)] = std::min(nn[static_cast<size_t>(i)], dist);
        nn[static_cast<size_t>(j)] = std::min(nn[static_cast<size_t>(j)], dist);
      }
    }
    st.tokens_scanned = m;
    st.min_sampled = min_all;
    st.min_adjacent = min_adj;
    std::vector<Real> t0(static_cast<size_t>(d)), tv(static_cast<size_t>(d));
    embed_one(0, t0.data());
    embed_one(v - 1, tv.data());
    st.endpoint_distance = euclid(t0.data(), tv.data(), d);
    st.min_pairwise = std::min(min_all, st.endpoint_distance);
    st.nn_distances.assign(nn.begin(), nn.end());
    finalize_stats(st);
    return st;
  }

  // Full-vocab mode: streaming scan over adjacent pairs keeps O(d) memory.
  std::vector<Real> prev(static_cast<size_t>(d)), cur(static_cast<size_t>(d));
  std::vector<Real> first(static_cast<size_t>(d));
  std::vector<double> adj(static_cast<size_t>(v - 1));
  embed_one(0, prev.data());
  first = prev;
  double min_adj = std::numeric_limits<double>::infinity();
  for (int64_t p = 1; p < v; ++p) {
    embed_one(p, cur.data());
    const double dist = euclid(prev.data(), cur.data(), d);
    adj[static_cast<size_t>(p - 1)] = dist;
    if (dist < min_adj) {
      min_adj = dist;
      st.argmin_adjacent = {p - 1, p};
    }
    std::swap(prev, cur);
  }
  st.min_adjacent = min_adj;
  st.endpoint_distance = euclid(first.data(), prev.data(), d);

  // Random-pair cross-check.
  Rng rng(seed);
  double min_rand = std::numeric_limits<double>::infinity();
  std::vector<Real> a(static_cast<size_t>(d)), b(static_cast<size_t>(d));
  for (int64_t i = 0; i < random_pair_count; ++i) {
    const int64_t p = rng.uniform_int(0, v - 1);
    int64_t q = rng.uniform_int(0, v - 2);
    if (q >= p) ++q;
    embed_one(p, a.data());
    embed_one(q, b.data());
    min_rand = std::min(min_rand, euclid(a.data(), b.data(), d));
  }
  st.random_pairs = random_pair_count;
  st.min_sampled = random_pair_count > 0 ? min_rand : min_adj;
  st.min_pairwise = std::min({st.min_adjacent, st.min_sampled,
                              st.endpoint_distance});

  // Nearest-neighbour proxy per token: its adjacent pairs, plus the endpoint
  // alias for tokens 0 and V-1.
  st.tokens_scanned = v;
  st.nn_distances.resize(static_cast<size_t>(v));
  for (int64_t p = 0; p < v; ++p) {
    double nn = std::numeric_limits<double>::infinity();
    if (p > 0) nn = std::min(nn, adj[static_cast<size_t>(p - 1)]);
    if (p < v - 1) nn = std::min(nn, adj[static_cast<size_t>(p)]);
    if (p == 0 || p == v - 1) nn = std::min(nn, st.endpoint_distance);
    st.nn_distances[static_cast<size_t>(p)] = nn;
  }
  finalize_stats(st);
  return st;
}

std::string CollisionStats::report_text() const {
  std::ostringstream out;
  out << "base embedding collision report (V=" << vocab_size
      << ", d=" << d_model << ")\n";
  out << "  adjacent-pair min distance : " << min_adjacent << "  (ids "
      << argmin_adjacent.first << "," << argmin_adjacent.second << ")\n";
  if (exact_sample_mode) {
    out << "  sampled min distance       : " << min_sampled
        << "  (exact over " << tokens_scanned << " sampled ids)\n";
  } else {
    out << "  sampled min distance       : " << min_sampled << "  ("
        << random_pairs << " random pairs)\n";
  }
  out << "  endpoint pair |T(0)-T(V-1)|: " << endpoint_distance << "\n";
  out << "  min pairwise distance      : " << min_pairwise << "\n";
  out << "  mean nearest-neighbour     : " << mean_nn << "\n";
  out << "  nearest-neighbour histogram (" << nn_distances.size()
      << " tokens, bin width " << (hist_max / 20.0) << "):\n";
  int64_t peak = 1;
  for (int64_t c : histogram) peak = std::max(peak, c);
  for (size_t i = 0; i < histogram.size(); ++i) {
    const double lo = hist_max * static_cast<double>(i) / 20.0;
    const int bar =
        static_cast<int>(60.0 * static_cast<double>(histogram[i]) /
                         static_cast<double>(peak));
    out << "    " << lo << "\t" << std::string(static_cast<size_t>(bar), '#')
        << " " << histogram[i] << "\n";
  }
  return out.str();
}

std::string CollisionStats::to_csv() const {
  std::ostringstream out;
  out << "pair_rank,distance\n";
  for (size_t i = 0; i < nn_distances.size(); ++i) {
    out << i << "," << nn_distances[i] << "\n";
  }
  return out.str();
}

}  // namespace pete
