#include "pete/data.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <utility>

#include "json.hpp"
#include "pete/rng.hpp"

namespace pete {

namespace {

constexpr int kMaxWordChars = 100;

// Splits cleaned text into words; ASCII punctuation becomes its own word.
// Multi-byte UTF-8 sequences pass through untouched inside words.
std::vector<std::string> pre_split(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c < 0x80 && std::isspace(c)) {
      if (!cur.empty()) words.push_back(std::exchange(cur, {}));
    } else if (c < 0x80 && std::ispunct(c)) {
      if (!cur.empty()) words.push_back(std::exchange(cur, {}));
      words.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

// Byte offsets of UTF-8 character starts, plus the end offset.
std::vector<size_t> char_starts(const std::string& word) {
  std::vector<size_t> starts;
  for (size_t i = 0; i < word.size(); ++i) {
    if ((static_cast<unsigned char>(word[i]) & 0xC0) != 0x80) starts.push_back(i);
  }
  starts.push_back(word.size());
  return starts;
}

std::string read_line_trim_cr(std::istream& in, bool& ok) {
  std::string line;
  ok = static_cast<bool>(std::getline(in, line));
  if (ok && !line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace

int64_t Vocab::lookup(std::string_view token) const {
  const auto it = index.find(std::string(token));
  return it == index.end() ? -1 : it->second;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens,
                         const SpecialTokens& specials) {
  Vocab v;
  v.tokens = std::move(tokens);
  if (v.tokens.size() < 2) {
    throw IoError("vocab must contain at least 2 tokens, got " +
                  std::to_string(v.tokens.size()));
  }
  for (size_t i = 0; i < v.tokens.size(); ++i) {
    const auto [it, inserted] =
        v.index.emplace(v.tokens[i], static_cast<int64_t>(i));
    if (!inserted) {
      throw IoError("duplicate vocab token '" + v.tokens[i] + "' at line " +
                    std::to_string(i + 1));
    }
  }
  v.pad_id = v.lookup(specials.pad);
  v.unk_id = v.lookup(specials.unk);
  v.cls_id = v.lookup(specials.cls);
  v.sep_id = v.lookup(specials.sep);
  // pad and unk are needed by every consumer; cls/sep only by tokenize,
  // which checks for them itself.
  std::string missing;
  const std::pair<int64_t, const std::string*> checks[] = {
      {v.pad_id, &specials.pad}, {v.unk_id, &specials.unk}};
  for (const auto& [id, name] : checks) {
    if (id < 0) missing += (missing.empty() ? "" : ", ") + *name;
  }
  if (!missing.empty()) {
    throw IoError("vocab is missing special tokens: " + missing);
  }
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path,
                  const SpecialTokens& specials) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocab file " + path.string());
  std::vector<std::string> tokens;
  bool ok = true;
  while (true) {
    std::string line = read_line_trim_cr(in, ok);
    if (!ok) break;
    tokens.push_back(std::move(line));
  }
  // A trailing newline produces one empty final entry; drop it.
  if (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
  if (tokens.empty()) throw IoError("vocab file is empty: " + path.string());
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].empty()) {
      throw IoError("empty vocab token at line " + std::to_string(i + 1));
    }
  }
  return from_tokens(std::move(tokens), specials);
}

Vocab Vocab::synthetic(int64_t n_tokens) {
  if (n_tokens < 5) {
    throw ConfigError("synthetic vocab needs at least 5 tokens");
  }
  SpecialTokens specials;
  std::vector<std::string> tokens{specials.pad, specials.unk, specials.cls,
                                  specials.sep};
  char buf[32];
  for (int64_t i = 4; i < n_tokens; ++i) {
    std::snprintf(buf, sizeof buf, "w%05lld", static_cast<long long>(i));
    tokens.emplace_back(buf);
  }
  return from_tokens(std::move(tokens), specials);
}

std::vector<int64_t> tokenize(std::string_view text, const Vocab& vocab,
                              int max_len) {
  if (max_len < 3) {
    throw ConfigError("tokenize: max_len must be >= 3, got " +
                      std::to_string(max_len));
  }
  if (vocab.cls_id < 0 || vocab.sep_id < 0) {
    throw ConfigError("tokenize: vocab is missing special tokens: " +
                      std::string(vocab.cls_id < 0 ? "[CLS] " : "") +
                      std::string(vocab.sep_id < 0 ? "[SEP]" : ""));
  }
  std::vector<int64_t> ids;
  ids.push_back(vocab.cls_id);
  const size_t body_limit = static_cast<size_t>(max_len) - 2;
  for (const std::string& word : pre_split(text)) {
    if (ids.size() - 1 >= body_limit) break;
    const std::vector<size_t> starts = char_starts(word);
    const size_t n_chars = starts.size() - 1;
    if (n_chars > kMaxWordChars) {
      ids.push_back(vocab.unk_id);
      continue;
    }
    std::vector<int64_t> sub;
    size_t start = 0;
    bool bad = false;
    while (start < n_chars) {
      int64_t found = -1;
      size_t match_end = start;
      for (size_t end = n_chars; end > start; --end) {
        std::string piece = word.substr(starts[start], starts[end] - starts[start]);
        if (start > 0) piece = "##" + piece;
        const int64_t id = vocab.lookup(piece);
        if (id >= 0) {
          found = id;
          match_end = end;
          break;
        }
      }
      if (found < 0) {
        bad = true;
        break;
      }
      sub.push_back(found);
      start = match_end;
    }
    if (bad) {
      ids.push_back(vocab.unk_id);
    } else {
      for (int64_t id : sub) {
        if (ids.size() - 1 >= body_limit) break;
        ids.push_back(id);
      }
    }
  }
  if (ids.size() > body_limit + 1) ids.resize(body_limit + 1);
  ids.push_back(vocab.sep_id);
  return ids;
}

namespace {

std::vector<SentencePair> finish_load(std::vector<SentencePair> pairs,
                                      const LoadStats& stats,
                                      const std::filesystem::path& path,
                                      LoadStats* out_stats) {
  if (out_stats != nullptr) *out_stats = stats;
  if (stats.skipped_malformed > 0) {
    std::ostringstream warn;
    warn << "warning: " << path.string() << ": skipped "
         << stats.skipped_malformed << " malformed of " << stats.total_lines
         << " lines\n";
    std::fputs(warn.str().c_str(), stderr);
  }
  if (pairs.empty()) {
    throw IoError("no usable rows in " + path.string());
  }
  return pairs;
}

}  // namespace

std::vector<SentencePair> load_pairs_jsonl(const std::filesystem::path& path,
                                           const Vocab& vocab, int max_len,
                                           LoadStats* out_stats) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pairs file " + path.string());
  std::vector<SentencePair> pairs;
  LoadStats stats;
  bool ok = true;
  while (true) {
    std::string line = read_line_trim_cr(in, ok);
    if (!ok) break;
    ++stats.total_lines;
    if (line.empty()) {
      ++stats.skipped_malformed;
      continue;
    }
    nlohmann::json row = nlohmann::json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.is_object() ||
        !row.contains("sentence1") || !row.contains("sentence2") ||
        !row["sentence1"].is_string() || !row["sentence2"].is_string()) {
      ++stats.skipped_malformed;
      continue;
    }
    if (row.contains("label")) {
      if (!row["label"].is_string() ||
          row["label"].get<std::string>() != "entailment") {
        ++stats.filtered_by_label;
        continue;
      }
    }
    SentencePair p;
    p.text_a = row["sentence1"].get<std::string>();
    p.text_b = row["sentence2"].get<std::string>();
    p.ids_a = tokenize(p.text_a, vocab, max_len);
    p.ids_b = tokenize(p.text_b, vocab, max_len);
    pairs.push_back(std::move(p));
    ++stats.kept;
  }
  return finish_load(std::move(pairs), stats, path, out_stats);
}

std::vector<SentencePair> load_sts_tsv(const std::filesystem::path& path,
                                       const Vocab& vocab, int max_len,
                                       LoadStats* out_stats) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open sts file " + path.string());
  std::vector<SentencePair> pairs;
  LoadStats stats;
  bool ok = true;
  while (true) {
    std::string line = read_line_trim_cr(in, ok);
    if (!ok) break;
    ++stats.total_lines;
    const size_t t1 = line.find('\t');
    const size_t t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      ++stats.skipped_malformed;
      continue;
    }
    double score = 0;
    try {
      size_t used = 0;
      score = std::stod(line.substr(0, t1), &used);
      if (used != t1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      ++stats.skipped_malformed;
      continue;
    }
    if (!(score >= 0.0 && score <= 5.0)) {
      ++stats.skipped_malformed;
      continue;
    }
    SentencePair p;
    p.score = score;
    p.text_a = line.substr(t1 + 1, t2 - t1 - 1);
    p.text_b = line.substr(t2 + 1);
    p.ids_a = tokenize(p.text_a, vocab, max_len);
    p.ids_b = tokenize(p.text_b, vocab, max_len);
    pairs.push_back(std::move(p));
    ++stats.kept;
  }
  return finish_load(std::move(pairs), stats, path, out_stats);
}

std::vector<SentencePair> synth_pairs(int64_t n, const Vocab& vocab,
                                      uint64_t seed, int n_topics,
                                      int max_len) {
  if (n_topics < 2) throw ConfigError("synth_pairs: n_topics must be >= 2");
  if (n < 1) throw ConfigError("synth_pairs: n must be >= 1");
  std::vector<int64_t> usable;
  for (int64_t id = 0; id < vocab.size(); ++id) {
    if (id != vocab.pad_id && id != vocab.unk_id && id != vocab.cls_id &&
        id != vocab.sep_id) {
      usable.push_back(id);
    }
  }
  constexpr int64_t kMinPool = 16;
  if (static_cast<int64_t>(usable.size()) < n_topics * kMinPool) {
    throw ConfigError("synth_pairs: vocab too small for " +
                      std::to_string(n_topics) + " disjoint pools of " +
                      std::to_string(kMinPool));
  }
  Rng rng(seed);
  rng.shuffle(usable);
  const int64_t pool_size =
      std::min<int64_t>(64, static_cast<int64_t>(usable.size()) / n_topics);

  std::vector<SentencePair> pairs;
  pairs.reserve(static_cast<size_t>(n));
  std::vector<int64_t> pool(static_cast<size_t>(pool_size));
  for (int64_t i = 0; i < n; ++i) {
    const int topic = static_cast<int>(i % n_topics);
    const int64_t* pool_begin = usable.data() + topic * pool_size;
    std::copy_n(pool_begin, pool_size, pool.begin());
    rng.shuffle(pool);
    // Both sides carry the same per-pair core plus fresh per-side noise, all
    // from one topic pool: matched sides overlap strongly, same-topic
    // distractors only by chance, cross-topic pairs not at all.
    const int64_t core = 5 + rng.uniform_int(0, 3);
    auto build_text = [&] {
      std::vector<int64_t> words(pool.begin(), pool.begin() + core);
      const int64_t noise = 2 + rng.uniform_int(0, 2);
      for (int64_t k = 0; k < noise; ++k) {
        words.push_back(pool[static_cast<size_t>(
            core + rng.uniform_int(0, pool_size - core - 1))]);
      }
      rng.shuffle(words);
      std::string text;
      for (int64_t id : words) {
        if (!text.empty()) text += ' ';
        text += vocab.tokens[static_cast<size_t>(id)];
      }
      return text;
    };
    SentencePair p;
    p.text_a = build_text();
    p.text_b = build_text();
    p.ids_a = tokenize(p.text_a, vocab, max_len);
    p.ids_b = tokenize(p.text_b, vocab, max_len);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

namespace {

TokenBatch pad_side(const std::vector<const std::vector<int64_t>*>& rows,
                    int64_t pad_id) {
  TokenBatch tb;
  tb.batch = static_cast<int64_t>(rows.size());
  tb.seq = 0;
  for (const auto* r : rows) {
    tb.seq = std::max(tb.seq, static_cast<int64_t>(r->size()));
  }
  tb.ids.assign(static_cast<size_t>(tb.batch * tb.seq), pad_id);
  tb.mask.assign(static_cast<size_t>(tb.batch * tb.seq), 0.0f);
  for (int64_t r = 0; r < tb.batch; ++r) {
    const auto& src = *rows[static_cast<size_t>(r)];
    for (size_t c = 0; c < src.size(); ++c) {
      tb.ids[static_cast<size_t>(r * tb.seq) + c] = src[c];
      tb.mask[static_cast<size_t>(r * tb.seq) + c] = 1.0f;
    }
  }
  return tb;
}

Batch build_batch(const std::vector<SentencePair>& pairs,
                  const std::vector<int64_t>& idx, int64_t pad_id) {
  std::vector<const std::vector<int64_t>*> rows_a, rows_b;
  bool scored = true;
  for (int64_t i : idx) {
    const SentencePair& p = pairs[static_cast<size_t>(i)];
    if (p.ids_a.empty() || p.ids_b.empty()) {
      throw Error("batch: pair " + std::to_string(i) +
                  " has an empty tokenization");
    }
    rows_a.push_back(&p.ids_a);
    rows_b.push_back(&p.ids_b);
    scored = scored && p.score.has_value();
  }
  Batch b;
  b.a = pad_side(rows_a, pad_id);
  b.b = pad_side(rows_b, pad_id);
  if (scored) {
    for (int64_t i : idx) {
      b.scores.push_back(*pairs[static_cast<size_t>(i)].score);
    }
  }
  return b;
}

}  // namespace

std::vector<Batch> make_batches(const std::vector<SentencePair>& pairs,
                                int batch_size, int max_len,
                                const Vocab& vocab, uint64_t seed) {
  if (batch_size < 2) {
    throw ConfigError("make_batches: batch_size must be >= 2 (contrastive "
                      "loss needs in-batch negatives)");
  }
  (void)max_len;  // rows were already truncated by tokenize
  std::vector<int64_t> order(pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) order[i] = static_cast<int64_t>(i);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Batch> batches;
  const size_t nb = pairs.size() / static_cast<size_t>(batch_size);
  batches.reserve(nb);
  for (size_t bi = 0; bi < nb; ++bi) {
    std::vector<int64_t> idx(order.begin() + bi * batch_size,
                             order.begin() + (bi + 1) * batch_size);
    batches.push_back(build_batch(pairs, idx, vocab.pad_id));
  }
  return batches;
}

std::vector<Batch> eval_batches(const std::vector<SentencePair>& pairs,
                                int batch_size, int64_t pad_id) {
  if (batch_size < 1) throw ConfigError("eval_batches: batch_size must be >= 1");
  std::vector<Batch> batches;
  for (size_t start = 0; start < pairs.size();
       start += static_cast<size_t>(batch_size)) {
    const size_t end =
        std::min(pairs.size(), start + static_cast<size_t>(batch_size));
    std::vector<int64_t> idx;
    for (size_t i = start; i < end; ++i) idx.push_back(static_cast<int64_t>(i));
    batches.push_back(build_batch(pairs, idx, pad_id));
  }
  return batches;
}

}  // namespace pete
