#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pete/batch.hpp"
#include "pete/error.hpp"

namespace pete {

// Names of the special tokens, overridable when a vocab file uses different
// literals.
struct SpecialTokens {
  std::string pad = "[PAD]";
  std::string unk = "[UNK]";
  std::string cls = "[CLS]";
  std::string sep = "[SEP]";
};

// One-token-per-line vocabulary; the line number is the id.
struct Vocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int64_t> index;
  int64_t pad_id = -1, unk_id = -1, cls_id = -1, sep_id = -1;

  int64_t size() const { return static_cast<int64_t>(tokens.size()); }
  // Id of a token or -1 when absent.
  int64_t lookup(std::string_view token) const;

  static Vocab load(const std::filesystem::path& path,
                    const SpecialTokens& specials = {});
  static Vocab from_tokens(std::vector<std::string> tokens,
                           const SpecialTokens& specials = {});
  // Deterministic synthetic vocabulary: the four specials followed by
  // numbered words, n_tokens total.
  static Vocab synthetic(int64_t n_tokens);
};

// Greedy longest-match WordPiece with "##" continuations, framed as
// [CLS] ... [SEP] and truncated to max_len with the [SEP] preserved.
// Lowercases ASCII; splits on whitespace and ASCII punctuation (best-effort
// for non-ASCII input). Unmatched words become [UNK].
std::vector<int64_t> tokenize(std::string_view text, const Vocab& vocab,
                              int max_len);

struct SentencePair {
  std::string text_a, text_b;
  std::optional<double> score;  // STS gold in [0, 5]
  std::vector<int64_t> ids_a, ids_b;
};

struct LoadStats {
  int64_t total_lines = 0;
  int64_t kept = 0;
  int64_t skipped_malformed = 0;
  int64_t filtered_by_label = 0;
};

// JSONL with keys sentence1, sentence2 and optional label; when a label is
// present only "entailment" rows are kept. Malformed lines are counted and
// skipped. Zero usable rows is an error.
std::vector<SentencePair> load_pairs_jsonl(const std::filesystem::path& path,
                                           const Vocab& vocab, int max_len,
                                           LoadStats* stats = nullptr);

// Tab-separated score<TAB>sentence1<TAB>sentence2 with score in [0, 5].
std::vector<SentencePair> load_sts_tsv(const std::filesystem::path& path,
                                       const Vocab& vocab, int max_len,
                                       LoadStats* stats = nullptr);

// Synthetic contrastive corpus: n_topics disjoint token pools; each pair
// draws a shared core of words from its topic pool plus per-side extras, so
// matched sides overlap heavily and unmatched pairs from other topics share
// nothing. Deterministic given the seed.
std::vector<SentencePair> synth_pairs(int64_t n, const Vocab& vocab,
                                      uint64_t seed, int n_topics,
                                      int max_len = 32);

struct Batch {
  TokenBatch a, b;
  std::vector<double> scores;  // empty when unscored
};

// Deterministic shuffle by seed, fixed batch size, final partial batch
// dropped, per-batch max-length padding.
std::vector<Batch> make_batches(const std::vector<SentencePair>& pairs,
                                int batch_size, int max_len,
                                const Vocab& vocab, uint64_t seed);

// Sequential batches for evaluation: no shuffle, remainder kept.
std::vector<Batch> eval_batches(const std::vector<SentencePair>& pairs,
                                int batch_size, int64_t pad_id);

}  // namespace pete
