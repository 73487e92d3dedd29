#include "pete/config.hpp"

#include <algorithm>
#include <fstream>

namespace pete {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<std::string>& ConfigMap::known_keys() {
  static const std::vector<std::string> keys = {
      // model
      "embedding", "d_model", "n_layers", "n_heads", "ffn_factor",
      "head_factor", "dropout", "max_seq_len", "vocab_size", "seed",
      // training
      "batch_size", "steps", "lr", "warmup_steps", "weight_decay", "beta1",
      "beta2", "adam_eps", "log_every", "checkpoint_every", "clip_norm",
      "clip",
      // data and output
      "vocab", "pairs", "sts", "synthetic_pairs", "synthetic_topics",
      "synthetic_vocab", "out_dir"};
  return keys;
}

void ConfigMap::set(const std::string& key, const std::string& value) {
  const auto& keys = known_keys();
  if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
    throw ConfigError("unknown config key '" + key + "'");
  }
  values_[key] = value;
}

void ConfigMap::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    }
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::string ConfigMap::get_str(const std::string& key,
                               const std::string& dflt) const {
  const auto it = values_.find(key);
  return it == values_.end() ? dflt : it->second;
}

int64_t ConfigMap::get_int(const std::string& key, int64_t dflt) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  try {
    size_t used = 0;
    const int64_t v = std::stoll(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected integer, got '" +
                      it->second + "'");
  }
}

double ConfigMap::get_double(const std::string& key, double dflt) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  try {
    size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected number, got '" +
                      it->second + "'");
  }
}

bool ConfigMap::get_bool(const std::string& key, bool dflt) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" +
                    it->second + "'");
}

RunConfig ConfigMap::resolve() const {
  RunConfig rc;
  ModelConfig& m = rc.model;
  m.embedding_kind = embedding_kind_from_string(get_str("embedding", "fourier"));
  m.d_model = static_cast<int>(get_int("d_model", 256));
  m.n_layers = static_cast<int>(get_int("n_layers", 1));
  m.n_heads = static_cast<int>(get_int("n_heads", 1));
  m.ffn_factor = get_double("ffn_factor", 4.0);
  m.head_factor = get_double("head_factor", 0.25);
  m.max_seq_len = static_cast<int>(get_int("max_seq_len", 128));
  m.vocab_size = get_int("vocab_size", 30522);
  m.seed = static_cast<uint64_t>(get_int("seed", 0x5eed));

  // Dropout is baseline-only: the fourier embedding trains without it, and
  // asking for it explicitly is a contradiction rather than a silent no-op.
  if (has("dropout")) {
    const double p = get_double("dropout", 0.0);
    if (m.embedding_kind == EmbeddingKind::kFourier && p > 0.0) {
      throw ConfigError(
          "dropout > 0 conflicts with embedding=fourier: the fourier "
          "embedding omits dropout");
    }
    m.dropout_p = p;
  } else {
    m.dropout_p = m.embedding_kind == EmbeddingKind::kLearned ? 0.1 : 0.0;
  }

  TrainConfig& t = rc.train;
  t.batch_size = static_cast<int>(get_int("batch_size", 128));
  t.total_steps = get_int("steps", 1000);
  t.peak_lr = get_double("lr", 2e-5);
  t.warmup_steps = get_int("warmup_steps", std::min<int64_t>(1000, t.total_steps));
  t.weight_decay = get_double("weight_decay", 0.01);
  t.beta1 = get_double("beta1", 0.9);
  t.beta2 = get_double("beta2", 0.999);
  t.adam_eps = get_double("adam_eps", 1e-8);
  t.seed = m.seed;
  t.log_every = get_int("log_every", 10);
  t.checkpoint_every = get_int("checkpoint_every", 0);
  t.clip_gradients = get_bool("clip", true);
  t.clip_norm = get_double("clip_norm", 1.0);

  rc.vocab_path = get_str("vocab", "");
  rc.pairs_path = get_str("pairs", "");
  rc.sts_path = get_str("sts", "");
  rc.out_dir = get_str("out_dir", "out");
  rc.synthetic_pairs = get_int("synthetic_pairs", 0);
  rc.synthetic_topics = static_cast<int>(get_int("synthetic_topics", 4));
  rc.synthetic_vocab = get_int("synthetic_vocab", 512);

  m.validate();
  t.validate();
  return rc;
}

}  // namespace pete
