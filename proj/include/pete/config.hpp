#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pete/model.hpp"
#include "pete/train.hpp"

namespace pete {

// Everything a run needs: model and training settings plus data locations.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string vocab_path;
  std::string pairs_path;
  std::string sts_path;
  std::string out_dir = "out";
  int64_t synthetic_pairs = 0;  // > 0 switches to the generated corpus
  int synthetic_topics = 4;
  int64_t synthetic_vocab = 512;
};

// String key/value configuration with one shared key set for config files
// and command-line flags. Files are key=value lines with '#' comments;
// unknown keys and type mismatches are fatal.
class ConfigMap {
 public:
  static const std::vector<std::string>& known_keys();

  void set(const std::string& key, const std::string& value);
  void load_file(const std::filesystem::path& path);
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& dflt) const;
  int64_t get_int(const std::string& key, int64_t dflt) const;
  double get_double(const std::string& key, double dflt) const;
  bool get_bool(const std::string& key, bool dflt) const;

  // Typed, validated RunConfig. Rejects dropout > 0 with the fourier
  // embedding; defaults dropout to 0.1 for the learned baseline and 0 for
  // fourier when unset.
  RunConfig resolve() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace pete
