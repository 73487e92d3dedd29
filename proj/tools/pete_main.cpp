#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "pete/bench.hpp"
#include "pete/checkpoint.hpp"
#include "pete/config.hpp"
#include "pete/eval.hpp"
#include "pete/fourier.hpp"
#include "pete/model.hpp"
#include "pete/train.hpp"

namespace {

using namespace pete;

void require_exists(const std::string& path, const char* what) {
  if (path.empty()) {
    throw ConfigError(std::string(what) + " path is required");
  }
  if (!std::filesystem::exists(path)) {
    throw ConfigError(std::string(what) + " path does not exist: " + path);
  }
}

void write_text_file(const std::filesystem::path& path,
                     const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// Registers one string-valued flag that lands in the ConfigMap only when the
// user passes it, so flags always override config-file values.
void map_option(CLI::App* cmd, ConfigMap& cfg, const std::string& flag,
                const std::string& key, const std::string& help) {
  cmd->add_option_function<std::string>(
      flag, [&cfg, key](const std::string& v) { cfg.set(key, v); }, help);
}

void register_run_options(CLI::App* cmd, ConfigMap& cfg) {
  map_option(cmd, cfg, "--embedding", "embedding",
             "embedding kind: fourier or learned (default fourier)");
  map_option(cmd, cfg, "--d-model", "d_model", "model width (default 256)");
  map_option(cmd, cfg, "--layers", "n_layers", "encoder layers (default 1)");
  map_option(cmd, cfg, "--heads", "n_heads", "attention heads (default 1)");
  map_option(cmd, cfg, "--ffn-factor", "ffn_factor",
             "layer FFN hidden factor (default 4)");
  map_option(cmd, cfg, "--head-factor", "head_factor",
             "fourier head hidden factor (default 0.25)");
  map_option(cmd, cfg, "--dropout", "dropout",
             "dropout probability (default 0.1 learned / 0 fourier)");
  map_option(cmd, cfg, "--max-seq-len", "max_seq_len",
             "tokenizer length cap (default 128)");
  map_option(cmd, cfg, "--vocab-size", "vocab_size",
             "vocab size when no vocab file is given (default 30522)");
  map_option(cmd, cfg, "--seed", "seed", "run seed (default 24301)");
  map_option(cmd, cfg, "--batch-size", "batch_size", "batch size (default 128)");
  map_option(cmd, cfg, "--steps", "steps", "training steps (default 1000)");
  map_option(cmd, cfg, "--lr", "lr", "peak learning rate (default 2e-5)");
  map_option(cmd, cfg, "--warmup-steps", "warmup_steps",
             "linear warmup steps (default 1000)");
  map_option(cmd, cfg, "--weight-decay", "weight_decay",
             "AdamW weight decay (default 0.01)");
  map_option(cmd, cfg, "--beta1", "beta1", "Adam beta1 (default 0.9)");
  map_option(cmd, cfg, "--beta2", "beta2", "Adam beta2 (default 0.999)");
  map_option(cmd, cfg, "--adam-eps", "adam_eps", "Adam epsilon (default 1e-8)");
  map_option(cmd, cfg, "--log-every", "log_every",
             "metric cadence in steps (default 10)");
  map_option(cmd, cfg, "--checkpoint-every", "checkpoint_every",
             "intermediate checkpoint cadence, 0 = final only");
  map_option(cmd, cfg, "--clip-norm", "clip_norm",
             "gradient clip norm (default 1.0)");
  map_option(cmd, cfg, "--clip", "clip", "enable gradient clipping (default true)");
  map_option(cmd, cfg, "--vocab", "vocab", "vocab file, one token per line");
  map_option(cmd, cfg, "--pairs", "pairs", "training pairs JSONL");
  map_option(cmd, cfg, "--sts", "sts", "STS TSV: score<TAB>s1<TAB>s2");
  map_option(cmd, cfg, "--synthetic-pairs", "synthetic_pairs",
             "generate this many synthetic pairs instead of loading data");
  map_option(cmd, cfg, "--synthetic-topics", "synthetic_topics",
             "topic count for the synthetic corpus (default 4)");
  map_option(cmd, cfg, "--synthetic-vocab", "synthetic_vocab",
             "synthetic vocab size (default 512)");
  map_option(cmd, cfg, "--out-dir", "out_dir", "output directory (default out)");
}

Vocab vocab_for_run(const RunConfig& rc) {
  if (!rc.vocab_path.empty()) {
    require_exists(rc.vocab_path, "vocab");
    return Vocab::load(rc.vocab_path);
  }
  return Vocab::synthetic(rc.synthetic_vocab);
}

int cmd_train(const ConfigMap& cfg) {
  RunConfig rc = cfg.resolve();
  if (rc.synthetic_pairs == 0 && rc.pairs_path.empty()) {
    throw ConfigError("train needs --pairs or --synthetic-pairs");
  }
  if (rc.synthetic_pairs == 0 && rc.vocab_path.empty()) {
    throw ConfigError("train with --pairs needs a --vocab file");
  }
  Vocab vocab = vocab_for_run(rc);
  rc.model.vocab_size = vocab.size();
  rc.model.validate();

  std::vector<SentencePair> pairs;
  if (rc.synthetic_pairs > 0) {
    pairs = synth_pairs(rc.synthetic_pairs, vocab, rc.model.seed,
                        rc.synthetic_topics, rc.model.max_seq_len);
  } else {
    require_exists(rc.pairs_path, "pairs");
    pairs = load_pairs_jsonl(rc.pairs_path, vocab, rc.model.max_seq_len);
  }

  std::filesystem::create_directories(rc.out_dir);
  Model model = build_model(rc.model, rc.model.seed);
  const ParamCount pc = param_count(rc.model);
  std::cout << "training " << to_string(rc.model.embedding_kind)
            << " model: " << pc.total << " parameters, " << pairs.size()
            << " pairs, " << rc.train.total_steps << " steps\n";
  const TrainResult result = train_loop(model, pairs, rc.train, vocab,
                                        rc.out_dir);
  write_text_file(std::filesystem::path(rc.out_dir) / "metrics.csv",
                  metrics_csv(result.log));
  if (result.halted_non_finite) {
    std::cerr << "training halted on non-finite loss after "
              << result.steps_run << " steps; last checkpoint retained\n";
    return 2;
  }
  std::cout << "final loss " << result.log.back().loss << " after "
            << result.steps_run << " steps\n";
  std::cout << "checkpoint: " << result.final_checkpoint.string() << "\n";
  std::cout << "metrics:    "
            << (std::filesystem::path(rc.out_dir) / "metrics.csv").string()
            << "\n";
  return 0;
}

int cmd_eval_sts(const std::string& checkpoint, const std::string& sts,
                 const std::string& vocab_path, int batch_size, bool as_json) {
  require_exists(checkpoint, "checkpoint");
  require_exists(sts, "sts");
  Model model = load_checkpoint(checkpoint);
  Vocab vocab = vocab_path.empty()
                    ? Vocab::synthetic(model.cfg.vocab_size)
                    : Vocab::load(vocab_path);
  if (vocab.size() != model.cfg.vocab_size) {
    throw ConfigError("vocab size " + std::to_string(vocab.size()) +
                      " does not match checkpoint vocab_size " +
                      std::to_string(model.cfg.vocab_size));
  }
  const auto pairs = load_sts_tsv(sts, vocab, model.cfg.max_seq_len);
  const EvalReport report = evaluate_sts(model, pairs, batch_size);
  std::cout << (as_json ? report.to_json() + "\n" : report.to_text());
  return 0;
}

int cmd_embed(const std::string& checkpoint, const std::string& vocab_path,
              const std::string& text) {
  require_exists(checkpoint, "checkpoint");
  Model model = load_checkpoint(checkpoint);
  Vocab vocab = vocab_path.empty()
                    ? Vocab::synthetic(model.cfg.vocab_size)
                    : Vocab::load(vocab_path);
  TokenBatch tb;
  tb.batch = 1;
  std::vector<int64_t> ids = tokenize(text, vocab, model.cfg.max_seq_len);
  tb.seq = static_cast<int64_t>(ids.size());
  tb.ids = std::move(ids);
  tb.mask.assign(static_cast<size_t>(tb.seq), 1.0f);
  Tensor v = encode(tb, model);
  for (int64_t i = 0; i < v.numel(); ++i) {
    std::cout << (i ? " " : "") << v.data()[static_cast<size_t>(i)];
  }
  std::cout << "\n";
  return 0;
}

int cmd_bench(int64_t vocab_size, int64_t d_model, int64_t batch, int64_t seq,
              int iters, int threads, uint64_t seed, const std::string& csv) {
  const EmbeddingConfig cfg{vocab_size, d_model};
  const auto results = bench_embedding(cfg, batch, seq, iters, seed, threads);
  const std::string table = bench_csv(results);
  if (!csv.empty()) {
    write_text_file(csv, table);
    std::cout << "wrote " << csv << "\n";
  }
  std::cout << table;
  return 0;
}

int cmd_analyze(int64_t vocab_size, int64_t d_model, int64_t sample,
                int64_t random_pairs, uint64_t seed, const std::string& csv) {
  const EmbeddingConfig cfg{vocab_size, d_model};
  const auto stats =
      sample > 0 ? collision_stats(cfg, sample, seed, random_pairs)
                 : collision_stats(cfg, std::nullopt, seed, random_pairs);
  std::cout << stats.report_text();
  if (!csv.empty()) {
    write_text_file(csv, stats.to_csv());
    std::cout << "wrote " << csv << "\n";
  }
  return 0;
}

int cmd_param_count(const ConfigMap& cfg) {
  const RunConfig rc = cfg.resolve();
  const ParamCount pc = param_count(rc.model);
  std::cout << to_string(rc.model.embedding_kind) << " model, "
            << rc.model.n_layers << " layer(s), d_model " << rc.model.d_model
            << ":\n"
            << pc.report_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pete: parameter-efficient transformer embeddings"};
  app.require_subcommand(1);

  ConfigMap train_cfg;
  std::string train_config_file;
  CLI::App* train = app.add_subcommand("train", "contrastive training run");
  train
      ->add_option("--config", train_config_file,
                   "key=value config file ('#' comments); flags override it")
      ->check(CLI::ExistingFile);
  register_run_options(train, train_cfg);

  std::string es_ckpt, es_sts, es_vocab;
  int es_batch = 32;
  bool es_json = false;
  CLI::App* eval_sts = app.add_subcommand("eval-sts", "zero-shot STS scoring");
  eval_sts->add_option("--checkpoint", es_ckpt, "model checkpoint")->required();
  eval_sts->add_option("--sts", es_sts, "TSV: score<TAB>s1<TAB>s2")->required();
  eval_sts->add_option("--vocab", es_vocab, "vocab file");
  eval_sts->add_option("--batch-size", es_batch, "encode batch size");
  eval_sts->add_flag("--json", es_json, "emit JSON instead of text");

  std::string em_ckpt, em_vocab, em_text;
  CLI::App* embed = app.add_subcommand("embed", "print a sentence vector");
  embed->add_option("--checkpoint", em_ckpt, "model checkpoint")->required();
  embed->add_option("--vocab", em_vocab, "vocab file");
  embed->add_option("--text", em_text, "input text")->required();

  int64_t b_vocab = 30522, b_d = 256, b_batch = 64, b_seq = 64;
  int b_iters = 30, b_threads = 1;
  uint64_t b_seed = 0x5eed;
  std::string b_csv;
  CLI::App* bench = app.add_subcommand("bench", "embedding microbenchmark");
  bench->add_option("--vocab-size", b_vocab, "vocab size (default 30522)");
  bench->add_option("--d-model", b_d, "embedding width (default 256)");
  bench->add_option("--batch", b_batch, "batch rows (default 64)");
  bench->add_option("--seq", b_seq, "sequence length (default 64)");
  bench->add_option("--iters", b_iters, "measured iterations, >= 10");
  bench->add_option("--threads", b_threads, "extra fused-path thread count");
  bench->add_option("--seed", b_seed, "id seed");
  bench->add_option("--csv", b_csv, "write results CSV here");

  int64_t a_vocab = 30522, a_d = 256, a_sample = 0, a_pairs = 1000000;
  uint64_t a_seed = 0x5eed;
  std::string a_csv;
  CLI::App* analyze =
      app.add_subcommand("analyze-collisions", "base embedding distances");
  analyze->add_option("--vocab-size", a_vocab, "vocab size (default 30522)");
  analyze->add_option("--d-model", a_d, "embedding width (default 256)");
  analyze->add_option("--sample", a_sample,
                      "exact all-pairs over this many sampled ids (0 = full "
                      "adjacent scan)");
  analyze->add_option("--random-pairs", a_pairs,
                      "random cross-check pairs (default 1e6)");
  analyze->add_option("--seed", a_seed, "sampling seed");
  analyze->add_option("--csv", a_csv, "write pair_rank,distance CSV here");

  ConfigMap pc_cfg;
  CLI::App* pcount =
      app.add_subcommand("param-count", "closed-form parameter accounting");
  register_run_options(pcount, pc_cfg);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    if (train->parsed()) {
      if (!train_config_file.empty()) {
        // Flags were already applied to the map; reload precedence is
        // file-first, so stash flag values, apply file, re-apply flags.
        ConfigMap merged;
        merged.load_file(train_config_file);
        // Re-parse flags on top: train_cfg holds only flag-provided values.
        for (const auto& key : ConfigMap::known_keys()) {
          if (train_cfg.has(key)) merged.set(key, train_cfg.get_str(key, ""));
        }
        return cmd_train(merged);
      }
      return cmd_train(train_cfg);
    }
    if (eval_sts->parsed()) {
      return cmd_eval_sts(es_ckpt, es_sts, es_vocab, es_batch, es_json);
    }
    if (embed->parsed()) return cmd_embed(em_ckpt, em_vocab, em_text);
    if (bench->parsed()) {
      return cmd_bench(b_vocab, b_d, b_batch, b_seq, b_iters, b_threads,
                       b_seed, b_csv);
    }
    if (analyze->parsed()) {
      return cmd_analyze(a_vocab, a_d, a_sample, a_pairs, a_seed, a_csv);
    }
    if (pcount->parsed()) return cmd_param_count(pc_cfg);
    std::cerr << "no subcommand\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
