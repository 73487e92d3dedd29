// End-to-end smoke of every CLI subcommand against the real binary,
// including exit-code conventions: 0 success, 1 usage, 2 runtime failure.

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

namespace {

namespace fs = std::filesystem;

int g_failures = 0;

void expect(bool cond, const std::string& what) {
  if (cond) {
    std::cout << "ok: " << what << "\n";
  } else {
    std::cout << "FAILED: " << what << "\n";
    ++g_failures;
  }
}

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(PETE_CLI_PATH) + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  while (fgets(buf.data(), buf.size(), pipe) != nullptr) r.output += buf.data();
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / "pete_cli_smoke";
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string out1 = (work / "run1").string();
  const std::string out2 = (work / "run2").string();

  // config file with a deliberate value the flag must override
  const fs::path cfg = work / "run.cfg";
  {
    std::ofstream f(cfg);
    f << "# smoke config\n"
      << "d_model = 64\n"
      << "n_layers = 1\n"
      << "steps = 40\n"
      << "batch_size = 16\n"
      << "lr = 1e-3\n"
      << "warmup_steps = 10\n"
      << "synthetic_pairs = 128\n"
      << "seed = 99\n";
  }

  // train (config + flag override; the flag sets d_model 32)
  const std::string train_args = "train --config " + cfg.string() +
                                 " --d-model 32 --out-dir ";
  RunResult t1 = run(train_args + out1);
  expect(t1.exit_code == 0, "train exits 0");
  expect(fs::exists(fs::path(out1) / "ckpt-final.bin"),
         "train writes the final checkpoint");
  expect(fs::exists(fs::path(out1) / "metrics.csv"),
         "train writes metrics.csv");
  {
    std::ifstream m(fs::path(out1) / "metrics.csv");
    std::string header;
    std::getline(m, header);
    expect(header == "step,loss,lr,elapsed_seconds", "metrics CSV header");
  }

  // determinism across two full CLI invocations
  RunResult t2 = run(train_args + out2);
  expect(t2.exit_code == 0, "second train exits 0");
  const std::string ck1 = slurp(fs::path(out1) / "ckpt-final.bin");
  const std::string ck2 = slurp(fs::path(out2) / "ckpt-final.bin");
  expect(!ck1.empty() && ck1 == ck2,
         "same seed gives bitwise-identical checkpoints");

  const std::string ckpt = (fs::path(out1) / "ckpt-final.bin").string();

  // embed prints a d-length vector (d_model overridden to 32)
  RunResult e = run("embed --checkpoint " + ckpt + " --text \"w00100 w00055\"");
  expect(e.exit_code == 0, "embed exits 0");
  {
    std::istringstream floats(e.output);
    int count = 0;
    double v;
    while (floats >> v) ++count;
    expect(count == 32, "embed prints exactly d_model floats");
  }

  // eval-sts over a tiny synthetic-vocab TSV
  const fs::path sts = work / "sts.tsv";
  {
    std::ofstream f(sts);
    f << "5.0\tw00010 w00011 w00012\tw00010 w00011 w00013\n"
      << "3.5\tw00020 w00021\tw00021 w00030\n"
      << "1.0\tw00040 w00041\tw00200 w00201\n"
      << "0.0\tw00050\tw00300 w00301 w00302\n";
  }
  RunResult ev = run("eval-sts --checkpoint " + ckpt + " --sts " +
                     sts.string() + " --json");
  expect(ev.exit_code == 0, "eval-sts exits 0");
  expect(ev.output.find("\"pearson\"") != std::string::npos &&
             ev.output.find("\"n\":4") != std::string::npos,
         "eval-sts emits the JSON report");

  // bench with CSV output
  const fs::path bench_csv = work / "bench.csv";
  RunResult b = run("bench --vocab-size 2000 --d-model 32 --batch 8 --seq 16 "
                    "--iters 10 --csv " +
                    bench_csv.string());
  expect(b.exit_code == 0, "bench exits 0");
  expect(slurp(bench_csv).rfind("variant,tokens_per_second,cv,bytes_table", 0) ==
             0,
         "bench CSV columns");
  expect(b.output.find("table,") != std::string::npos,
         "bench reports the table variant");

  // analyze-collisions with CSV
  const fs::path coll_csv = work / "collisions.csv";
  RunResult a = run(
      "analyze-collisions --vocab-size 2000 --d-model 32 --random-pairs 5000 "
      "--csv " +
      coll_csv.string());
  expect(a.exit_code == 0, "analyze-collisions exits 0");
  expect(a.output.find("endpoint pair") != std::string::npos,
         "collision report mentions the endpoint pair");
  expect(slurp(coll_csv).rfind("pair_rank,distance", 0) == 0,
         "collision CSV columns");

  // param-count reports a closed-form total
  RunResult p = run("param-count --layers 1 --d-model 256 --embedding fourier");
  expect(p.exit_code == 0, "param-count exits 0");
  expect(p.output.find("total") != std::string::npos &&
             p.output.find("1.16429m") != std::string::npos,
         "param-count prints a ~1.1m fourier total");

  // file-based training: vocab file + entailment-filtered JSONL
  const fs::path vocab_file = work / "vocab.txt";
  {
    std::ofstream f(vocab_file);
    f << "[PAD]\n[UNK]\n[CLS]\n[SEP]\n";
    for (int i = 0; i < 24; ++i) f << "word" << i << "\n";
  }
  const fs::path pairs_file = work / "pairs.jsonl";
  {
    std::ofstream f(pairs_file);
    for (int i = 0; i < 24; ++i) {
      const int a = i % 20, b = (i + 1) % 20, c = (i + 3) % 20;
      f << "{\"sentence1\": \"word" << a << " word" << b
        << "\", \"sentence2\": \"word" << b << " word" << c
        << "\", \"label\": \"entailment\"}\n";
    }
    f << "{\"sentence1\": \"word1\", \"sentence2\": \"word2\", \"label\": "
         "\"contradiction\"}\n";
  }
  RunResult ft = run("train --vocab " + vocab_file.string() + " --pairs " +
                     pairs_file.string() +
                     " --d-model 16 --steps 6 --batch-size 8 --lr 1e-3 "
                     "--warmup-steps 2 --out-dir " +
                     (work / "file_run").string());
  expect(ft.exit_code == 0, "file-based train exits 0");
  expect(ft.output.find("24 pairs") != std::string::npos,
         "contradiction row was filtered out");

  // help exits 0
  expect(run("--help").exit_code == 0, "--help exits 0");
  expect(run("train --help").exit_code == 0, "subcommand --help exits 0");

  // usage errors exit 1
  expect(run("train --no-such-flag 1").exit_code == 1,
         "unknown flag exits 1");
  expect(run("embed --text hi").exit_code == 1,
         "missing required option exits 1");
  expect(run("nonsense").exit_code == 1, "unknown subcommand exits 1");
  RunResult conflict = run(
      "train --synthetic-pairs 64 --embedding fourier --dropout 0.1 "
      "--steps 4 --batch-size 16 --d-model 32 --out-dir " +
      (work / "conflict").string());
  expect(conflict.exit_code == 1 &&
             conflict.output.find("fourier") != std::string::npos,
         "fourier + dropout conflict exits 1 citing the constraint");
  expect(run("train --steps 4").exit_code == 1,
         "train without data exits 1");

  // runtime errors exit 2
  const fs::path junk = work / "junk.bin";
  {
    std::ofstream f(junk, std::ios::binary);
    f << "not a checkpoint";
  }
  RunResult broken = run("embed --checkpoint " + junk.string() + " --text hi");
  expect(broken.exit_code == 2, "corrupt checkpoint exits 2");

  fs::remove_all(work);
  if (g_failures > 0) {
    std::cout << g_failures << " smoke check(s) failed\n";
    return 1;
  }
  std::cout << "all cli smoke checks passed\n";
  return 0;
}
