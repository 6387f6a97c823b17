#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "helpers.hpp"
#include "nestnet/serialize.hpp"

using namespace nestnet;
using namespace nestnet::test;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

#ifndef NESTNET_BIN
#error "NESTNET_BIN must point at the CLI binary"
#endif

struct CmdResult {
  int exit_code = 0;
  std::string out;
  std::string err;
};

CmdResult run_cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt";
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(NESTNET_BIN) + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int rc = std::system(cmd.c_str());
  CmdResult res;
  res.exit_code = WEXITSTATUS(rc);
  std::ostringstream so, se;
  so << std::ifstream(out).rdbuf();
  se << std::ifstream(err).rdbuf();
  res.out = so.str();
  res.err = se.str();
  return res;
}

void write_config(const fs::path& path, const json& j) {
  std::ofstream f(path);
  f << j.dump(2);
}

json tiny_config() {
  return json{
      {"data",
       {{"seed", 7},
        {"n_train", 32},
        {"n_dev", 8},
        {"n_test", 8},
        {"len_min", 2},
        {"len_max", 4},
        {"vocab", 5},
        {"d_in", 4},
        {"frames_per_token", 2},
        {"noise_sigma", 0.3}}},
      {"encoder",
       {{"depth_max", 2},
        {"d_model", 8},
        {"ffn_max", 16},
        {"heads", 2},
        {"conv_kernel", 3}}},
      {"grid",
       {{"depths", {1, 2}}, {"widths", {8, 16}}, {"precisions", {4, 8}}}},
      {"mask_policy", "leading"},
      {"train",
       {{"mode", "all_in_one_kl"},
        {"total_steps", 8},
        {"batch_size", 4},
        {"seed", 7},
        {"peak_lr", 2e-3}}}};
}

}  // namespace

TEST_CASE("gen-data is idempotent and reports a summary") {
  const auto dir = temp_dir("cli_gen");
  write_config(dir / "cfg.json", tiny_config());
  const std::string base = "gen-data --config " + (dir / "cfg.json").string();
  const CmdResult a = run_cli(base + " --out " + (dir / "a.bin").string(), dir);
  REQUIRE(a.exit_code == 0);
  const json summary = json::parse(a.out);
  CHECK(summary.at("n_utts") == 48);
  const CmdResult b = run_cli(base + " --out " + (dir / "b.bin").string(), dir);
  REQUIRE(b.exit_code == 0);
  CHECK(read_file_bytes((dir / "a.bin").string()) ==
        read_file_bytes((dir / "b.bin").string()));
  fs::remove_all(dir);
}

TEST_CASE("gen-data rejects a config without a seed, naming the field") {
  const auto dir = temp_dir("cli_seed");
  json cfg = tiny_config();
  cfg["data"].erase("seed");
  write_config(dir / "cfg.json", cfg);
  const CmdResult r = run_cli("gen-data --config " + (dir / "cfg.json").string() +
                                  " --out " + (dir / "c.bin").string(),
                              dir);
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("data.seed") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("unknown config keys are rejected") {
  const auto dir = temp_dir("cli_unknown");
  json cfg = tiny_config();
  cfg["data"]["noise"] = 0.1;  // typo for noise_sigma
  write_config(dir / "cfg.json", cfg);
  const CmdResult r = run_cli("gen-data --config " + (dir / "cfg.json").string() +
                                  " --out " + (dir / "c.bin").string(),
                              dir);
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("data.noise") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("end-to-end: train, extract, eval, report") {
  const auto dir = temp_dir("cli_e2e");
  write_config(dir / "cfg.json", tiny_config());
  const std::string cfg = (dir / "cfg.json").string();
  const std::string corpus = (dir / "corpus.bin").string();
  REQUIRE(run_cli("gen-data --config " + cfg + " --out " + corpus, dir).exit_code == 0);

  // All-in-one training.
  const std::string aio_dir = (dir / "aio").string();
  const CmdResult train = run_cli(
      "train --config " + cfg + " --corpus " + corpus + " --out " + aio_dir, dir);
  REQUIRE(train.exit_code == 0);
  CHECK(fs::exists(aio_dir + "/checkpoint.aio"));
  CHECK(fs::exists(aio_dir + "/metrics.jsonl"));

  // Individual baseline at the largest architecture, full precision.
  json icfg = tiny_config();
  icfg["train"]["mode"] = "individual";
  icfg["train"]["individual_spec"] = "2-16-32bit";
  icfg["grid"] = {{"depths", {2}}, {"widths", {16}}, {"precisions", {32}}};
  write_config(dir / "icfg.json", icfg);
  const std::string base_dir = (dir / "base").string();
  REQUIRE(run_cli("train --config " + (dir / "icfg.json").string() +
                      " --corpus " + corpus + " --out " + base_dir,
                  dir)
              .exit_code == 0);

  // Extraction: malformed spec exits 2 with a grammar reminder.
  const CmdResult bad = run_cli("extract --checkpoint " + aio_dir +
                                    "/checkpoint.aio --spec 2-16 --out " +
                                    (dir / "bad.aio").string(),
                                dir);
  CHECK(bad.exit_code == 2);
  CHECK(bad.err.find("bit") != std::string::npos);

  const std::string small = (dir / "small.aio").string();
  REQUIRE(run_cli("extract --checkpoint " + aio_dir +
                      "/checkpoint.aio --spec 1-8-4bit --out " + small,
                  dir)
              .exit_code == 0);
  CHECK(fs::file_size(small) < fs::file_size(aio_dir + "/checkpoint.aio"));

  // Evaluation with a baseline produces a report over both systems.
  const std::string eval_dir = (dir / "eval").string();
  const CmdResult ev = run_cli(
      "eval --corpus " + corpus + " --out " + eval_dir + " --baseline checkpoint " +
          base_dir + "/checkpoint.aio " + small,
      dir);
  CHECK(ev.exit_code == 0);
  CHECK(fs::exists(eval_dir + "/report.txt"));
  CHECK(fs::exists(eval_dir + "/report.json"));
  CHECK(ev.out.find("1-8-4bit") != std::string::npos);

  // Rebuilding the report from the saved eval files reproduces it exactly.
  const std::string rep_dir = (dir / "rep").string();
  const CmdResult rep = run_cli(
      "report --out " + rep_dir + " --baseline checkpoint " + eval_dir +
          "/eval_checkpoint.json " + eval_dir + "/eval_small.json",
      dir);
  CHECK(rep.exit_code == 0);
  CHECK(read_file_bytes(eval_dir + "/report.json") ==
        read_file_bytes(rep_dir + "/report.json"));
  fs::remove_all(dir);
}

TEST_CASE("train interruption and resume reproduce the final checkpoint") {
  const auto dir = temp_dir("cli_resume");
  write_config(dir / "cfg.json", tiny_config());
  const std::string cfg = (dir / "cfg.json").string();
  const std::string corpus = (dir / "corpus.bin").string();
  REQUIRE(run_cli("gen-data --config " + cfg + " --out " + corpus, dir).exit_code == 0);

  const std::string full_dir = (dir / "full").string();
  REQUIRE(run_cli("train --config " + cfg + " --corpus " + corpus + " --out " +
                      full_dir,
                  dir)
              .exit_code == 0);
  const std::string part_dir = (dir / "part").string();
  REQUIRE(run_cli("train --config " + cfg + " --corpus " + corpus + " --out " +
                      part_dir + " --stop-after 4",
                  dir)
              .exit_code == 0);
  const std::string resumed_dir = (dir / "resumed").string();
  REQUIRE(run_cli("train --config " + cfg + " --corpus " + corpus + " --out " +
                      resumed_dir + " --resume " + part_dir + "/checkpoint.aio",
                  dir)
              .exit_code == 0);
  CHECK(read_file_bytes(full_dir + "/checkpoint.aio") ==
        read_file_bytes(resumed_dir + "/checkpoint.aio"));
  fs::remove_all(dir);
}

TEST_CASE("a full grid of systems renders one report with populated marks") {
  const auto dir = temp_dir("cli_grid");
  write_config(dir / "cfg.json", tiny_config());
  const std::string cfg = (dir / "cfg.json").string();
  const std::string corpus = (dir / "corpus.bin").string();
  REQUIRE(run_cli("gen-data --config " + cfg + " --out " + corpus, dir).exit_code == 0);

  // Baseline: the largest architecture, unquantized, trained on its own.
  json bcfg = tiny_config();
  bcfg["train"]["mode"] = "individual";
  bcfg["train"]["individual_spec"] = "2-16-32bit";
  write_config(dir / "bcfg.json", bcfg);
  REQUIRE(run_cli("train --config " + (dir / "bcfg.json").string() +
                      " --corpus " + corpus + " --out " + (dir / "b").string(),
                  dir)
              .exit_code == 0);
  fs::copy_file(dir / "b/checkpoint.aio", dir / "baseline.aio");
  std::string model_args = (dir / "baseline.aio").string();

  // Eight individually trained systems, one per grid point.
  const std::vector<std::string> specs{"2-16-8bit", "2-16-4bit", "2-8-8bit",
                                       "2-8-4bit",  "1-16-8bit", "1-16-4bit",
                                       "1-8-8bit",  "1-8-4bit"};
  for (const std::string& spec : specs) {
    json icfg = tiny_config();
    icfg["train"]["mode"] = "individual";
    icfg["train"]["individual_spec"] = spec;
    const std::string tag = "ind-" + spec;
    write_config(dir / (tag + ".json"), icfg);
    REQUIRE(run_cli("train --config " + (dir / (tag + ".json")).string() +
                        " --corpus " + corpus + " --out " +
                        (dir / tag).string(),
                    dir)
                .exit_code == 0);
    fs::copy_file(dir / tag / "checkpoint.aio", dir / (tag + ".aio"));
    model_args += " " + (dir / (tag + ".aio")).string();
  }

  // One all-in-one run, re-configured into all eight systems.
  REQUIRE(run_cli("train --config " + cfg + " --corpus " + corpus + " --out " +
                      (dir / "aio").string(),
                  dir)
              .exit_code == 0);
  for (const std::string& spec : specs) {
    const std::string out = (dir / ("ext-" + spec + ".aio")).string();
    REQUIRE(run_cli("extract --checkpoint " + (dir / "aio/checkpoint.aio").string() +
                        " --spec " + spec + " --out " + out,
                    dir)
                .exit_code == 0);
    model_args += " " + out;
  }

  const CmdResult ev = run_cli("eval --corpus " + corpus + " --out " +
                                   (dir / "eval").string() +
                                   " --baseline baseline " + model_args,
                               dir);
  REQUIRE(ev.exit_code == 0);
  const json report =
      json::parse(std::ifstream((dir / "eval/report.json").string()));
  REQUIRE(report.at("rows").size() == 17);
  std::size_t extracted_marked = 0;
  for (const json& row : report.at("rows")) {
    if (row.at("mode") == "extracted") {
      CHECK(row.at("vs_individual") != "-");  // counterpart exists
      ++extracted_marked;
    }
    if (row.at("name") != "baseline") {
      CHECK(row.at("vs_baseline") != "-");
    }
  }
  CHECK(extracted_marked == 8);
  fs::remove_all(dir);
}

TEST_CASE("eval output is independent of the worker thread count") {
  const auto dir = temp_dir("cli_threads");
  write_config(dir / "cfg.json", tiny_config());
  const std::string cfg = (dir / "cfg.json").string();
  const std::string corpus = (dir / "corpus.bin").string();
  REQUIRE(run_cli("gen-data --config " + cfg + " --out " + corpus, dir).exit_code == 0);
  const std::string run_dir = (dir / "run").string();
  REQUIRE(run_cli("train --config " + cfg + " --corpus " + corpus + " --out " +
                      run_dir,
                  dir)
              .exit_code == 0);
  const std::string small = (dir / "small.aio").string();
  REQUIRE(run_cli("extract --checkpoint " + run_dir +
                      "/checkpoint.aio --spec 1-8-8bit --out " + small,
                  dir)
              .exit_code == 0);
  const std::string models = run_dir + "/checkpoint.aio " + small;
  REQUIRE(std::system(("NESTNET_THREADS=1 " NESTNET_BIN " eval --corpus " +
                       corpus + " --out " + (dir / "e1").string() + " " +
                       models + " > /dev/null 2>&1")
                          .c_str()) == 0);
  REQUIRE(std::system(("NESTNET_THREADS=2 " NESTNET_BIN " eval --corpus " +
                       corpus + " --out " + (dir / "e2").string() + " " +
                       models + " > /dev/null 2>&1")
                          .c_str()) == 0);
  CHECK(read_file_bytes((dir / "e1/eval_checkpoint.json").string()) ==
        read_file_bytes((dir / "e2/eval_checkpoint.json").string()));
  CHECK(read_file_bytes((dir / "e1/eval_small.json").string()) ==
        read_file_bytes((dir / "e2/eval_small.json").string()));
  fs::remove_all(dir);
}

TEST_CASE("eval refuses models scored against a different corpus") {
  const auto dir = temp_dir("cli_crc");
  write_config(dir / "cfg.json", tiny_config());
  json cfg2 = tiny_config();
  cfg2["data"]["seed"] = 8;
  write_config(dir / "cfg2.json", cfg2);
  const std::string corpus_a = (dir / "a.bin").string();
  const std::string corpus_b = (dir / "b.bin").string();
  REQUIRE(run_cli("gen-data --config " + (dir / "cfg.json").string() +
                      " --out " + corpus_a,
                  dir)
              .exit_code == 0);
  REQUIRE(run_cli("gen-data --config " + (dir / "cfg2.json").string() +
                      " --out " + corpus_b,
                  dir)
              .exit_code == 0);
  const std::string run_dir = (dir / "run").string();
  REQUIRE(run_cli("train --config " + (dir / "cfg.json").string() +
                      " --corpus " + corpus_a + " --out " + run_dir,
                  dir)
              .exit_code == 0);
  // Score the same checkpoint on both corpora, then try to merge.
  const std::string eval_a = (dir / "eva").string();
  const std::string eval_b = (dir / "evb").string();
  REQUIRE(run_cli("eval --corpus " + corpus_a + " --out " + eval_a + " " +
                      run_dir + "/checkpoint.aio",
                  dir)
              .exit_code == 0);
  REQUIRE(run_cli("eval --corpus " + corpus_b + " --out " + eval_b + " " +
                      run_dir + "/checkpoint.aio",
                  dir)
              .exit_code == 0);
  // Rename the second record so both can appear in one report request.
  fs::copy_file(eval_b + "/eval_checkpoint.json", eval_b + "/eval_other.json");
  const CmdResult rep = run_cli(
      "report --out " + (dir / "rep").string() + " --baseline checkpoint " +
          eval_a + "/eval_checkpoint.json " + eval_b + "/eval_other.json",
      dir);
  CHECK(rep.exit_code == 2);  // inconsistent usage, not a runtime fault
  CHECK(rep.err.find("corpus") != std::string::npos);
  fs::remove_all(dir);
}
