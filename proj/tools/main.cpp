#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"nestnet: one-pass training of nested quantized encoders"};
  app.require_subcommand(1);

  std::string config_path, corpus_path, out_path, resume_path, spec_str,
      baseline;
  std::vector<std::string> files;
  std::uint64_t stop_after = 0;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  gen->add_option("--config", config_path, "Run config JSON")->required();
  gen->add_option("--out", out_path, "Corpus file to write")->required();

  CLI::App* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_path, "Run config JSON")->required();
  train->add_option("--corpus", corpus_path, "Corpus file")->required();
  train->add_option("--out", out_path, "Output directory")->required();
  train->add_option("--resume", resume_path, "Checkpoint to resume from");
  train->add_option("--stop-after", stop_after,
                    "Stop after this step (interruption testing)");

  CLI::App* extract = app.add_subcommand("extract", "Extract a sub-network");
  extract->add_option("--checkpoint", config_path, "Checkpoint or supernet file")
      ->required();
  extract->add_option("--spec", spec_str, "Sub-network, e.g. 8-1024-4bit")
      ->required();
  extract->add_option("--out", out_path, "Model file to write")->required();

  CLI::App* eval = app.add_subcommand("eval", "Evaluate model files");
  eval->add_option("--corpus", corpus_path, "Corpus file")->required();
  eval->add_option("--out", out_path, "Output directory")->required();
  eval->add_option("--baseline", baseline, "Baseline system name for marks");
  eval->add_option("models", files, "Model files")->required();

  CLI::App* report = app.add_subcommand("report", "Rebuild a report");
  report->add_option("--out", out_path, "Output directory")->required();
  report->add_option("--baseline", baseline, "Baseline system name")->required();
  report->add_option("evals", files, "Per-system eval JSON files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return nestnet::cli::kExitConfig;
  }

  if (gen->parsed()) return nestnet::cli::cmd_gen_data(config_path, out_path);
  if (train->parsed()) {
    return nestnet::cli::cmd_train(config_path, corpus_path, out_path,
                                   resume_path, stop_after);
  }
  if (extract->parsed()) {
    return nestnet::cli::cmd_extract(config_path, spec_str, out_path);
  }
  if (eval->parsed()) {
    return nestnet::cli::cmd_eval(files, corpus_path, out_path, baseline);
  }
  if (report->parsed()) {
    return nestnet::cli::cmd_report(files, out_path, baseline);
  }
  return nestnet::cli::kExitConfig;
}
