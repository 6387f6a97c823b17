#pragma once

#include <string>
#include <vector>

#include "nestnet/data.hpp"
#include "nestnet/trainer.hpp"

namespace nestnet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Parsed and validated run configuration. Everything affecting
/// reproducibility lives in the JSON document; the CLI only adds paths.
struct RunConfig {
  CorpusMeta data;
  bool has_data = false;
  TrainSetup setup;
  bool has_train = false;
  std::string individual_spec;  // required when mode == individual
};

// Strict parse: unknown keys are rejected, missing required fields are
// reported by name. Throws nestnet::Error(config).
RunConfig parse_run_config(const std::string& json_text,
                           bool need_data, bool need_train);

int cmd_gen_data(const std::string& config_path, const std::string& out_path);
int cmd_train(const std::string& config_path, const std::string& corpus_path,
              const std::string& out_dir, const std::string& resume_path,
              std::uint64_t stop_after);
int cmd_extract(const std::string& checkpoint_path, const std::string& spec_str,
                const std::string& out_path);
int cmd_eval(const std::vector<std::string>& model_paths,
             const std::string& corpus_path, const std::string& out_dir,
             const std::string& baseline);
int cmd_report(const std::vector<std::string>& eval_paths,
               const std::string& out_dir, const std::string& baseline);

}  // namespace nestnet::cli
