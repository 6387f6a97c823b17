#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nestnet/data.hpp"
#include "nestnet/losses.hpp"
#include "nestnet/supernet.hpp"

namespace nestnet {

enum class TrainMode { individual, all_in_one, all_in_one_kl };
enum class LossStyle { conformer, ssl };

std::string mode_to_string(TrainMode m);
TrainMode mode_from_string(const std::string& s);
std::string style_to_string(LossStyle s);
LossStyle style_from_string(const std::string& s);

struct TrainConfig {
  std::uint64_t total_steps = 3000;
  double peak_lr = 3e-3;
  double warmup_fraction = 0.10;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 16;
  std::uint64_t seed = 42;
  TrainMode mode = TrainMode::all_in_one_kl;
  LossStyle style = LossStyle::conformer;
  LossWeights weights;          // empty maps fall back to style defaults
  bool explicit_weights = false;  // true when `weights` already resolved
  std::size_t sample_k = 3;
  double grad_clip = 5.0;
  std::uint64_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::uint64_t log_every = 1;
};

/// Everything a reproducible run needs besides the corpus.
struct TrainSetup {
  EncoderConfig encoder;
  Grid grid;
  MaskPolicy policy = MaskPolicy::leading;
  TrainConfig train;
};

// Linear warmup over the first warmup_fraction of steps, then linear decay
// to zero at `total`.
double lr_at_step(std::uint64_t step, std::uint64_t total, double peak,
                  double warmup_fraction = 0.10);

// Always the largest and smallest spec plus k - 2 distinct draws from the
// rest; grids of up to k specs are returned whole. Largest-first order.
std::vector<SubnetSpec> sample_training_set(const std::vector<SubnetSpec>& grid_specs,
                                            Rng& rng, std::size_t k = 3);

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

struct StepMetrics {
  std::uint64_t step = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::map<std::string, double> loss;  // keyed by spec string
  std::map<std::string, double> kl;
  double total = 0.0;
};

struct Checkpoint {
  SupernetModel model;
  AdamState opt;
  std::uint64_t step = 0;
  std::string rng_data;
  std::string rng_sample;
};

// One optimizer update over the sampled sub-networks; samples the training
// set from `rng`, forwards every utterance of the batch under each spec,
// aggregates the multitask loss, and applies one decoupled-weight-decay
// adaptive-moment update (bias-corrected, step numbering from 1).
StepMetrics train_step(SupernetModel& model, AdamState& opt, const Batch& batch,
                       const TrainSetup& setup, std::uint64_t step, Rng& rng);

struct RunResult {
  Checkpoint checkpoint;
  double wall_sec = 0.0;
  double cpu_sec = 0.0;
};

// Deterministic under a fixed seed; checkpoints reproduce the exact
// continued trajectory. `stop_after` simulates an interruption.
RunResult train_run(const TrainSetup& setup, const ToyCorpus& corpus,
                    std::ostream* metrics = nullptr,
                    const std::string& checkpoint_dir = "",
                    const Checkpoint* resume = nullptr,
                    std::optional<std::uint64_t> stop_after = std::nullopt);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Style defaults merged under any user-specified coefficients.
LossWeights resolve_weights(const TrainSetup& setup);

}  // namespace nestnet
