#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace nestnet {

/// Seedable random stream. Gaussian draws use Box-Muller over the raw
/// engine output so the byte stream is pinned by the seed alone and the
/// state is exactly the engine state (nothing cached between calls).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Uniform index in [0, n).
  std::size_t index(std::size_t n);
  double gaussian();

  std::string save_state() const;
  void restore_state(const std::string& state);

 private:
  std::mt19937_64 eng_;
};

/// Independent per-purpose streams so that, e.g., sub-network sampling does
/// not perturb data order when the model configuration changes.
struct RngStreams {
  Rng init;
  Rng data;
  Rng sample;

  explicit RngStreams(std::uint64_t seed);
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace nestnet
