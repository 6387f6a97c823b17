#pragma once

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nestnet/graph.hpp"
#include "nestnet/rng.hpp"
#include "nestnet/tensor.hpp"

namespace nestnet::test {

inline Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape,
                            double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Random rows with a guaranteed variance floor. Normalization layers are
// ill-conditioned on near-constant rows, where a finite-difference probe
// stops being trustworthy regardless of the analytic gradient.
inline Tensor random_tensor_spread(Rng& rng, std::size_t rows,
                                   std::size_t cols,
                                   double min_row_var = 0.05) {
  Tensor t = Tensor::zeros({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    for (;;) {
      double mean = 0.0, var = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        t.at(i, j) = rng.uniform(-1.0, 1.0);
        mean += t.at(i, j);
      }
      mean /= static_cast<double>(cols);
      for (std::size_t j = 0; j < cols; ++j) {
        const double d = t.at(i, j) - mean;
        var += d * d;
      }
      if (var / static_cast<double>(cols) >= min_row_var) break;
    }
  }
  return t;
}

// Replay closure for the finite-difference oracle: rebinds the named
// leaves, re-runs the recorded graph, reads the loss.
inline std::function<double(const std::map<std::string, Tensor>&)> replay_fn(
    Graph& g, NodeId loss) {
  return [&g, loss](const std::map<std::string, Tensor>& point) {
    for (const auto& [name, t] : point) g.bind(name, t);
    g.forward();
    return g.scalar_val(loss);
  };
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

inline double max_abs_diff(const GradMap& a, const GradMap& b) {
  double m = 0.0;
  for (const auto& [name, t] : a) {
    m = std::max(m, max_abs_diff(t, b.at(name)));
  }
  return m;
}

// Exhaustive CTC oracle: enumerates every frame-level alignment path,
// collapses repeats then removes blanks, and sums the probability of paths
// matching the target. Independent of the lattice recursion it checks.
inline double ctc_bruteforce_loss(const Tensor& log_posteriors,
                                  const std::vector<std::int32_t>& target) {
  const std::size_t frames = log_posteriors.rows();
  const std::size_t vocab = log_posteriors.cols();
  std::size_t n_paths = 1;
  for (std::size_t t = 0; t < frames; ++t) n_paths *= vocab;
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> matches;
  std::vector<std::int32_t> path(frames);
  for (std::size_t id = 0; id < n_paths; ++id) {
    std::size_t rest = id;
    double logp = 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
      path[t] = static_cast<std::int32_t>(rest % vocab);
      rest /= vocab;
      logp += log_posteriors.at(t, path[t]);
    }
    std::vector<std::int32_t> collapsed;
    for (std::size_t t = 0; t < frames; ++t) {
      if (t > 0 && path[t] == path[t - 1]) continue;
      if (path[t] != 0) collapsed.push_back(path[t]);
    }
    if (collapsed == target) {
      matches.push_back(logp);
      best = std::max(best, logp);
    }
  }
  if (matches.empty()) return std::numeric_limits<double>::infinity();
  double acc = 0.0;
  for (double lp : matches) acc += std::exp(lp - best);
  return -(best + std::log(acc));
}

// Random normalized log-posterior rows.
inline Tensor random_log_posteriors(Rng& rng, std::size_t frames,
                                    std::size_t vocab) {
  Tensor t = random_tensor(rng, {frames, vocab}, -2.0, 2.0);
  for (std::size_t i = 0; i < frames; ++i) {
    double m = t.at(i, 0);
    for (std::size_t v = 1; v < vocab; ++v) m = std::max(m, t.at(i, v));
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) z += std::exp(t.at(i, v) - m);
    const double lse = m + std::log(z);
    for (std::size_t v = 0; v < vocab; ++v) t.at(i, v) -= lse;
  }
  return t;
}

// Largest absolute disagreement between the analytic gradients of the
// built loss and the replay-based central-difference oracle.
inline double gradcheck_error(
    const std::function<NodeId(Graph&, const std::map<std::string, Tensor>&)>&
        build,
    const std::map<std::string, Tensor>& point, double eps = 1e-4) {
  Graph g;
  const NodeId loss = build(g, point);
  const GradMap analytic = g.gradients(loss);
  const GradMap numeric = finite_diff(replay_fn(g, loss), point, eps);
  double err = 0.0;
  // `point` may cover a subset of the trainable leaves.
  for (const auto& [name, grad] : numeric) {
    err = std::max(err, max_abs_diff(grad, analytic.at(name)));
  }
  return err;
}

inline std::map<std::string, Tensor> single_param(const std::string& name,
                                                  Tensor t) {
  std::map<std::string, Tensor> m;
  m.emplace(name, std::move(t));
  return m;
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() /
      ("nestnet_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace nestnet::test
