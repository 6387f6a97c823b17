#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nestnet/tensor.hpp"

namespace nestnet {

struct CorpusMeta {
  std::uint64_t seed = 42;
  std::size_t vocab = 10;  // token count, excluding the blank
  std::size_t d_in = 8;
  std::size_t frames_per_token = 3;
  double noise_sigma = 0.5;
  std::size_t len_min = 3;
  std::size_t len_max = 8;
  std::size_t n_train = 2000;
  std::size_t n_dev = 200;
  std::size_t n_test = 200;
};

struct Utterance {
  std::vector<std::int32_t> tokens;  // ids in [1, vocab]
  Tensor frames;                     // [len * frames_per_token, d_in]
};

/// Deterministic synthetic corpus: each token renders a fixed Gaussian
/// template block, utterances add i.i.d. Gaussian frame noise. Splits are
/// disjoint by index range: train, then dev, then test.
struct ToyCorpus {
  CorpusMeta meta;
  std::vector<Tensor> templates;  // per token, [frames_per_token, d_in]
  std::vector<Utterance> utts;

  std::size_t n_total() const { return utts.size(); }
  std::size_t train_begin() const { return 0; }
  std::size_t dev_begin() const { return meta.n_train; }
  std::size_t test_begin() const { return meta.n_train + meta.n_dev; }
  std::vector<std::size_t> split_indices(const std::string& split) const;
};

ToyCorpus generate_corpus(const CorpusMeta& meta);

/// Zero-padded feature block with per-utterance lengths; the loss side
/// slices each utterance back to its true length, so padding never enters
/// a criterion.
struct Batch {
  Tensor feats;  // [B, T_max, d_in], zero padded
  std::vector<std::size_t> lengths;
  std::vector<std::vector<std::int32_t>> targets;

  std::size_t size() const { return lengths.size(); }
  Tensor utterance(std::size_t i) const;  // [lengths[i], d_in]
};

Batch make_batch(const ToyCorpus& corpus, const std::vector<std::size_t>& indices);

inline constexpr char kCorpusMagic[4] = {'A', 'I', 'C', '1'};
inline constexpr std::uint32_t kCorpusVersion = 1;

void save_corpus(const std::string& path, const ToyCorpus& corpus);
ToyCorpus load_corpus(const std::string& path);

// Identity of the generated data, used to refuse mixing evaluation runs
// from different corpora.
std::uint32_t corpus_checksum(const ToyCorpus& corpus);

}  // namespace nestnet
