#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nestnet/encoder.hpp"
#include "nestnet/tensor.hpp"

namespace nestnet {

// Per-frame argmax, collapse consecutive repeats, drop blanks (token 0).
std::vector<std::int32_t> greedy_ctc_decode(const Tensor& log_posteriors);

struct EditCounts {
  std::size_t sub = 0;
  std::size_t del = 0;
  std::size_t ins = 0;
  std::size_t errors() const { return sub + del + ins; }
};

struct TerResult {
  EditCounts counts;
  double rate = 0.0;
};

// Levenshtein alignment with unit costs; rate = (S + D + I) / |ref|. An
// empty reference counts every hypothesis token as an insertion over
// length 1.
TerResult token_error_rate(const std::vector<std::int32_t>& hyp,
                           const std::vector<std::int32_t>& ref);

struct MapssweResult {
  double z = 0.0;
  bool significant = false;  // |z| > 1.96
};

// Matched-pairs test over per-utterance error counts: d_i = A_i - B_i,
// z = mean(d) / (stddev(d) / sqrt(n)) with the sample stddev. Positive z
// means system A makes MORE errors. A zero-variance nonzero-mean d is
// significant by convention (infinite z); all-zero d gives z = 0.
MapssweResult mapsswe(const std::vector<int>& errors_a,
                      const std::vector<int>& errors_b);

inline constexpr double kMapssweThreshold = 1.96;

/// Everything the report needs to know about one evaluated system.
struct SystemEval {
  std::string name;
  SubnetSpec spec;
  std::string mode;  // "baseline", "individual", "extracted", "supernet"
  double ter = 0.0;
  std::size_t total_errors = 0;
  std::size_t ref_tokens = 0;
  EditCounts counts;
  std::vector<int> per_utt_errors;
  std::size_t n_quantizable = 0;
  std::size_t n_fixed = 0;
  std::uint32_t corpus_crc = 0;
  std::size_t n_utts = 0;
};

enum class Mark { none, better, no_sig_diff, worse };

std::string mark_to_string(Mark m);

struct ReportRow {
  SystemEval sys;
  double compression_ratio = 0.0;
  double z_vs_baseline = 0.0;
  Mark vs_baseline = Mark::none;
  double z_vs_individual = 0.0;
  Mark vs_individual = Mark::none;  // against the same-spec individual system
};

struct EvalReport {
  std::string baseline;
  std::vector<ReportRow> rows;  // sorted by compression ratio
};

// Pairs every system against the named baseline and, where a same-spec
// individually trained system exists, against that counterpart. All
// systems must have been scored on the identical utterance set.
EvalReport build_report(const std::vector<SystemEval>& systems,
                        const std::string& baseline_name);

std::string render_report_table(const EvalReport& report);
std::string report_to_json(const EvalReport& report);

std::string system_eval_to_json(const SystemEval& sys);
SystemEval system_eval_from_json(const std::string& text);

}  // namespace nestnet
