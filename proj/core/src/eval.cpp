#include "nestnet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "nestnet/error.hpp"

namespace nestnet {

using nlohmann::json;

std::vector<std::int32_t> greedy_ctc_decode(const Tensor& log_posteriors) {
  const std::size_t frames = log_posteriors.rows();
  const std::size_t vocab = log_posteriors.cols();
  std::vector<std::int32_t> out;
  std::int32_t prev = -1;
  for (std::size_t t = 0; t < frames; ++t) {
    const double* row = log_posteriors.data() + t * vocab;
    std::size_t best = 0;
    for (std::size_t v = 1; v < vocab; ++v) {
      if (row[v] > row[best]) best = v;
    }
    const std::int32_t tok = static_cast<std::int32_t>(best);
    if (tok != prev && tok != 0) out.push_back(tok);
    prev = tok;
  }
  return out;
}

TerResult token_error_rate(const std::vector<std::int32_t>& hyp,
                           const std::vector<std::int32_t>& ref) {
  TerResult res;
  if (ref.empty()) {
    res.counts.ins = hyp.size();
    res.rate = static_cast<double>(hyp.size());  // over length 1
    return res;
  }
  const std::size_t n = ref.size(), m = hyp.size();
  // dp[i][j] = (cost, sub, del, ins) over ref[0..i) vs hyp[0..j).
  struct Cell {
    std::size_t cost, sub, del, ins;
  };
  std::vector<Cell> prev_row(m + 1), row(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev_row[j] = {j, 0, 0, j};
  for (std::size_t i = 1; i <= n; ++i) {
    row[0] = {i, 0, i, 0};
    for (std::size_t j = 1; j <= m; ++j) {
      const bool match = ref[i - 1] == hyp[j - 1];
      const std::size_t sub_cost = prev_row[j - 1].cost + (match ? 0 : 1);
      const std::size_t del_cost = prev_row[j].cost + 1;
      const std::size_t ins_cost = row[j - 1].cost + 1;
      if (sub_cost <= del_cost && sub_cost <= ins_cost) {
        row[j] = prev_row[j - 1];
        row[j].cost = sub_cost;
        if (!match) ++row[j].sub;
      } else if (del_cost <= ins_cost) {
        row[j] = prev_row[j];
        row[j].cost = del_cost;
        ++row[j].del;
      } else {
        row[j] = row[j - 1];
        row[j].cost = ins_cost;
        ++row[j].ins;
      }
    }
    std::swap(prev_row, row);
  }
  const Cell& final_cell = prev_row[m];
  res.counts.sub = final_cell.sub;
  res.counts.del = final_cell.del;
  res.counts.ins = final_cell.ins;
  res.rate = static_cast<double>(final_cell.cost) / static_cast<double>(n);
  return res;
}

MapssweResult mapsswe(const std::vector<int>& errors_a,
                      const std::vector<int>& errors_b) {
  if (errors_a.size() != errors_b.size()) {
    fail(ErrorKind::config, "mapsswe: unpaired error vectors");
  }
  const std::size_t n = errors_a.size();
  if (n < 2) fail(ErrorKind::config, "mapsswe: needs at least 2 segments");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean += static_cast<double>(errors_a[i] - errors_b[i]);
  }
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(errors_a[i] - errors_b[i]) - mean;
    var += d * d;
  }
  var /= static_cast<double>(n - 1);  // sample variance
  MapssweResult res;
  if (var == 0.0) {
    if (mean == 0.0) {
      res.z = 0.0;
      res.significant = false;
    } else {
      // Zero variance with a nonzero mean: declared significant.
      res.z = mean > 0.0 ? std::numeric_limits<double>::infinity()
                         : -std::numeric_limits<double>::infinity();
      res.significant = true;
    }
    return res;
  }
  res.z = mean / (std::sqrt(var) / std::sqrt(static_cast<double>(n)));
  res.significant = std::abs(res.z) > kMapssweThreshold;
  return res;
}

std::string mark_to_string(Mark m) {
  switch (m) {
    case Mark::none: return "-";
    case Mark::better: return "better";
    case Mark::no_sig_diff: return "nsd";
    case Mark::worse: return "worse";
  }
  return "?";
}

namespace {

Mark mark_from_z(const MapssweResult& r) {
  if (!r.significant) return Mark::no_sig_diff;
  return r.z < 0.0 ? Mark::better : Mark::worse;
}

}  // namespace

EvalReport build_report(const std::vector<SystemEval>& systems,
                        const std::string& baseline_name) {
  if (systems.empty()) fail(ErrorKind::config, "build_report: no systems");
  const SystemEval* baseline = nullptr;
  for (const SystemEval& s : systems) {
    if (s.name == baseline_name) baseline = &s;
  }
  if (baseline == nullptr) {
    fail(ErrorKind::config, "baseline system '" + baseline_name + "' not found");
  }
  for (const SystemEval& s : systems) {
    if (s.corpus_crc != baseline->corpus_crc || s.n_utts != baseline->n_utts) {
      fail(ErrorKind::config,
           "system '" + s.name + "' was evaluated on a different corpus");
    }
  }
  EvalReport report;
  report.baseline = baseline_name;
  const double base_bits =
      32.0 * static_cast<double>(baseline->n_quantizable + baseline->n_fixed);
  for (const SystemEval& s : systems) {
    ReportRow row;
    row.sys = s;
    const int bits = s.spec.bits;
    row.compression_ratio =
        base_bits / (static_cast<double>(s.n_quantizable) * bits +
                     static_cast<double>(s.n_fixed) * 32.0);
    if (&s != baseline) {
      const MapssweResult r = mapsswe(s.per_utt_errors, baseline->per_utt_errors);
      row.z_vs_baseline = r.z;
      row.vs_baseline = mark_from_z(r);
    } else {
      row.vs_baseline = Mark::none;
    }
    // Counterpart: the individually trained system of the same architecture.
    if (s.mode != "individual" && s.mode != "baseline") {
      for (const SystemEval& other : systems) {
        if (&other != &s && other.mode == "individual" && other.spec == s.spec) {
          const MapssweResult r =
              mapsswe(s.per_utt_errors, other.per_utt_errors);
          row.z_vs_individual = r.z;
          row.vs_individual = mark_from_z(r);
          break;
        }
      }
    }
    report.rows.push_back(std::move(row));
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const ReportRow& a, const ReportRow& b) {
                     return a.compression_ratio < b.compression_ratio;
                   });
  return report;
}

std::string render_report_table(const EvalReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "System" << std::setw(14) << "Arch"
     << std::setw(12) << "Mode" << std::setw(10) << "#Param" << std::setw(8)
     << "Ratio" << std::setw(9) << "TER%" << std::setw(12) << "vs-base"
     << std::setw(12) << "vs-indiv" << "\n";
  os << std::string(99, '-') << "\n";
  for (const ReportRow& r : report.rows) {
    std::ostringstream params;
    params << (r.sys.n_quantizable + r.sys.n_fixed);
    os << std::left << std::setw(22) << r.sys.name << std::setw(14)
       << spec_to_string(r.sys.spec) << std::setw(12) << r.sys.mode
       << std::setw(10) << params.str() << std::setw(8) << std::fixed
       << std::setprecision(2) << r.compression_ratio << std::setw(9)
       << std::setprecision(2) << 100.0 * r.sys.ter << std::setw(12)
       << mark_to_string(r.vs_baseline) << std::setw(12)
       << mark_to_string(r.vs_individual) << "\n";
  }
  os << "baseline: " << report.baseline
     << "; marks at alpha = 0.05 (|z| > 1.96)\n";
  return os.str();
}

namespace {

json counts_json(const EditCounts& c) {
  return json{{"sub", c.sub}, {"del", c.del}, {"ins", c.ins}};
}

double z_for_json(double z) {
  // JSON has no infinity literal; clamp the sentinel.
  if (std::isinf(z)) return z > 0 ? 1e300 : -1e300;
  return z;
}

}  // namespace

std::string report_to_json(const EvalReport& report) {
  json rows = json::array();
  for (const ReportRow& r : report.rows) {
    rows.push_back({{"name", r.sys.name},
                    {"spec", spec_to_string(r.sys.spec)},
                    {"mode", r.sys.mode},
                    {"ter", r.sys.ter},
                    {"errors", counts_json(r.sys.counts)},
                    {"ref_tokens", r.sys.ref_tokens},
                    {"params",
                     {{"quantizable", r.sys.n_quantizable},
                      {"fixed", r.sys.n_fixed}}},
                    {"compression_ratio", r.compression_ratio},
                    {"z_vs_baseline", z_for_json(r.z_vs_baseline)},
                    {"vs_baseline", mark_to_string(r.vs_baseline)},
                    {"z_vs_individual", z_for_json(r.z_vs_individual)},
                    {"vs_individual", mark_to_string(r.vs_individual)}});
  }
  return json{{"baseline", report.baseline}, {"rows", rows}}.dump(2);
}

std::string system_eval_to_json(const SystemEval& sys) {
  return json{{"name", sys.name},
              {"spec", spec_to_string(sys.spec)},
              {"mode", sys.mode},
              {"ter", sys.ter},
              {"total_errors", sys.total_errors},
              {"ref_tokens", sys.ref_tokens},
              {"errors", counts_json(sys.counts)},
              {"per_utt_errors", sys.per_utt_errors},
              {"params",
               {{"quantizable", sys.n_quantizable}, {"fixed", sys.n_fixed}}},
              {"corpus_crc", sys.corpus_crc},
              {"n_utts", sys.n_utts}}
      .dump(2);
}

SystemEval system_eval_from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::format, "bad system-eval JSON");
  SystemEval sys;
  sys.name = j.at("name").get<std::string>();
  sys.spec = spec_from_string(j.at("spec").get<std::string>());
  sys.mode = j.at("mode").get<std::string>();
  sys.ter = j.at("ter").get<double>();
  sys.total_errors = j.at("total_errors").get<std::size_t>();
  sys.ref_tokens = j.at("ref_tokens").get<std::size_t>();
  sys.counts.sub = j.at("errors").at("sub").get<std::size_t>();
  sys.counts.del = j.at("errors").at("del").get<std::size_t>();
  sys.counts.ins = j.at("errors").at("ins").get<std::size_t>();
  sys.per_utt_errors = j.at("per_utt_errors").get<std::vector<int>>();
  sys.n_quantizable = j.at("params").at("quantizable").get<std::size_t>();
  sys.n_fixed = j.at("params").at("fixed").get<std::size_t>();
  sys.corpus_crc = j.at("corpus_crc").get<std::uint32_t>();
  sys.n_utts = j.at("n_utts").get<std::size_t>();
  return sys;
}

}  // namespace nestnet
