#include "cli.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "nestnet/error.hpp"
#include "nestnet/eval.hpp"
#include "nestnet/serialize.hpp"

namespace nestnet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void emit_error(ErrorKind kind, const std::string& detail) {
  const char* name = "runtime";
  switch (kind) {
    case ErrorKind::config: name = "config"; break;
    case ErrorKind::shape: name = "shape"; break;
    case ErrorKind::overflow: name = "overflow"; break;
    case ErrorKind::format: name = "format"; break;
    case ErrorKind::version: name = "version"; break;
    case ErrorKind::checksum: name = "checksum"; break;
    case ErrorKind::truncation: name = "truncation"; break;
    case ErrorKind::runtime: name = "runtime"; break;
  }
  std::cerr << json{{"error", name}, {"detail", detail}}.dump() << "\n";
}

int guard(const std::function<int()>& body) {
  try {
    return body();
  } catch (const Error& e) {
    emit_error(e.kind(), e.what());
    return e.kind() == ErrorKind::config ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    emit_error(ErrorKind::runtime, e.what());
    return kExitRuntime;
  }
}

void check_keys(const json& obj, const std::string& path,
                const std::vector<std::string>& allowed) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      fail(ErrorKind::config, "unknown config key '" + path + key + "'");
    }
  }
}

const json& require(const json& obj, const std::string& path,
                    const std::string& key) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    fail(ErrorKind::config, "missing config field '" + path + key + "'");
  }
  return *it;
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
  auto it = obj.find(key);
  return it == obj.end() ? fallback : it->get<T>();
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::config, "cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string file_stem(const std::string& path) {
  return fs::path(path).stem().string();
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text, bool need_data,
                           bool need_train) {
  json doc = json::parse(json_text, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) {
    fail(ErrorKind::config, "config is not a JSON object");
  }
  check_keys(doc, "", {"data", "encoder", "grid", "mask_policy", "train"});
  RunConfig rc;

  if (doc.contains("data")) {
    const json& d = doc.at("data");
    check_keys(d, "data.",
               {"seed", "n_train", "n_dev", "n_test", "len_min", "len_max",
                "vocab", "d_in", "frames_per_token", "noise_sigma"});
    rc.data.seed = require(d, "data.", "seed").get<std::uint64_t>();
    rc.data.n_train = require(d, "data.", "n_train").get<std::size_t>();
    rc.data.n_test = require(d, "data.", "n_test").get<std::size_t>();
    rc.data.vocab = require(d, "data.", "vocab").get<std::size_t>();
    rc.data.d_in = require(d, "data.", "d_in").get<std::size_t>();
    rc.data.n_dev = get_or<std::size_t>(d, "n_dev", 200);
    rc.data.len_min = get_or<std::size_t>(d, "len_min", 3);
    rc.data.len_max = get_or<std::size_t>(d, "len_max", 8);
    rc.data.frames_per_token = get_or<std::size_t>(d, "frames_per_token", 3);
    rc.data.noise_sigma = get_or<double>(d, "noise_sigma", 0.5);
    rc.has_data = true;
  } else if (need_data) {
    fail(ErrorKind::config, "missing config field 'data'");
  }

  if (doc.contains("encoder") || doc.contains("grid") || doc.contains("train")) {
    const json& e = require(doc, "", "encoder");
    check_keys(e, "encoder.",
               {"depth_max", "d_model", "ffn_max", "heads", "conv_kernel"});
    rc.setup.encoder.depth_max =
        require(e, "encoder.", "depth_max").get<std::size_t>();
    rc.setup.encoder.d_model =
        require(e, "encoder.", "d_model").get<std::size_t>();
    rc.setup.encoder.ffn_max =
        require(e, "encoder.", "ffn_max").get<std::size_t>();
    rc.setup.encoder.heads = require(e, "encoder.", "heads").get<std::size_t>();
    rc.setup.encoder.conv_kernel =
        require(e, "encoder.", "conv_kernel").get<std::size_t>();

    const json& g = require(doc, "", "grid");
    check_keys(g, "grid.", {"depths", "widths", "precisions"});
    rc.setup.grid.depths =
        require(g, "grid.", "depths").get<std::vector<std::size_t>>();
    rc.setup.grid.widths =
        require(g, "grid.", "widths").get<std::vector<std::size_t>>();
    rc.setup.grid.precisions =
        require(g, "grid.", "precisions").get<std::vector<int>>();

    rc.setup.policy =
        policy_from_string(get_or<std::string>(doc, "mask_policy", "leading"));

    const json& t = require(doc, "", "train");
    check_keys(t, "train.",
               {"mode", "style", "total_steps", "peak_lr", "warmup_fraction",
                "weight_decay", "beta1", "beta2", "eps", "batch_size", "seed",
                "sample_k", "grad_clip", "checkpoint_every", "log_every",
                "lambda_ctc", "lambda1", "lambda2", "individual_spec"});
    TrainConfig& tc = rc.setup.train;
    tc.mode = mode_from_string(require(t, "train.", "mode").get<std::string>());
    tc.style = style_from_string(get_or<std::string>(t, "style", "conformer"));
    tc.total_steps = get_or<std::uint64_t>(t, "total_steps", 3000);
    tc.peak_lr = get_or<double>(t, "peak_lr", 3e-3);
    tc.warmup_fraction = get_or<double>(t, "warmup_fraction", 0.10);
    tc.weight_decay = get_or<double>(t, "weight_decay", 0.01);
    tc.beta1 = get_or<double>(t, "beta1", 0.9);
    tc.beta2 = get_or<double>(t, "beta2", 0.999);
    tc.eps = get_or<double>(t, "eps", 1e-8);
    tc.batch_size = get_or<std::size_t>(t, "batch_size", 16);
    tc.seed = require(t, "train.", "seed").get<std::uint64_t>();
    tc.sample_k = get_or<std::size_t>(t, "sample_k", 3);
    tc.grad_clip = get_or<double>(t, "grad_clip", 5.0);
    tc.checkpoint_every = get_or<std::uint64_t>(t, "checkpoint_every", 0);
    tc.log_every = get_or<std::uint64_t>(t, "log_every", 1);
    tc.weights.lambda_ctc = get_or<double>(t, "lambda_ctc", 0.2);
    if (t.contains("lambda1")) {
      tc.weights.lambda1 =
          t.at("lambda1").get<std::map<std::string, double>>();
    }
    if (t.contains("lambda2")) {
      tc.weights.lambda2 =
          t.at("lambda2").get<std::map<std::string, double>>();
    }
    if (t.contains("individual_spec")) {
      rc.individual_spec = t.at("individual_spec").get<std::string>();
    }
    if (tc.mode == TrainMode::individual && rc.individual_spec.empty()) {
      fail(ErrorKind::config,
           "missing config field 'train.individual_spec' (required for "
           "individual mode)");
    }
    rc.has_train = true;
  } else if (need_train) {
    fail(ErrorKind::config, "missing config sections 'encoder'/'grid'/'train'");
  }
  return rc;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_path) {
  return guard([&] {
    const RunConfig rc =
        parse_run_config(read_text_file(config_path), true, false);
    const ToyCorpus corpus = generate_corpus(rc.data);
    save_corpus(out_path, corpus);
    json summary{{"corpus", out_path},
                 {"n_utts", corpus.n_total()},
                 {"n_train", corpus.meta.n_train},
                 {"n_dev", corpus.meta.n_dev},
                 {"n_test", corpus.meta.n_test},
                 {"d_in", corpus.meta.d_in},
                 {"vocab", corpus.meta.vocab},
                 {"checksum", corpus_checksum(corpus)}};
    std::cout << summary.dump() << "\n";
    return kExitOk;
  });
}

namespace {

// Individual systems train the sliced architecture as their own network.
TrainSetup setup_for_individual(const TrainSetup& base, const SubnetSpec& spec) {
  TrainSetup s = base;
  s.encoder.depth_max = spec.depth;
  s.encoder.ffn_max = spec.width;
  s.grid.depths = {spec.depth};
  s.grid.widths = {spec.width};
  s.grid.precisions = {spec.bits};
  return s;
}

}  // namespace

int cmd_train(const std::string& config_path, const std::string& corpus_path,
              const std::string& out_dir, const std::string& resume_path,
              std::uint64_t stop_after) {
  return guard([&] {
    RunConfig rc = parse_run_config(read_text_file(config_path), false, true);
    const ToyCorpus corpus = load_corpus(corpus_path);
    rc.setup.encoder.vocab = corpus.meta.vocab + 1;
    rc.setup.encoder.d_in = corpus.meta.d_in;
    TrainSetup setup = rc.setup;
    if (setup.train.mode == TrainMode::individual) {
      setup = setup_for_individual(setup, spec_from_string(rc.individual_spec));
    }
    fs::create_directories(out_dir);
    std::ofstream metrics(out_dir + "/metrics.jsonl");
    if (!metrics) fail(ErrorKind::runtime, "cannot write metrics log");

    Checkpoint resume;
    const Checkpoint* resume_ptr = nullptr;
    if (!resume_path.empty()) {
      resume = load_checkpoint(resume_path);
      resume_ptr = &resume;
    }
    const RunResult result =
        train_run(setup, corpus, &metrics, out_dir, resume_ptr,
                  stop_after > 0 ? std::optional<std::uint64_t>(stop_after)
                                 : std::nullopt);
    const std::string ckpt_path = out_dir + "/checkpoint.aio";
    save_checkpoint(ckpt_path, result.checkpoint);
    json summary{{"checkpoint", ckpt_path},
                 {"steps", result.checkpoint.step},
                 {"wall_sec", result.wall_sec},
                 {"cpu_sec", result.cpu_sec}};
    std::cout << summary.dump() << "\n";
    return kExitOk;
  });
}

int cmd_extract(const std::string& checkpoint_path, const std::string& spec_str,
                const std::string& out_path) {
  return guard([&] {
    const SubnetSpec spec = spec_from_string(spec_str);
    const std::string kind = model_file_kind(checkpoint_path);
    SupernetModel model;
    if (kind == "checkpoint") {
      model = load_checkpoint(checkpoint_path).model;
    } else if (kind == "supernet") {
      model = load_supernet(checkpoint_path);
    } else {
      fail(ErrorKind::config,
           checkpoint_path + " is neither a checkpoint nor a supernet file");
    }
    const ExtractedModel extracted = extract(model, spec);
    save_extracted(out_path, extracted);
    json summary{{"model", out_path},
                 {"spec", spec_to_string(spec)},
                 {"bytes", fs::file_size(out_path)}};
    std::cout << summary.dump() << "\n";
    return kExitOk;
  });
}

namespace {

SystemEval evaluate_model_file(const std::string& path, const ToyCorpus& corpus,
                               std::uint32_t corpus_crc) {
  const std::vector<std::size_t> test = corpus.split_indices("test");
  if (test.empty()) fail(ErrorKind::config, "corpus has no test split");
  SystemEval sys;
  sys.name = file_stem(path);
  sys.corpus_crc = corpus_crc;
  sys.n_utts = test.size();

  const std::string kind = model_file_kind(path);
  std::function<Tensor(const Tensor&)> forward;
  ExtractedModel extracted;
  SupernetModel supernet;
  if (kind == "extracted") {
    extracted = load_extracted(path);
    sys.spec = extracted.spec;
    sys.mode = "extracted";
    const auto counts = param_count(
        extracted.config, SubnetSpec{extracted.config.depth_max,
                                     extracted.config.ffn_max, kFloatBits});
    sys.n_quantizable = counts.first;
    sys.n_fixed = counts.second;
    forward = [&extracted](const Tensor& feats) {
      return extracted.frame_log_posteriors(feats);
    };
  } else {
    supernet = kind == "checkpoint" ? load_checkpoint(path).model
                                    : load_supernet(path);
    sys.spec = largest_spec(supernet.grid);
    const bool single = enumerate_grid(supernet.grid).size() == 1;
    const bool full_float = sys.spec.depth == supernet.config.depth_max &&
                            sys.spec.width == supernet.config.ffn_max &&
                            sys.spec.bits == kFloatBits;
    sys.mode = single ? (full_float ? "baseline" : "individual") : "supernet";
    const auto counts = param_count(supernet.config, sys.spec);
    sys.n_quantizable = counts.first;
    sys.n_fixed = counts.second;
    forward = [&supernet, spec = sys.spec](const Tensor& feats) {
      return supernet.frame_log_posteriors(feats, spec);
    };
  }

  for (std::size_t idx : test) {
    const Utterance& utt = corpus.utts[idx];
    const Tensor logpost = forward(utt.frames);
    const std::vector<std::int32_t> hyp = greedy_ctc_decode(logpost);
    const TerResult r = token_error_rate(hyp, utt.tokens);
    sys.per_utt_errors.push_back(static_cast<int>(r.counts.errors()));
    sys.counts.sub += r.counts.sub;
    sys.counts.del += r.counts.del;
    sys.counts.ins += r.counts.ins;
    sys.total_errors += r.counts.errors();
    if (!utt.tokens.empty()) sys.ref_tokens += utt.tokens.size();
  }
  sys.ter = sys.ref_tokens > 0
                ? static_cast<double>(sys.total_errors) /
                      static_cast<double>(sys.ref_tokens)
                : 0.0;
  return sys;
}

std::size_t eval_worker_count(std::size_t n_models) {
  std::size_t cap = std::thread::hardware_concurrency();
  if (cap == 0) cap = 1;
  if (const char* env = std::getenv("NESTNET_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) cap = static_cast<std::size_t>(v);
  }
  return std::min(cap, n_models);
}

void write_reports(const std::vector<SystemEval>& systems,
                   const std::string& out_dir, const std::string& baseline) {
  const EvalReport report = build_report(systems, baseline);
  const std::string table = render_report_table(report);
  std::ofstream txt(out_dir + "/report.txt");
  txt << table;
  std::ofstream js(out_dir + "/report.json");
  js << report_to_json(report) << "\n";
  std::cout << table;
}

}  // namespace

int cmd_eval(const std::vector<std::string>& model_paths,
             const std::string& corpus_path, const std::string& out_dir,
             const std::string& baseline) {
  return guard([&] {
    if (model_paths.empty()) fail(ErrorKind::config, "no model files given");
    const ToyCorpus corpus = load_corpus(corpus_path);
    const std::uint32_t crc = corpus_checksum(corpus);
    fs::create_directories(out_dir);

    std::vector<SystemEval> systems(model_paths.size());
    std::vector<std::string> errors(model_paths.size());
    std::atomic<std::size_t> next{0};
    const std::size_t workers = eval_worker_count(model_paths.size());
    auto run_worker = [&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= model_paths.size()) return;
        try {
          systems[i] = evaluate_model_file(model_paths[i], corpus, crc);
        } catch (const std::exception& e) {
          errors[i] = e.what();
        }
      }
    };
    if (workers <= 1) {
      run_worker();
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run_worker);
      for (std::thread& t : pool) t.join();
    }
    for (std::size_t i = 0; i < model_paths.size(); ++i) {
      if (!errors[i].empty()) {
        fail(ErrorKind::runtime,
             "evaluating " + model_paths[i] + ": " + errors[i]);
      }
    }
    for (const SystemEval& sys : systems) {
      std::ofstream out(out_dir + "/eval_" + sys.name + ".json");
      out << system_eval_to_json(sys) << "\n";
    }
    if (!baseline.empty()) {
      write_reports(systems, out_dir, baseline);
    } else {
      for (const SystemEval& sys : systems) {
        std::cout << json{{"name", sys.name},
                          {"spec", spec_to_string(sys.spec)},
                          {"ter", sys.ter}}
                         .dump()
                  << "\n";
      }
    }
    return kExitOk;
  });
}

int cmd_report(const std::vector<std::string>& eval_paths,
               const std::string& out_dir, const std::string& baseline) {
  return guard([&] {
    if (eval_paths.empty()) fail(ErrorKind::config, "no eval files given");
    std::vector<SystemEval> systems;
    for (const std::string& path : eval_paths) {
      systems.push_back(system_eval_from_json(read_text_file(path)));
    }
    fs::create_directories(out_dir);
    write_reports(systems, out_dir, baseline);
    return kExitOk;
  });
}

}  // namespace nestnet::cli
