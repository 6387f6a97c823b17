#include "nestnet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <set>

#include <json.hpp>

#include "nestnet/error.hpp"
#include "nestnet/serialize.hpp"

namespace nestnet {

using nlohmann::json;

std::string mode_to_string(TrainMode m) {
  switch (m) {
    case TrainMode::individual: return "individual";
    case TrainMode::all_in_one: return "all_in_one";
    case TrainMode::all_in_one_kl: return "all_in_one_kl";
  }
  return "?";
}

TrainMode mode_from_string(const std::string& s) {
  if (s == "individual") return TrainMode::individual;
  if (s == "all_in_one") return TrainMode::all_in_one;
  if (s == "all_in_one_kl") return TrainMode::all_in_one_kl;
  fail(ErrorKind::config, "unknown training mode '" + s + "'");
}

std::string style_to_string(LossStyle s) {
  return s == LossStyle::conformer ? "conformer" : "ssl";
}

LossStyle style_from_string(const std::string& s) {
  if (s == "conformer") return LossStyle::conformer;
  if (s == "ssl") return LossStyle::ssl;
  fail(ErrorKind::config, "unknown loss style '" + s + "'");
}

double lr_at_step(std::uint64_t step, std::uint64_t total, double peak,
                  double warmup_fraction) {
  if (total == 0 || step > total) {
    fail(ErrorKind::config, "lr_at_step: step outside [0, total]");
  }
  const double warm = warmup_fraction * static_cast<double>(total);
  const double s = static_cast<double>(step);
  if (s < warm) return peak * s / warm;
  return peak * (static_cast<double>(total) - s) /
         (static_cast<double>(total) - warm);
}

std::vector<SubnetSpec> sample_training_set(
    const std::vector<SubnetSpec>& grid_specs, Rng& rng, std::size_t k) {
  if (grid_specs.empty()) fail(ErrorKind::config, "empty spec list");
  if (k < 2) fail(ErrorKind::config, "sample count must be at least 2");
  if (grid_specs.size() <= k) return grid_specs;
  // grid_specs is largest-first; the middle entries are everything between.
  std::vector<SubnetSpec> out{grid_specs.front()};
  std::set<std::size_t> drawn;
  while (drawn.size() < k - 2) {
    drawn.insert(1 + rng.index(grid_specs.size() - 2));
  }
  for (std::size_t i : drawn) out.push_back(grid_specs[i]);
  out.push_back(grid_specs.back());
  return out;
}

LossWeights resolve_weights(const TrainSetup& setup) {
  if (setup.train.explicit_weights) return setup.train.weights;
  const std::vector<SubnetSpec> specs = enumerate_grid(setup.grid);
  const SubnetSpec largest = largest_spec(setup.grid);
  LossWeights w = setup.train.style == LossStyle::conformer
                      ? LossWeights::conformer_defaults(specs, largest)
                      : LossWeights::ssl_defaults(specs, largest);
  // User-specified entries win over the style defaults.
  w.lambda_ctc = setup.train.weights.lambda_ctc;
  for (const auto& [k, v] : setup.train.weights.lambda1) w.lambda1[k] = v;
  for (const auto& [k, v] : setup.train.weights.lambda2) w.lambda2[k] = v;
  return w;
}

namespace {

std::vector<std::int32_t> decoder_prefix(const std::vector<std::int32_t>& y) {
  std::vector<std::int32_t> p;
  p.reserve(y.size() + 1);
  p.push_back(0);  // start-of-sequence shares the blank embedding row
  p.insert(p.end(), y.begin(), y.end());
  return p;
}

std::vector<std::int32_t> decoder_gold(const std::vector<std::int32_t>& y) {
  std::vector<std::int32_t> g = y;
  g.push_back(0);  // end-of-sequence is class 0
  return g;
}

NodeId batch_mean(Graph& g, const std::vector<NodeId>& terms) {
  NodeId acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = g.add(acc, terms[i]);
  return g.scale(acc, 1.0 / static_cast<double>(terms.size()));
}

struct StepGraph {
  Graph graph{/*check_finite=*/false};
  std::vector<SpecLoss> spec_losses;   // batch-mean loss per sampled spec
  std::vector<SpecLoss> spec_kls;      // batch-mean KL per non-largest spec
  NodeId total = kNoNode;
};

// Build the whole multitask step: every sampled spec forwards every
// utterance; the largest spec's frame posteriors serve as the KL teacher.
void build_step_graph(StepGraph& sg, SupernetModel& model,
                      const TrainSetup& setup, const LossWeights& weights,
                      const Batch& batch,
                      const std::vector<SubnetSpec>& sampled) {
  Graph& g = sg.graph;
  ParamSource params(g, model.weights, /*trainable=*/true);
  params.attach_scales(model.scales, /*trainable=*/true);
  const SubnetSpec largest = sampled.front();
  const bool use_kl = setup.train.mode == TrainMode::all_in_one_kl;
  const bool conformer = setup.train.style == LossStyle::conformer;

  // One feature leaf per utterance, shared by every sampled spec.
  std::vector<NodeId> feat_leaves;
  for (std::size_t u = 0; u < batch.size(); ++u) {
    feat_leaves.push_back(
        g.input("feats." + std::to_string(u), batch.utterance(u)));
  }
  std::vector<NodeId> teacher_posts;  // per utterance, largest spec
  std::vector<std::vector<NodeId>> student_posts(sampled.size());
  for (std::size_t si = 0; si < sampled.size(); ++si) {
    const SubnetSpec& spec = sampled[si];
    PreparedParams prepped =
        prepare_subnet_params(g, params, model.config, spec, model.policy);
    std::vector<NodeId> utt_losses;
    for (std::size_t u = 0; u < batch.size(); ++u) {
      const EncoderNodes enc =
          build_encoder(g, prepped, model.config, spec, feat_leaves[u]);
      const NodeId l_ctc = ctc_loss(g, enc.frame_log_posteriors, batch.targets[u]);
      NodeId utt_loss = l_ctc;
      if (conformer) {
        const NodeId dec = build_decoder(g, prepped, model.config,
                                         enc.encoder_states,
                                         decoder_prefix(batch.targets[u]));
        const NodeId l_att =
            attention_ce_loss(g, dec, decoder_gold(batch.targets[u]));
        utt_loss = interpolated_loss(g, l_att, l_ctc, weights.lambda_ctc);
      }
      utt_losses.push_back(utt_loss);
      if (si == 0) {
        teacher_posts.push_back(enc.frame_log_posteriors);
      } else {
        student_posts[si].push_back(enc.frame_log_posteriors);
      }
    }
    sg.spec_losses.emplace_back(spec, batch_mean(g, utt_losses));
  }
  if (use_kl) {
    for (std::size_t si = 1; si < sampled.size(); ++si) {
      std::vector<NodeId> utt_kls;
      for (std::size_t u = 0; u < batch.size(); ++u) {
        utt_kls.push_back(
            kl_regularizer(g, teacher_posts[u], student_posts[si][u]));
      }
      sg.spec_kls.emplace_back(sampled[si], batch_mean(g, utt_kls));
    }
  }
  sg.total = allinone_loss(g, sg.spec_losses, largest, weights,
                           use_kl ? &sg.spec_kls : nullptr);
}

void adamw_update(Tensor& w, Tensor& m, Tensor& v, const Tensor& g, double lr,
                  const TrainConfig& cfg, double decay, std::uint64_t t) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < w.numel(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    if (decay != 0.0) w[i] -= lr * decay * w[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

}  // namespace

StepMetrics train_step(SupernetModel& model, AdamState& opt, const Batch& batch,
                       const TrainSetup& setup, std::uint64_t step, Rng& rng) {
  const TrainConfig& cfg = setup.train;
  const std::vector<SubnetSpec> grid_specs = enumerate_grid(model.grid);
  if (cfg.mode == TrainMode::individual && grid_specs.size() != 1) {
    fail(ErrorKind::config, "individual mode requires a single-spec grid");
  }
  if (cfg.sample_k < 2 && grid_specs.size() > 1) {
    fail(ErrorKind::config, "sample_k must be at least 2");
  }
  const std::vector<SubnetSpec> sampled =
      sample_training_set(grid_specs, rng, cfg.sample_k);
  const LossWeights weights = resolve_weights(setup);

  StepGraph sg;
  build_step_graph(sg, model, setup, weights, batch, sampled);

  StepMetrics metrics;
  metrics.step = step;
  metrics.lr = lr_at_step(step, cfg.total_steps, cfg.peak_lr, cfg.warmup_fraction);
  for (const auto& [spec, node] : sg.spec_losses) {
    const double value = sg.graph.scalar_val(node);
    if (!std::isfinite(value)) {
      fail(ErrorKind::overflow, "non-finite loss for spec " +
                                    spec_to_string(spec) + " at step " +
                                    std::to_string(step));
    }
    metrics.loss[spec_to_string(spec)] = value;
  }
  for (const auto& [spec, node] : sg.spec_kls) {
    metrics.kl[spec_to_string(spec)] = sg.graph.scalar_val(node);
  }
  metrics.total = sg.graph.scalar_val(sg.total);

  GradMap grads = sg.graph.gradients(sg.total);

  double norm_sq = 0.0;
  for (const auto& [name, g] : grads) {
    (void)name;
    for (double x : g.values()) norm_sq += x * x;
  }
  metrics.grad_norm = std::sqrt(norm_sq);
  const double clip_factor =
      (cfg.grad_clip > 0.0 && metrics.grad_norm > cfg.grad_clip)
          ? cfg.grad_clip / metrics.grad_norm
          : 1.0;
  if (clip_factor != 1.0) {
    for (auto& [name, g] : grads) {
      (void)name;
      for (double& x : g.values()) x *= clip_factor;
    }
  }

  // Single optimizer state over master weights and scales; parameters not
  // touched by this step's sampled sub-networks see a zero gradient.
  auto grad_of = [&](const std::string& name, const Tensor& like) -> Tensor {
    auto it = grads.find(name);
    return it != grads.end() ? it->second : Tensor::zeros(like.shape());
  };
  for (const ParamInfo& info : param_inventory(model.config)) {
    Tensor& w = model.weights.at(info.name);
    Tensor& m = opt.m.at(info.name);
    Tensor& v = opt.v.at(info.name);
    const Tensor g = grad_of(info.name, w);
    const double decay = info.shape.size() >= 2 ? cfg.weight_decay : 0.0;
    adamw_update(w, m, v, g, metrics.lr, cfg, decay, step);
  }
  for (auto& [key, scale] : model.scales) {
    Tensor w = Tensor::scalar(scale);
    Tensor& m = opt.m.at(key);
    Tensor& v = opt.v.at(key);
    const Tensor g = grad_of(key, w);
    adamw_update(w, m, v, g, metrics.lr, cfg, 0.0, step);
    // The quantizer step size must stay positive.
    scale = std::max(w[0], 1e-8);
  }
  return metrics;
}

namespace {

AdamState fresh_opt_state(const SupernetModel& model) {
  AdamState opt;
  for (const ParamInfo& info : param_inventory(model.config)) {
    opt.m.emplace(info.name, Tensor::zeros(info.shape));
    opt.v.emplace(info.name, Tensor::zeros(info.shape));
  }
  for (const auto& [key, value] : model.scales) {
    (void)value;
    opt.m.emplace(key, Tensor::zeros({1}));
    opt.v.emplace(key, Tensor::zeros({1}));
  }
  return opt;
}

void write_metrics_line(std::ostream* out, const StepMetrics& m, double elapsed,
                        bool with_kl) {
  if (out == nullptr) return;
  json line{{"step", m.step},
            {"lr", m.lr},
            {"loss", m.loss},
            {"grad_norm", m.grad_norm},
            {"total", m.total},
            {"elapsed_sec", elapsed}};
  if (with_kl) line["kl"] = m.kl;
  (*out) << line.dump() << "\n";
}

}  // namespace

RunResult train_run(const TrainSetup& setup, const ToyCorpus& corpus,
                    std::ostream* metrics, const std::string& checkpoint_dir,
                    const Checkpoint* resume,
                    std::optional<std::uint64_t> stop_after) {
  validate_config(setup.encoder);
  validate_grid(setup.grid, setup.encoder);
  const TrainConfig& cfg = setup.train;
  if (corpus.meta.vocab + 1 != setup.encoder.vocab) {
    fail(ErrorKind::config, "encoder vocab must be corpus vocab + blank");
  }
  if (corpus.meta.d_in != setup.encoder.d_in) {
    fail(ErrorKind::config, "encoder d_in does not match corpus");
  }
  if (cfg.batch_size < 1 || cfg.total_steps < 1) {
    fail(ErrorKind::config, "degenerate training configuration");
  }
  if (cfg.warmup_fraction <= 0.0 || cfg.warmup_fraction >= 1.0) {
    fail(ErrorKind::config, "warmup fraction outside (0, 1)");
  }

  RngStreams streams(cfg.seed);
  Checkpoint state;
  if (resume != nullptr) {
    state = *resume;
    if (state.model.config.depth_max != setup.encoder.depth_max ||
        state.model.config.d_model != setup.encoder.d_model ||
        state.model.config.ffn_max != setup.encoder.ffn_max ||
        state.model.config.vocab != setup.encoder.vocab) {
      fail(ErrorKind::config, "resume checkpoint does not match the setup");
    }
    streams.data.restore_state(state.rng_data);
    streams.sample.restore_state(state.rng_sample);
  } else {
    state.model =
        SupernetModel::init(setup.encoder, setup.grid, setup.policy, streams.init);
    state.model.meta.seed = cfg.seed;
    state.opt = fresh_opt_state(state.model);
    state.step = 0;
  }

  const auto wall_start = std::chrono::steady_clock::now();
  const std::clock_t cpu_start = std::clock();
  const std::uint64_t last_step = stop_after.has_value()
                                      ? std::min(*stop_after, cfg.total_steps)
                                      : cfg.total_steps;
  for (std::uint64_t s = state.step + 1; s <= last_step; ++s) {
    std::vector<std::size_t> indices(cfg.batch_size);
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      indices[i] = corpus.train_begin() + streams.data.index(corpus.meta.n_train);
    }
    const Batch batch = make_batch(corpus, indices);
    const StepMetrics m =
        train_step(state.model, state.opt, batch, setup, s, streams.sample);
    state.step = s;
    state.model.meta.steps = s;
    if (metrics != nullptr && (s % cfg.log_every == 0 || s == last_step)) {
      const double elapsed =
          std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                        wall_start)
              .count();
      write_metrics_line(metrics, m, elapsed,
                         cfg.mode == TrainMode::all_in_one_kl);
    }
    if (!checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
        s % cfg.checkpoint_every == 0 && s != last_step) {
      state.rng_data = streams.data.save_state();
      state.rng_sample = streams.sample.save_state();
      save_checkpoint(checkpoint_dir + "/ckpt_step" + std::to_string(s) + ".aio",
                      state);
    }
  }
  state.rng_data = streams.data.save_state();
  state.rng_sample = streams.sample.save_state();

  RunResult result;
  result.wall_sec = std::chrono::duration<double>(
                        std::chrono::steady_clock::now() - wall_start)
                        .count();
  result.cpu_sec =
      static_cast<double>(std::clock() - cpu_start) / CLOCKS_PER_SEC;
  if (metrics != nullptr) {
    json summary{{"summary",
                  {{"mode", mode_to_string(cfg.mode)},
                   {"steps", state.step},
                   {"wall_sec", result.wall_sec},
                   {"cpu_sec", result.cpu_sec}}}};
    (*metrics) << summary.dump() << "\n";
  }
  result.checkpoint = std::move(state);
  return result;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const SupernetModel& model = ckpt.model;
  json header;
  header["kind"] = "checkpoint";
  header["config"] = {{"depth_max", model.config.depth_max},
                      {"d_model", model.config.d_model},
                      {"ffn_max", model.config.ffn_max},
                      {"heads", model.config.heads},
                      {"conv_kernel", model.config.conv_kernel},
                      {"vocab", model.config.vocab},
                      {"d_in", model.config.d_in}};
  header["grid"] = {{"depths", model.grid.depths},
                    {"widths", model.grid.widths},
                    {"precisions", model.grid.precisions}};
  header["policy"] = policy_to_string(model.policy);
  header["meta"] = {{"steps", model.meta.steps}, {"seed", model.meta.seed}};
  header["step"] = ckpt.step;
  header["rng_data"] = ckpt.rng_data;
  header["rng_sample"] = ckpt.rng_sample;
  json tensors = json::array();
  ByteSink payload;
  for (const ParamInfo& info : param_inventory(model.config)) {
    tensors.push_back({{"name", info.name}, {"shape", info.shape}});
    payload.tensor(model.weights.at(info.name));
    payload.tensor(ckpt.opt.m.at(info.name));
    payload.tensor(ckpt.opt.v.at(info.name));
  }
  header["tensors"] = tensors;
  json scale_keys = json::array();
  for (const auto& [key, value] : model.scales) {
    scale_keys.push_back(key);
    payload.f64(value);
    payload.f64(ckpt.opt.m.at(key)[0]);
    payload.f64(ckpt.opt.v.at(key)[0]);
  }
  header["scales"] = scale_keys;
  write_container(path, kModelMagic, kModelVersion, header.dump(),
                  payload.bytes());
}

Checkpoint load_checkpoint(const std::string& path) {
  const Container c = read_container(path, kModelMagic, kModelVersion);
  json header = json::parse(c.header, nullptr, false);
  if (header.is_discarded() || header.value("kind", "") != "checkpoint") {
    fail(ErrorKind::format, path + ": not a checkpoint file");
  }
  Checkpoint ckpt;
  SupernetModel& m = ckpt.model;
  const json& cj = header.at("config");
  m.config.depth_max = cj.at("depth_max").get<std::size_t>();
  m.config.d_model = cj.at("d_model").get<std::size_t>();
  m.config.ffn_max = cj.at("ffn_max").get<std::size_t>();
  m.config.heads = cj.at("heads").get<std::size_t>();
  m.config.conv_kernel = cj.at("conv_kernel").get<std::size_t>();
  m.config.vocab = cj.at("vocab").get<std::size_t>();
  m.config.d_in = cj.at("d_in").get<std::size_t>();
  const json& gj = header.at("grid");
  m.grid.depths = gj.at("depths").get<std::vector<std::size_t>>();
  m.grid.widths = gj.at("widths").get<std::vector<std::size_t>>();
  m.grid.precisions = gj.at("precisions").get<std::vector<int>>();
  m.policy = policy_from_string(header.at("policy").get<std::string>());
  m.meta.steps = header.at("meta").at("steps").get<std::uint64_t>();
  m.meta.seed = header.at("meta").at("seed").get<std::uint64_t>();
  ckpt.step = header.at("step").get<std::uint64_t>();
  ckpt.rng_data = header.at("rng_data").get<std::string>();
  ckpt.rng_sample = header.at("rng_sample").get<std::string>();
  ByteReader rd(c.payload);
  for (const json& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    m.weights.emplace(name, rd.tensor(shape));
    ckpt.opt.m.emplace(name, rd.tensor(shape));
    ckpt.opt.v.emplace(name, rd.tensor(shape));
  }
  for (const json& k : header.at("scales")) {
    const std::string key = k.get<std::string>();
    m.scales.emplace(key, rd.f64());
    ckpt.opt.m.emplace(key, Tensor::scalar(rd.f64()));
    ckpt.opt.v.emplace(key, Tensor::scalar(rd.f64()));
  }
  return ckpt;
}

}  // namespace nestnet
