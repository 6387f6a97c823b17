// Acceptance suite: one pass/fail line per criterion. Run with no
// arguments for everything, `--skip N [M...]` / `--only N [M...]` to
// select, e.g. `--skip 6 7` for the fast checks only.

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "../helpers.hpp"
#include "nestnet/data.hpp"
#include "nestnet/error.hpp"
#include "nestnet/eval.hpp"
#include "nestnet/losses.hpp"
#include "nestnet/serialize.hpp"
#include "nestnet/trainer.hpp"

using namespace nestnet;
using namespace nestnet::test;
using Clock = std::chrono::steady_clock;

namespace {

struct Criterion {
  int id;
  std::string name;
  std::function<bool(std::ostream&)> run;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool expect(std::ostream& log, bool ok, const std::string& what) {
  if (!ok) log << "    failed: " << what << "\n";
  return ok;
}

// ---------------------------------------------------------------------
// Criterion 1: gradient correctness against central finite differences.

bool criterion_gradients(std::ostream& log) {
  const auto t0 = Clock::now();
  bool ok = true;
  double worst = 0.0;
  const double tol = 1e-3;

  auto check = [&](const std::string& name, double err) {
    worst = std::max(worst, err);
    ok &= expect(log, err < tol,
                 name + " gradient error " + std::to_string(err));
  };

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed * 7919 + 13);
    const std::size_t r = 2 + rng.index(5);
    const std::size_t c = 2 + rng.index(5);
    const Tensor w = random_tensor(rng, {r, c});

    auto weighted_unary = [&](const char* name, auto make, Tensor input) {
      check(name, gradcheck_error(
                      [&](Graph& g, const std::map<std::string, Tensor>& pt) {
                        return g.sum_all(g.mul(make(g, g.param("x", pt.at("x"))),
                                               g.constant(w)));
                      },
                      single_param("x", std::move(input))));
    };

    // Binary primitives.
    {
      std::map<std::string, Tensor> p;
      p.emplace("a", random_tensor(rng, {r, c}));
      p.emplace("b", random_tensor(rng, {c, r}));
      check("matmul", gradcheck_error(
                          [](Graph& g, const std::map<std::string, Tensor>& pt) {
                            return g.sum_all(g.matmul(g.param("a", pt.at("a")),
                                                      g.param("b", pt.at("b"))));
                          },
                          p));
    }
    {
      std::map<std::string, Tensor> p;
      p.emplace("a", random_tensor(rng, {r, c}));
      p.emplace("b", random_tensor(rng, {r, c}));
      check("add*mul", gradcheck_error(
                           [&](Graph& g, const std::map<std::string, Tensor>& pt) {
                             const NodeId s = g.add(g.param("a", pt.at("a")),
                                                    g.param("b", pt.at("b")));
                             return g.sum_all(g.mul(s, g.constant(w)));
                           },
                           p));
    }
    {
      std::map<std::string, Tensor> p;
      p.emplace("x", random_tensor(rng, {r, c}));
      p.emplace("w", random_tensor(rng, {c + 1, c}));
      p.emplace("b", random_tensor(rng, {c + 1}));
      const Tensor ww = random_tensor(rng, {r, c + 1});
      check("linear", gradcheck_error(
                          [&](Graph& g, const std::map<std::string, Tensor>& pt) {
                            const NodeId y = g.linear_nt(g.param("x", pt.at("x")),
                                                         g.param("w", pt.at("w")),
                                                         g.param("b", pt.at("b")));
                            return g.sum_all(g.mul(y, g.constant(ww)));
                          },
                          p));
    }
    // Unary primitives.
    weighted_unary("softmax", [](Graph& g, NodeId x) { return g.softmax_rows(x); },
                   random_tensor(rng, {r, c}));
    weighted_unary("exp", [](Graph& g, NodeId x) { return g.exp(x); },
                   random_tensor(rng, {r, c}));
    weighted_unary("log", [](Graph& g, NodeId x) { return g.log(x); },
                   random_tensor(rng, {r, c}, 0.2, 2.0));
    weighted_unary("layer_norm",
                   [](Graph& g, NodeId x) { return g.layer_norm_rows(x); },
                   random_tensor_spread(rng, r, c));
    weighted_unary("swish", [](Graph& g, NodeId x) { return g.swish(x); },
                   random_tensor(rng, {r, c}));
    {
      Tensor x = random_tensor(rng, {r, c});
      for (double& v : x.values()) {
        if (std::abs(v) < 0.05) v = 0.1;  // keep away from the kink
      }
      weighted_unary("relu", [](Graph& g, NodeId x) { return g.relu(x); },
                     std::move(x));
    }
    check("mean", gradcheck_error(
                      [](Graph& g, const std::map<std::string, Tensor>& pt) {
                        return g.mean_all(g.param("x", pt.at("x")));
                      },
                      single_param("x", random_tensor(rng, {r, c}))));
    {
      std::map<std::string, Tensor> p;
      p.emplace("x", random_tensor_spread(rng, r, c));
      p.emplace("g", random_tensor(rng, {c}, 0.5, 1.5));
      p.emplace("b", random_tensor(rng, {c}));
      check("layer_norm_affine",
            gradcheck_error(
                [&](Graph& g, const std::map<std::string, Tensor>& pt) {
                  const NodeId y = g.layer_norm_affine(g.param("x", pt.at("x")),
                                                       g.param("g", pt.at("g")),
                                                       g.param("b", pt.at("b")));
                  return g.sum_all(g.mul(y, g.constant(w)));
                },
                p));
    }
    // GLU composed from slice, sigmoid and product.
    {
      const std::size_t cc = 2 * (1 + rng.index(3));
      const Tensor ww = random_tensor(rng, {r, cc / 2});
      check("glu", gradcheck_error(
                       [&](Graph& g, const std::map<std::string, Tensor>& pt) {
                         const NodeId x = g.param("x", pt.at("x"));
                         const NodeId lin = g.slice_cols(x, 0, cc / 2);
                         const NodeId gate =
                             g.sigmoid(g.slice_cols(x, cc / 2, cc));
                         return g.sum_all(
                             g.mul(g.mul(lin, gate), g.constant(ww)));
                       },
                       single_param("x", random_tensor(rng, {r, cc}))));
    }
    // Depthwise convolution.
    {
      std::map<std::string, Tensor> p;
      p.emplace("x", random_tensor(rng, {r + 2, c}));
      p.emplace("k", random_tensor(rng, {3, c}));
      const Tensor ww = random_tensor(rng, {r + 2, c});
      check("depthwise_conv",
            gradcheck_error(
                [&](Graph& g, const std::map<std::string, Tensor>& pt) {
                  const NodeId y = g.depthwise_conv1d(g.param("x", pt.at("x")),
                                                      g.param("k", pt.at("k")));
                  return g.sum_all(g.mul(y, g.constant(ww)));
                },
                p));
    }

    // CTC loss through log-softmax.
    {
      const std::size_t frames = 2 + rng.index(4);
      const std::size_t vocab = 3 + rng.index(2);
      std::vector<std::int32_t> target;
      for (std::size_t i = 0; i < 1 + rng.index(2); ++i) {
        target.push_back(static_cast<std::int32_t>(1 + rng.index(vocab - 1)));
      }
      std::size_t need = target.size();
      for (std::size_t i = 1; i < target.size(); ++i) {
        if (target[i] == target[i - 1]) ++need;
      }
      if (need <= frames) {
        check("ctc", gradcheck_error(
                         [&](Graph& g, const std::map<std::string, Tensor>& pt) {
                           const NodeId logits = g.param("l", pt.at("l"));
                           return ctc_loss(g, g.log_softmax_rows(logits), target);
                         },
                         single_param(
                             "l", random_tensor(rng, {frames, vocab}, -2, 2))));
      }
    }
    // Attention cross-entropy.
    {
      const std::vector<std::int32_t> gold{
          static_cast<std::int32_t>(1 + rng.index(3)),
          static_cast<std::int32_t>(1 + rng.index(3)), 0};
      check("attention_ce",
            gradcheck_error(
                [&](Graph& g, const std::map<std::string, Tensor>& pt) {
                  const NodeId logits = g.param("l", pt.at("l"));
                  return attention_ce_loss(g, g.log_softmax_rows(logits), gold);
                },
                single_param("l", random_tensor(rng, {3, 5}, -2, 2))));
    }
    // KL regularizer, student side.
    {
      const Tensor teacher = random_log_posteriors(rng, 3, 4);
      check("kl", gradcheck_error(
                      [&](Graph& g, const std::map<std::string, Tensor>& pt) {
                        const NodeId t = g.input("t", teacher);
                        const NodeId logits = g.param("l", pt.at("l"));
                        return kl_regularizer(g, t, g.log_softmax_rows(logits));
                      },
                      single_param("l", random_tensor(rng, {3, 4}, -2, 2))));
    }
  }

  // Fake-quantize scale parameter, away from rounding discontinuities.
  {
    Rng rng(4242);
    int done = 0;
    while (done < 100) {
      const int bits = done % 2 == 0 ? 4 : 8;
      const double s = 0.2 + rng.uniform() * 0.5;
      Tensor w = random_tensor(rng, {4, 4}, -1.5, 1.5);
      bool usable = true;
      for (double v : w.values()) {
        const double steps = v / s;
        if (std::abs(steps - std::round(steps)) > 0.49 ||
            std::abs(std::abs(steps) - qmax(bits)) < 0.02) {
          usable = false;
          break;
        }
      }
      if (!usable) continue;
      ++done;
      const Tensor upstream = random_tensor(rng, {4, 4});
      check("fq_scale",
            gradcheck_error(
                [&](Graph& g, const std::map<std::string, Tensor>& pt) {
                  const NodeId wn = g.input("w_fixed", w);
                  const NodeId sn = g.param("s", pt.at("s"));
                  return g.sum_all(g.mul(fake_quantize_node(g, wn, sn, bits),
                                         g.constant(upstream)));
                },
                single_param("s", Tensor::scalar(s))));
    }
  }

  const double elapsed = seconds_since(t0);
  log << "    worst gradient disagreement " << worst << ", " << elapsed
      << " s\n";
  ok &= expect(log, elapsed < 120.0, "runtime under 2 minutes");
  return ok;
}

// ---------------------------------------------------------------------
// Criterion 2: exhaustive CTC path-sum oracle.

bool criterion_ctc_oracle(std::ostream& log) {
  const auto t0 = Clock::now();
  bool ok = true;
  double worst = 0.0;
  std::size_t instances = 0;
  Rng rng(77);
  for (std::size_t frames = 1; frames <= 6; ++frames) {
    for (std::size_t vocab = 2; vocab <= 4; ++vocab) {
      // Every target over tokens 1..vocab-1 up to length 3.
      std::vector<std::vector<std::int32_t>> targets{{}};
      for (int len = 0; len < 3; ++len) {
        const std::size_t start = targets.size();
        for (std::size_t i = 0; i < start; ++i) {
          if (targets[i].size() != static_cast<std::size_t>(len)) continue;
          for (std::int32_t tok = 1; tok < static_cast<std::int32_t>(vocab);
               ++tok) {
            auto next = targets[i];
            next.push_back(tok);
            targets.push_back(std::move(next));
          }
        }
      }
      for (const auto& target : targets) {
        std::size_t need = target.size();
        for (std::size_t i = 1; i < target.size(); ++i) {
          if (target[i] == target[i - 1]) ++need;
        }
        const Tensor lp = random_log_posteriors(rng, frames, vocab);
        if (need > frames) {
          try {
            Graph g;
            ctc_loss(g, g.input("lp", lp), target);
            ok &= expect(log, false, "over-long target accepted");
          } catch (const Error&) {
          }
          continue;
        }
        ++instances;
        Graph g;
        const double got = g.scalar_val(ctc_loss(g, g.input("lp", lp), target));
        const double want = ctc_bruteforce_loss(lp, target);
        worst = std::max(worst, std::abs(got - want));
      }
    }
  }
  const double elapsed = seconds_since(t0);
  log << "    " << instances << " feasible instances, worst |diff| " << worst
      << ", " << elapsed << " s\n";
  ok &= expect(log, worst < 1e-6, "all instances within 1e-6");
  ok &= expect(log, elapsed < 60.0, "runtime under 1 minute");
  return ok;
}

// ---------------------------------------------------------------------
// Shared toy geometry for criteria 3 and 9.

EncoderConfig acceptance_toy_config() {
  EncoderConfig cfg;
  cfg.depth_max = 2;
  cfg.d_model = 16;
  cfg.ffn_max = 32;
  cfg.heads = 2;
  cfg.conv_kernel = 3;
  cfg.vocab = 11;
  cfg.d_in = 8;
  return cfg;
}

// Criterion 3: containment, bit exact.

bool criterion_containment(std::ostream& log) {
  bool ok = true;
  Grid grid;
  grid.depths = {1, 2};
  grid.widths = {16, 32};
  grid.precisions = {4, 8};
  for (MaskPolicy policy : {MaskPolicy::leading, MaskPolicy::l2norm}) {
    Rng rng(4242);
    SupernetModel model =
        SupernetModel::init(acceptance_toy_config(), grid, policy, rng);
    for (const SubnetSpec& spec : enumerate_grid(grid)) {
      const ExtractedModel ext = extract(model, spec);
      double worst = 0.0;
      for (int trial = 0; trial < 20; ++trial) {
        const Tensor feats = random_tensor(rng, {5 + rng.index(12), 8});
        worst = std::max(worst,
                         max_abs_diff(model.frame_log_posteriors(feats, spec),
                                      ext.frame_log_posteriors(feats)));
      }
      ok &= expect(log, worst == 0.0,
                   policy_to_string(policy) + " " + spec_to_string(spec) +
                       " max |diff| " + std::to_string(worst));
    }
  }
  return ok;
}

// ---------------------------------------------------------------------
// Criterion 4: stop-gradient contract.

bool criterion_stop_gradient(std::ostream& log) {
  bool ok = true;
  // (a) Graph inspection: the teacher's log-posterior node receives the
  // same gradient with and without the KL terms in the objective.
  {
    EncoderConfig cfg = acceptance_toy_config();
    Grid grid;
    grid.depths = {1, 2};
    grid.widths = {16, 32};
    grid.precisions = {8};
    Rng rng(11);
    SupernetModel model = SupernetModel::init(cfg, grid, MaskPolicy::leading, rng);
    const Tensor feats = random_tensor(rng, {6, cfg.d_in});
    const std::vector<std::int32_t> target{3, 5};

    auto build = [&](Graph& g, bool with_kl, NodeId* p_max_out) {
      ParamSource params(g, model.weights, true);
      params.attach_scales(model.scales, true);
      const SubnetSpec big{2, 32, 8}, small{1, 16, 8};
      PreparedParams pb = prepare_subnet_params(g, params, cfg, big, model.policy);
      const NodeId f = g.input("f", feats);
      const EncoderNodes eb = build_encoder(g, pb, cfg, big, f);
      const NodeId lb = ctc_loss(g, eb.frame_log_posteriors, target);
      PreparedParams ps = prepare_subnet_params(g, params, cfg, small, model.policy);
      const EncoderNodes es = build_encoder(g, ps, cfg, small, f);
      const NodeId ls = ctc_loss(g, es.frame_log_posteriors, target);
      NodeId total = g.add(lb, g.scale(ls, 0.8));
      if (with_kl) {
        total = g.add(total, g.scale(kl_regularizer(g, eb.frame_log_posteriors,
                                                    es.frame_log_posteriors),
                                     0.2));
      }
      *p_max_out = eb.frame_log_posteriors;
      return total;
    };

    Graph g_plain, g_kl;
    NodeId pmax_plain = kNoNode, pmax_kl = kNoNode;
    const NodeId loss_plain = build(g_plain, false, &pmax_plain);
    const NodeId loss_kl = build(g_kl, true, &pmax_kl);
    g_plain.gradients(loss_plain);
    g_kl.gradients(loss_kl);
    const double diff =
        max_abs_diff(g_plain.grad(pmax_plain), g_kl.grad(pmax_kl));
    ok &= expect(log, diff == 0.0,
                 "teacher-branch gradient changed by " + std::to_string(diff));

    // The KL term alone pushes zero gradient into anything upstream of the
    // stop-gradient wrapper.
    Graph g_only;
    ParamSource params(g_only, model.weights, true);
    params.attach_scales(model.scales, true);
    const SubnetSpec big{2, 32, 8}, small{1, 16, 8};
    PreparedParams pb = prepare_subnet_params(g_only, params, cfg, big, model.policy);
    const NodeId f = g_only.input("f", feats);
    const EncoderNodes eb = build_encoder(g_only, pb, cfg, big, f);
    PreparedParams ps = prepare_subnet_params(g_only, params, cfg, small, model.policy);
    const EncoderNodes es = build_encoder(g_only, ps, cfg, small, f);
    const NodeId omega = kl_regularizer(g_only, eb.frame_log_posteriors,
                                        es.frame_log_posteriors);
    g_only.gradients(omega);
    const Tensor& teacher_grad = g_only.grad(eb.frame_log_posteriors);
    double teacher_pull = 0.0;
    for (double v : teacher_grad.values()) teacher_pull += std::abs(v);
    ok &= expect(log, teacher_pull == 0.0, "teacher branch received gradient");
  }

  // (b) Zeroing every lambda2 makes the regularized objective's training
  // step bitwise equal to the plain multitask step.
  {
    CorpusMeta meta;
    meta.seed = 5;
    meta.vocab = 5;
    meta.d_in = 4;
    meta.frames_per_token = 2;
    meta.noise_sigma = 0.3;
    meta.len_min = 2;
    meta.len_max = 4;
    meta.n_train = 24;
    meta.n_dev = 4;
    meta.n_test = 4;
    const ToyCorpus corpus = generate_corpus(meta);
    TrainSetup setup;
    setup.encoder = {2, 8, 16, 2, 3, 6, 4};
    setup.grid.depths = {1, 2};
    setup.grid.widths = {8, 16};
    setup.grid.precisions = {4, 8};
    setup.train.total_steps = 3;
    setup.train.batch_size = 4;
    setup.train.seed = 9;
    setup.train.mode = TrainMode::all_in_one;
    const RunResult plain = train_run(setup, corpus);
    TrainSetup with_kl = setup;
    with_kl.train.mode = TrainMode::all_in_one_kl;
    for (const SubnetSpec& spec : enumerate_grid(with_kl.grid)) {
      with_kl.train.weights.lambda2[spec_to_string(spec)] = 0.0;
    }
    const RunResult zeroed = train_run(with_kl, corpus);
    const auto dir = temp_dir("acc_sg");
    save_checkpoint((dir / "a.aio").string(), plain.checkpoint);
    save_checkpoint((dir / "b.aio").string(), zeroed.checkpoint);
    const bool same = read_file_bytes((dir / "a.aio").string()) ==
                      read_file_bytes((dir / "b.aio").string());
    std::filesystem::remove_all(dir);
    ok &= expect(log, same, "lambda2 = 0 step differs from the plain objective");
  }
  return ok;
}

// ---------------------------------------------------------------------
// Criterion 5: compression accounting against the published column.

bool criterion_compression(std::ostream& log) {
  bool ok = true;
  struct Row {
    const char* arch;
    double params_m;   // published encoder parameter count, millions
    double printed;    // published compression ratio
    const char* note;  // documented correction, if any
  };
  // The published table transposes the ratios of the two full-size rows
  // (8-bit must give 4.0x and 4-bit 8.0x, as the shared-architecture rows
  // elsewhere in the table confirm), and prints 8.2x for 8-1024-8bit where
  // its own 4-bit sibling (18.4x) implies 9.2x. Both corrections applied
  // and reported here.
  const Row rows[] = {
      {"12-2048-8bit", 34.0, 4.0, "printed 8.0x, transposed with the 4-bit row"},
      {"12-2048-4bit", 34.0, 8.0, "printed 4.0x, transposed with the 8-bit row"},
      {"12-1024-8bit", 21.0, 6.4, nullptr},
      {"12-1024-4bit", 21.0, 12.8, nullptr},
      {"8-2048-8bit", 23.0, 5.8, nullptr},
      {"8-2048-4bit", 23.0, 11.7, nullptr},
      {"8-1024-8bit", 15.0, 9.2, "printed 8.2x, inconsistent with 18.4x at 4-bit"},
      {"8-1024-4bit", 15.0, 18.4, nullptr},
  };
  for (const Row& row : rows) {
    const SubnetSpec spec = spec_from_string(row.arch);
    const double computed =
        ratio_from_counts(34.0, row.params_m, 0.0, spec.bits);
    const double rel = std::abs(computed - row.printed) / row.printed;
    log << "    " << row.arch << ": computed " << computed << "x vs published "
        << row.printed << "x (" << rel * 100 << "%)";
    if (row.note != nullptr) log << " [" << row.note << "]";
    log << "\n";
    ok &= expect(log, rel <= 0.05, std::string(row.arch) + " outside 5%");
  }
  // The two worked examples from the accounting rule itself.
  ok &= expect(log,
               std::abs(ratio_from_counts(34, 21, 0, 4) - 12.95) < 5e-3,
               "12-1024-4bit example");
  ok &= expect(log, std::abs(ratio_from_counts(34, 15, 0, 4) - 18.13) < 5e-3,
               "8-1024-4bit example");
  return ok;
}

// ---------------------------------------------------------------------
// Criteria 6 and 7: desk-scale analogue and the one-pass speed-up.

struct AnalogueResult {
  bool trained = false;
  double supernet_wall = 0.0;
  double individual_wall_sum = 0.0;
  bool ter_ok = false;
};

EncoderConfig analogue_encoder() {
  EncoderConfig cfg;
  cfg.depth_max = 4;
  cfg.d_model = 16;
  cfg.ffn_max = 64;
  cfg.heads = 2;
  cfg.conv_kernel = 3;
  cfg.vocab = 11;  // 10 tokens + blank
  cfg.d_in = 8;
  return cfg;
}

TrainSetup analogue_setup() {
  TrainSetup s;
  s.encoder = analogue_encoder();
  s.grid.depths = {2, 4};
  s.grid.widths = {32, 64};
  s.grid.precisions = {4, 8};
  s.policy = MaskPolicy::leading;
  s.train.mode = TrainMode::all_in_one_kl;
  s.train.total_steps = 3000;
  s.train.peak_lr = 3e-3;
  s.train.batch_size = 16;
  s.train.weight_decay = 0.01;
  s.train.seed = 42;
  return s;
}

double test_ter(const std::function<Tensor(const Tensor&)>& forward,
                const ToyCorpus& corpus) {
  std::size_t errors = 0, tokens = 0;
  for (std::size_t idx : corpus.split_indices("test")) {
    const Utterance& utt = corpus.utts[idx];
    const TerResult r =
        token_error_rate(greedy_ctc_decode(forward(utt.frames)), utt.tokens);
    errors += r.counts.errors();
    tokens += utt.tokens.size();
  }
  return static_cast<double>(errors) / static_cast<double>(tokens);
}

AnalogueResult run_desk_scale_analogue(std::ostream& log) {
  AnalogueResult out;
  CorpusMeta meta;  // the frozen corpus of the analogue
  meta.seed = 42;
  meta.vocab = 10;
  meta.d_in = 8;
  meta.frames_per_token = 3;
  meta.noise_sigma = 0.5;
  meta.len_min = 3;
  meta.len_max = 8;
  meta.n_train = 2000;
  meta.n_dev = 200;
  meta.n_test = 200;
  const ToyCorpus corpus = generate_corpus(meta);

  const TrainSetup base = analogue_setup();
  const std::vector<SubnetSpec> specs = enumerate_grid(base.grid);

  std::map<std::string, double> individual_ter;
  for (const SubnetSpec& spec : specs) {
    TrainSetup setup = base;
    setup.train.mode = TrainMode::individual;
    setup.encoder.depth_max = spec.depth;
    setup.encoder.ffn_max = spec.width;
    setup.grid.depths = {spec.depth};
    setup.grid.widths = {spec.width};
    setup.grid.precisions = {spec.bits};
    const RunResult res = train_run(setup, corpus);
    out.individual_wall_sum += res.wall_sec;
    const SupernetModel& model = res.checkpoint.model;
    individual_ter[spec_to_string(spec)] = test_ter(
        [&](const Tensor& f) { return model.frame_log_posteriors(f, spec); },
        corpus);
    log << "    individual " << spec_to_string(spec) << ": TER "
        << individual_ter[spec_to_string(spec)] * 100 << "%, "
        << res.wall_sec << " s\n";
  }

  const RunResult aio = train_run(base, corpus);
  out.supernet_wall = aio.wall_sec;
  log << "    all-in-one supernet: " << aio.wall_sec << " s\n";

  bool every_within = true;
  int no_worse = 0;
  for (const SubnetSpec& spec : specs) {
    const ExtractedModel ext = extract(aio.checkpoint.model, spec);
    const double ter = test_ter(
        [&](const Tensor& f) { return ext.frame_log_posteriors(f); }, corpus);
    const double ind = individual_ter[spec_to_string(spec)];
    log << "    extracted " << spec_to_string(spec) << ": TER " << ter * 100
        << "% vs individual " << ind * 100 << "%\n";
    if (ter <= ind + 0.010 + 1e-12) {
      // within one absolute percentage point
    } else {
      every_within = false;
    }
    if (ter <= ind + 1e-12) ++no_worse;
  }
  log << "    " << no_worse << "/8 extracted systems at or below their "
      << "individually trained counterparts\n";
  out.ter_ok = every_within && no_worse >= 4;
  out.trained = true;
  return out;
}

AnalogueResult* analogue_cache() {
  static AnalogueResult cached;
  return &cached;
}

bool criterion_analogue(std::ostream& log) {
  AnalogueResult* cached = analogue_cache();
  if (!cached->trained) *cached = run_desk_scale_analogue(log);
  return cached->ter_ok;
}

bool criterion_speedup(std::ostream& log) {
  AnalogueResult* cached = analogue_cache();
  if (!cached->trained) *cached = run_desk_scale_analogue(log);
  const double ratio = cached->supernet_wall / cached->individual_wall_sum;
  log << "    supernet wall " << cached->supernet_wall << " s vs summed "
      << cached->individual_wall_sum << " s; ratio " << ratio << "\n";
  return expect(log, ratio < 0.5, "one-pass run not under half the summed time");
}

// ---------------------------------------------------------------------
// Criterion 8: the matched-pairs significance test.

bool criterion_mapsswe(std::ostream& log) {
  bool ok = true;
  {
    const MapssweResult r = mapsswe({1, 2, 3, 4}, {1, 2, 3, 4});
    ok &= expect(log, r.z == 0.0 && !r.significant, "identical vectors");
  }
  {
    const MapssweResult r = mapsswe({2, 3, 4, 5}, {1, 2, 3, 4});
    ok &= expect(log, std::isinf(r.z) && r.z > 0 && r.significant,
                 "zero-variance nonzero-mean sentinel");
  }
  {
    const MapssweResult r = mapsswe({1, 0, 1, 0, 1, 0, 1, 0, 1, 0},
                                    {0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
    ok &= expect(log, std::abs(r.z - 3.0) < 1e-9,
                 "alternating-difference z " + std::to_string(r.z));
    ok &= expect(log, r.significant, "z = 3 flagged significant");
  }
  {
    // d = [74, 24] gives z = 2 * mean / |d1 - d2| = 1.96 exactly; the flag
    // flips strictly above the threshold.
    const MapssweResult at = mapsswe({74, 24}, {0, 0});
    ok &= expect(log, std::abs(at.z - 1.96) < 1e-12, "z lands on 1.96");
    ok &= expect(log, !at.significant, "z == 1.96 is not significant");
    const MapssweResult above = mapsswe({75, 25}, {0, 0});
    ok &= expect(log, above.z == 2.0 && above.significant, "z = 2 significant");
    const MapssweResult below = mapsswe({73, 23}, {0, 0});
    ok &= expect(log, std::abs(below.z - 1.92) < 1e-12 && !below.significant,
                 "z = 1.92 not significant");
  }
  return ok;
}

// ---------------------------------------------------------------------
// Criterion 9: serialization stability and packed codes.

bool criterion_serialization(std::ostream& log) {
  bool ok = true;
  const auto dir = temp_dir("acc_ser");
  EncoderConfig cfg = acceptance_toy_config();
  Grid grid;
  grid.depths = {1, 2};
  grid.widths = {16, 32};
  grid.precisions = {4, 6, 8};

  // A briefly trained model so scales and moments carry real state.
  CorpusMeta meta;
  meta.seed = 3;
  meta.vocab = 10;
  meta.d_in = 8;
  meta.frames_per_token = 2;
  meta.noise_sigma = 0.4;
  meta.len_min = 2;
  meta.len_max = 4;
  meta.n_train = 32;
  meta.n_dev = 4;
  meta.n_test = 4;
  const ToyCorpus corpus = generate_corpus(meta);
  TrainSetup setup;
  setup.encoder = cfg;
  setup.grid = grid;
  setup.train.total_steps = 5;
  setup.train.batch_size = 4;
  setup.train.seed = 3;
  setup.train.mode = TrainMode::all_in_one_kl;
  const RunResult res = train_run(setup, corpus);
  const SupernetModel& model = res.checkpoint.model;

  // Supernet file: save, load, save again, byte-identical.
  {
    const std::string p1 = (dir / "m1.aio").string();
    const std::string p2 = (dir / "m2.aio").string();
    save_supernet(p1, model);
    save_supernet(p2, load_supernet(p1));
    ok &= expect(log, read_file_bytes(p1) == read_file_bytes(p2),
                 "supernet round trip");
  }
  // Checkpoint file.
  {
    const std::string p1 = (dir / "c1.aio").string();
    const std::string p2 = (dir / "c2.aio").string();
    save_checkpoint(p1, res.checkpoint);
    save_checkpoint(p2, load_checkpoint(p1));
    ok &= expect(log, read_file_bytes(p1) == read_file_bytes(p2),
                 "checkpoint round trip");
  }
  // Extracted files at 4, 6 and 8 bits; packed codes decode exactly to the
  // fake-quantized weights.
  for (int bits : {4, 6, 8}) {
    const SubnetSpec spec{2, 16, bits};
    const ExtractedModel ext = extract(model, spec);
    const std::string p1 = (dir / ("e1_" + std::to_string(bits))).string();
    const std::string p2 = (dir / ("e2_" + std::to_string(bits))).string();
    save_extracted(p1, ext);
    const ExtractedModel back = load_extracted(p1);
    save_extracted(p2, back);
    ok &= expect(log, read_file_bytes(p1) == read_file_bytes(p2),
                 "extracted round trip at " + std::to_string(bits) + " bits");
    // Forward outputs reproduce bit-exactly after the round trip.
    Rng rng(19);
    const Tensor feats = random_tensor(rng, {6, cfg.d_in});
    ok &= expect(log,
                 max_abs_diff(ext.frame_log_posteriors(feats),
                              back.frame_log_posteriors(feats)) == 0.0,
                 "extracted forward after reload");
    for (const auto& [name, it] : back.ints) {
      const double scale = model.scales.at(scale_key(name, bits));
      ok &= expect(log, it.scale == scale, "scale drifted for " + name);
    }
    const auto kept = ext.kept.at("enc.l0.ffn1");
    const Tensor& master = model.weights.at("enc.l0.ffn1.w1");
    Tensor sliced = Tensor::zeros({kept.size(), cfg.d_model});
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = 0; j < cfg.d_model; ++j) {
        sliced.at(i, j) = master.at(kept[i], j);
      }
    }
    const Tensor expect_q = fake_quantize(
        sliced, model.scales.at(scale_key("enc.l0.ffn1.w1", bits)), bits);
    ok &= expect(log,
                 max_abs_diff(dequantize(back.ints.at("enc.l0.ffn1.w1")),
                              expect_q) == 0.0,
                 "packed codes decode to the fake-quantized weights");
  }
  std::filesystem::remove_all(dir);
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only, skip;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 || std::strcmp(argv[i], "--skip") == 0) {
      std::set<int>& dst = std::strcmp(argv[i], "--only") == 0 ? only : skip;
      for (int j = i + 1; j < argc && argv[j][0] != '-'; ++j, ++i) {
        dst.insert(std::atoi(argv[j]));
      }
    }
  }

  const std::vector<Criterion> criteria{
      {1, "gradient correctness vs finite differences", criterion_gradients},
      {2, "ctc equals the exhaustive path-sum oracle", criterion_ctc_oracle},
      {3, "extraction containment is bit-exact", criterion_containment},
      {4, "stop-gradient isolates the KL teacher", criterion_stop_gradient},
      {5, "compression ratios match the published column", criterion_compression},
      {6, "desk-scale analogue: extracted vs individual TER", criterion_analogue},
      {7, "one-pass training beats half the summed time", criterion_speedup},
      {8, "matched-pairs significance statistics", criterion_mapsswe},
      {9, "serialization and packed codes are stable", criterion_serialization},
  };

  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && only.count(c.id) == 0) continue;
    if (skip.count(c.id) != 0) continue;
    std::ostringstream detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail << "    exception: " << e.what() << "\n";
    }
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << "criterion " << c.id << ": "
              << c.name << "\n"
              << detail.str();
    if (!ok) ++failures;
  }
  if (failures > 0) {
    std::cout << failures << " criterion(s) failed\n";
    return 1;
  }
  std::cout << "all selected criteria passed\n";
  return 0;
}
