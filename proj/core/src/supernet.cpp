#include "nestnet/supernet.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "nestnet/error.hpp"
#include "nestnet/serialize.hpp"

namespace nestnet {

using nlohmann::json;

void validate_grid(const Grid& grid, const EncoderConfig& cfg) {
  if (grid.depths.empty() || grid.widths.empty() || grid.precisions.empty()) {
    fail(ErrorKind::config, "grid axis is empty");
  }
  if (!std::is_sorted(grid.depths.begin(), grid.depths.end()) ||
      !std::is_sorted(grid.widths.begin(), grid.widths.end()) ||
      !std::is_sorted(grid.precisions.begin(), grid.precisions.end())) {
    fail(ErrorKind::config, "grid axes must be sorted ascending");
  }
  if (grid.depths.back() != cfg.depth_max) {
    fail(ErrorKind::config, "largest grid depth must equal depth_max");
  }
  if (grid.widths.back() != cfg.ffn_max) {
    fail(ErrorKind::config, "largest grid width must equal ffn_max");
  }
  if (grid.depths.front() < 1) fail(ErrorKind::config, "grid depth < 1");
  if (grid.widths.front() < 1) fail(ErrorKind::config, "grid width < 1");
  for (int b : grid.precisions) {
    if (b != kFloatBits && (b < 2 || b > 16)) {
      fail(ErrorKind::config, "grid precision " + std::to_string(b));
    }
  }
}

std::vector<SubnetSpec> enumerate_grid(const Grid& grid) {
  std::vector<SubnetSpec> specs;
  for (std::size_t d : grid.depths) {
    for (std::size_t w : grid.widths) {
      for (int b : grid.precisions) {
        specs.push_back({d, w, b});
      }
    }
  }
  std::sort(specs.begin(), specs.end(),
            [](const SubnetSpec& a, const SubnetSpec& b) { return b < a; });
  return specs;
}

SubnetSpec largest_spec(const Grid& grid) {
  return {grid.depths.back(), grid.widths.back(), grid.precisions.back()};
}

SubnetSpec smallest_spec(const Grid& grid) {
  return {grid.depths.front(), grid.widths.front(), grid.precisions.front()};
}

bool grid_contains(const Grid& grid, const SubnetSpec& spec) {
  auto has = [](const auto& v, auto x) {
    return std::find(v.begin(), v.end(), x) != v.end();
  };
  return has(grid.depths, spec.depth) && has(grid.widths, spec.width) &&
         has(grid.precisions, spec.bits);
}

namespace {

// Xavier-uniform for matrices, zeros for biases, identity affine for norms.
Tensor init_tensor(const ParamInfo& info, Rng& rng) {
  const bool is_gain = info.name.ends_with("norm.g") ||
                       info.name.ends_with("norm1.g") ||
                       info.name.ends_with("norm2.g");
  if (info.shape.size() == 1) {
    return is_gain ? Tensor::full(info.shape, 1.0) : Tensor::zeros(info.shape);
  }
  const double fan_out = static_cast<double>(info.shape[0]);
  const double fan_in = static_cast<double>(info.shape[1]);
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t = Tensor::zeros(info.shape);
  for (double& v : t.values()) v = rng.uniform(-a, a);
  return t;
}

// Width-masked tensors get their counted size from the spec, not ffn_max.
std::size_t spec_numel(const ParamInfo& info, const EncoderConfig& cfg,
                       const SubnetSpec& spec) {
  const bool ffn_member = info.name.find(".ffn1.") != std::string::npos ||
                          info.name.find(".ffn2.") != std::string::npos;
  if (!ffn_member) return shape_numel(info.shape);
  if (info.name.ends_with("w1")) return spec.width * cfg.d_model;
  if (info.name.ends_with("b1")) return spec.width;
  if (info.name.ends_with("w2")) return cfg.d_model * spec.width;
  return shape_numel(info.shape);
}

}  // namespace

SupernetModel SupernetModel::init(const EncoderConfig& cfg, const Grid& grid,
                                  MaskPolicy policy, Rng& init_rng) {
  validate_config(cfg);
  validate_grid(grid, cfg);
  SupernetModel m;
  m.config = cfg;
  m.grid = grid;
  m.policy = policy;
  for (const ParamInfo& info : param_inventory(cfg)) {
    m.weights.emplace(info.name, init_tensor(info, init_rng));
  }
  for (const ParamInfo& info : param_inventory(cfg)) {
    if (!info.quantizable) continue;
    for (int b : grid.precisions) {
      if (b == kFloatBits) continue;
      m.scales.emplace(scale_key(info.name, b),
                       init_scale(m.weights.at(info.name), b));
    }
  }
  return m;
}

void SupernetModel::check_spec(const SubnetSpec& spec) const {
  validate_spec_bounds(config, spec);
  const bool identity = spec.depth == config.depth_max &&
                        spec.width == config.ffn_max && spec.bits == kFloatBits;
  if (!identity && !grid_contains(grid, spec)) {
    fail(ErrorKind::config,
         "spec " + spec_to_string(spec) + " is outside the model grid");
  }
}

Tensor SupernetModel::frame_log_posteriors(const Tensor& feats,
                                           const SubnetSpec& spec) const {
  check_spec(spec);
  Graph g;
  ParamSource params(g, weights, /*trainable=*/false);
  params.attach_scales(scales, /*trainable=*/false);
  PreparedParams prepped = prepare_subnet_params(g, params, config, spec, policy);
  const NodeId feats_node = g.input("feats", feats);
  const EncoderNodes enc = build_encoder(g, prepped, config, spec, feats_node);
  return g.val(enc.frame_log_posteriors);
}

ExtractedModel extract(const SupernetModel& model, const SubnetSpec& spec) {
  model.check_spec(spec);
  ExtractedModel out;
  out.spec = spec;
  out.policy = model.policy;
  out.config = model.config;
  out.config.depth_max = spec.depth;
  out.config.ffn_max = spec.width;

  // Kept hidden units per FFN module, frozen at extraction time.
  for (std::size_t l = 0; l < spec.depth; ++l) {
    for (const char* ffn : {"ffn1", "ffn2"}) {
      const std::string module =
          "enc.l" + std::to_string(l) + "." + std::string(ffn);
      out.kept[module] = mask_keep_indices(model.weights.at(module + ".w1"),
                                           spec.width, model.policy);
    }
  }

  auto slice_rows = [](const Tensor& w, const std::vector<std::size_t>& kept) {
    Tensor t = Tensor::zeros({kept.size(), w.cols()});
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = 0; j < w.cols(); ++j) t.at(i, j) = w.at(kept[i], j);
    }
    return t;
  };
  auto slice_cols = [](const Tensor& w, const std::vector<std::size_t>& kept) {
    Tensor t = Tensor::zeros({w.rows(), kept.size()});
    for (std::size_t i = 0; i < w.rows(); ++i) {
      for (std::size_t j = 0; j < kept.size(); ++j) t.at(i, j) = w.at(i, kept[j]);
    }
    return t;
  };
  auto slice_vec = [](const Tensor& v, const std::vector<std::size_t>& kept) {
    Tensor t = Tensor::zeros({kept.size()});
    for (std::size_t i = 0; i < kept.size(); ++i) t[i] = v[kept[i]];
    return t;
  };

  for (const ParamInfo& info : param_inventory(out.config)) {
    const std::string& name = info.name;
    const Tensor& master = model.weights.at(name);
    Tensor sliced;
    const std::size_t ffn1 = name.find(".ffn1.");
    const std::size_t ffn2 = name.find(".ffn2.");
    const std::size_t at = ffn1 != std::string::npos ? ffn1 : ffn2;
    if (at != std::string::npos && spec.width < model.config.ffn_max &&
        (name.ends_with("w1") || name.ends_with("b1") || name.ends_with("w2"))) {
      const std::vector<std::size_t>& kept = out.kept.at(name.substr(0, at + 5));
      if (name.ends_with("w1")) {
        sliced = slice_rows(master, kept);
      } else if (name.ends_with("b1")) {
        sliced = slice_vec(master, kept);
      } else {
        sliced = slice_cols(master, kept);
      }
    } else {
      sliced = master;
    }
    if (info.quantizable && spec.bits != kFloatBits) {
      out.ints.emplace(
          name, export_int(sliced, model.scales.at(scale_key(name, spec.bits)),
                           spec.bits));
    } else {
      out.floats.emplace(name, std::move(sliced));
    }
  }
  return out;
}

std::map<std::string, Tensor> ExtractedModel::dense() const {
  std::map<std::string, Tensor> out = floats;
  for (const auto& [name, it] : ints) out.emplace(name, dequantize(it));
  return out;
}

Tensor ExtractedModel::frame_log_posteriors(const Tensor& feats) const {
  const std::map<std::string, Tensor> tensors = dense();
  Graph g;
  ParamSource params(g, tensors, /*trainable=*/false);
  // The sliced network is its own identity spec: full width, no requantize.
  const SubnetSpec identity{config.depth_max, config.ffn_max, kFloatBits};
  PreparedParams prepped =
      prepare_subnet_params(g, params, config, identity, policy);
  const NodeId feats_node = g.input("feats", feats);
  const EncoderNodes enc = build_encoder(g, prepped, config, identity, feats_node);
  return g.val(enc.frame_log_posteriors);
}

std::pair<std::size_t, std::size_t> param_count(const EncoderConfig& cfg,
                                                const SubnetSpec& spec) {
  validate_spec_bounds(cfg, spec);
  std::size_t quant = 0, fixed = 0;
  for (const ParamInfo& info : param_inventory(cfg)) {
    if (info.layer >= 0 && static_cast<std::size_t>(info.layer) >= spec.depth) {
      continue;
    }
    const std::size_t n = spec_numel(info, cfg, spec);
    (info.quantizable ? quant : fixed) += n;
  }
  return {quant, fixed};
}

double ratio_from_counts(double n_base_total, double n_quantizable,
                         double n_fixed, int bits) {
  return n_base_total * 32.0 / (n_quantizable * bits + n_fixed * 32.0);
}

double compression_ratio(const EncoderConfig& cfg, const SubnetSpec& base,
                         const SubnetSpec& spec) {
  if (base.bits != kFloatBits) {
    fail(ErrorKind::config, "compression base must be 32-bit");
  }
  const auto [bq, bf] = param_count(cfg, base);
  const auto [sq, sf] = param_count(cfg, spec);
  return ratio_from_counts(static_cast<double>(bq + bf),
                           static_cast<double>(sq), static_cast<double>(sf),
                           spec.bits);
}

// ---------------------------------------------------------------------
// serialization

namespace {

json config_to_json(const EncoderConfig& c) {
  return json{{"depth_max", c.depth_max}, {"d_model", c.d_model},
              {"ffn_max", c.ffn_max},     {"heads", c.heads},
              {"conv_kernel", c.conv_kernel}, {"vocab", c.vocab},
              {"d_in", c.d_in}};
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig c;
  c.depth_max = j.at("depth_max").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.ffn_max = j.at("ffn_max").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.conv_kernel = j.at("conv_kernel").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.d_in = j.at("d_in").get<std::size_t>();
  return c;
}

json grid_to_json(const Grid& g) {
  return json{{"depths", g.depths},
              {"widths", g.widths},
              {"precisions", g.precisions}};
}

Grid grid_from_json(const json& j) {
  Grid g;
  g.depths = j.at("depths").get<std::vector<std::size_t>>();
  g.widths = j.at("widths").get<std::vector<std::size_t>>();
  g.precisions = j.at("precisions").get<std::vector<int>>();
  return g;
}

json parse_header(const std::string& header, const std::string& path) {
  json j = json::parse(header, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) {
    fail(ErrorKind::format, path + ": header is not valid JSON");
  }
  return j;
}

}  // namespace

void save_supernet(const std::string& path, const SupernetModel& model) {
  json header;
  header["kind"] = "supernet";
  header["config"] = config_to_json(model.config);
  header["grid"] = grid_to_json(model.grid);
  header["policy"] = policy_to_string(model.policy);
  header["meta"] = {{"steps", model.meta.steps}, {"seed", model.meta.seed}};
  json tensors = json::array();
  ByteSink payload;
  for (const ParamInfo& info : param_inventory(model.config)) {
    tensors.push_back({{"name", info.name}, {"shape", info.shape}});
    payload.tensor(model.weights.at(info.name));
  }
  header["tensors"] = tensors;
  json scale_keys = json::array();
  for (const auto& [key, value] : model.scales) {
    scale_keys.push_back(key);
    payload.f64(value);
  }
  header["scales"] = scale_keys;
  write_container(path, kModelMagic, kModelVersion, header.dump(),
                  payload.bytes());
}

SupernetModel load_supernet(const std::string& path) {
  const Container c = read_container(path, kModelMagic, kModelVersion);
  const json header = parse_header(c.header, path);
  if (header.at("kind") != "supernet") {
    fail(ErrorKind::format, path + ": not a supernet file");
  }
  SupernetModel m;
  m.config = config_from_json(header.at("config"));
  m.grid = grid_from_json(header.at("grid"));
  m.policy = policy_from_string(header.at("policy").get<std::string>());
  m.meta.steps = header.at("meta").at("steps").get<std::uint64_t>();
  m.meta.seed = header.at("meta").at("seed").get<std::uint64_t>();
  ByteReader rd(c.payload);
  for (const json& t : header.at("tensors")) {
    m.weights.emplace(t.at("name").get<std::string>(),
                      rd.tensor(t.at("shape").get<std::vector<std::size_t>>()));
  }
  for (const json& k : header.at("scales")) {
    m.scales.emplace(k.get<std::string>(), rd.f64());
  }
  return m;
}

void save_extracted(const std::string& path, const ExtractedModel& model) {
  json header;
  header["kind"] = "extracted";
  header["config"] = config_to_json(model.config);
  header["spec"] = spec_to_string(model.spec);
  header["policy"] = policy_to_string(model.policy);
  json kept = json::object();
  for (const auto& [module, indices] : model.kept) kept[module] = indices;
  header["kept"] = kept;
  json tensors = json::array();
  ByteSink payload;
  for (const ParamInfo& info : param_inventory(model.config)) {
    auto it = model.ints.find(info.name);
    if (it != model.ints.end()) {
      const IntTensor& q = it->second;
      tensors.push_back({{"name", info.name},
                         {"shape", q.shape},
                         {"dtype", "int"},
                         {"bits", q.bits}});
      payload.f64(q.scale);
      const std::vector<std::uint8_t> packed = pack_codes(q);
      payload.u64(packed.size());
      payload.raw(packed.data(), packed.size());
    } else {
      const Tensor& t = model.floats.at(info.name);
      tensors.push_back(
          {{"name", info.name}, {"shape", t.shape()}, {"dtype", "f64"}});
      payload.tensor(t);
    }
  }
  header["tensors"] = tensors;
  write_container(path, kModelMagic, kModelVersion, header.dump(),
                  payload.bytes());
}

ExtractedModel load_extracted(const std::string& path) {
  const Container c = read_container(path, kModelMagic, kModelVersion);
  const json header = parse_header(c.header, path);
  if (header.at("kind") != "extracted") {
    fail(ErrorKind::format, path + ": not an extracted model file");
  }
  ExtractedModel m;
  m.config = config_from_json(header.at("config"));
  m.spec = spec_from_string(header.at("spec").get<std::string>());
  m.policy = policy_from_string(header.at("policy").get<std::string>());
  for (const auto& [module, indices] : header.at("kept").items()) {
    m.kept[module] = indices.get<std::vector<std::size_t>>();
  }
  ByteReader rd(c.payload);
  for (const json& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    auto shape = t.at("shape").get<std::vector<std::size_t>>();
    if (t.at("dtype") == "int") {
      const int bits = t.at("bits").get<int>();
      const double scale = rd.f64();
      const std::uint64_t len = rd.u64();
      const std::vector<std::uint8_t> packed = rd.blob(len);
      m.ints.emplace(name, unpack_codes(packed, std::move(shape), bits, scale));
    } else {
      m.floats.emplace(name, rd.tensor(std::move(shape)));
    }
  }
  return m;
}

std::string model_file_kind(const std::string& path) {
  const Container c = read_container(path, kModelMagic, kModelVersion);
  return parse_header(c.header, path).at("kind").get<std::string>();
}

}  // namespace nestnet
