#include "nestnet/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nestnet/error.hpp"

namespace nestnet {

void validate_config(const EncoderConfig& cfg) {
  if (cfg.depth_max < 1 || cfg.d_model < 1 || cfg.ffn_max < 1 ||
      cfg.heads < 1 || cfg.vocab < 2 || cfg.d_in < 1) {
    fail(ErrorKind::config, "encoder config has a zero-sized field");
  }
  if (cfg.d_model % cfg.heads != 0) {
    fail(ErrorKind::config, "d_model must be divisible by head count");
  }
  if (cfg.conv_kernel % 2 == 0) {
    fail(ErrorKind::config, "conv kernel length must be odd");
  }
}

std::string spec_to_string(const SubnetSpec& spec) {
  return std::to_string(spec.depth) + "-" + std::to_string(spec.width) + "-" +
         std::to_string(spec.bits) + "bit";
}

SubnetSpec spec_from_string(const std::string& s) {
  const auto bad = [&] {
    fail(ErrorKind::config, "malformed spec '" + s +
                                "': expected <depth>-<width>-<bits>bit, "
                                "e.g. 8-1024-4bit (32bit = unquantized)");
  };
  const std::size_t d1 = s.find('-');
  const std::size_t d2 = s.find('-', d1 == std::string::npos ? d1 : d1 + 1);
  if (d1 == std::string::npos || d2 == std::string::npos) bad();
  if (s.size() < 4 || s.substr(s.size() - 3) != "bit") bad();
  SubnetSpec spec;
  try {
    std::size_t used = 0;
    spec.depth = std::stoul(s.substr(0, d1), &used);
    if (used != d1) bad();
    spec.width = std::stoul(s.substr(d1 + 1, d2 - d1 - 1), &used);
    if (used != d2 - d1 - 1) bad();
    const std::string bits_str = s.substr(d2 + 1, s.size() - 3 - d2 - 1);
    spec.bits = std::stoi(bits_str, &used);
    if (used != bits_str.size()) bad();
  } catch (const std::logic_error&) {
    bad();
  }
  if (spec.depth == 0 || spec.width == 0) bad();
  if (spec.bits != kFloatBits && (spec.bits < 2 || spec.bits > 16)) bad();
  return spec;
}

std::string policy_to_string(MaskPolicy p) {
  return p == MaskPolicy::leading ? "leading" : "l2norm";
}

MaskPolicy policy_from_string(const std::string& s) {
  if (s == "leading") return MaskPolicy::leading;
  if (s == "l2norm") return MaskPolicy::l2norm;
  fail(ErrorKind::config, "unknown mask policy '" + s + "'");
}

std::vector<std::size_t> mask_keep_indices(const Tensor& first_matrix,
                                           std::size_t keep,
                                           MaskPolicy policy) {
  const std::size_t rows = first_matrix.rows();
  if (keep < 1 || keep > rows) {
    fail(ErrorKind::config, "keep count " + std::to_string(keep) +
                                " out of range for " +
                                std::to_string(rows) + " rows");
  }
  std::vector<std::size_t> kept;
  if (policy == MaskPolicy::leading) {
    kept.resize(keep);
    std::iota(kept.begin(), kept.end(), 0);
    return kept;
  }
  const std::size_t cols = first_matrix.cols();
  std::vector<double> norm(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = first_matrix.at(i, j);
      norm[i] += v * v;
    }
  }
  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return norm[a] > norm[b];  // stable: ties go to the lower index
  });
  kept.assign(order.begin(), order.begin() + keep);
  std::sort(kept.begin(), kept.end());
  return kept;
}

Tensor width_mask(const Tensor& W, std::size_t keep, MaskPolicy policy) {
  return apply_row_mask(W, mask_keep_indices(W, keep, policy));
}

Tensor apply_row_mask(const Tensor& W, const std::vector<std::size_t>& kept) {
  Tensor out = Tensor::zeros(W.shape());
  const std::size_t cols = W.cols();
  for (std::size_t i : kept) {
    for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = W.at(i, j);
  }
  return out;
}

Tensor apply_col_mask(const Tensor& W, const std::vector<std::size_t>& kept) {
  Tensor out = Tensor::zeros(W.shape());
  const std::size_t rows = W.rows();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j : kept) out.at(i, j) = W.at(i, j);
  }
  return out;
}

std::vector<ParamInfo> param_inventory(const EncoderConfig& cfg) {
  validate_config(cfg);
  std::vector<ParamInfo> inv;
  const std::size_t d = cfg.d_model;
  const std::size_t f = cfg.ffn_max;
  auto put = [&](std::string name, std::vector<std::size_t> shape, bool quant,
                 int layer) {
    inv.push_back({std::move(name), std::move(shape), quant, layer});
  };
  put("frontend.proj.w", {d, cfg.d_in}, false, -1);
  put("frontend.proj.b", {d}, false, -1);
  for (std::size_t l = 0; l < cfg.depth_max; ++l) {
    const std::string p = "enc.l" + std::to_string(l) + ".";
    const int li = static_cast<int>(l);
    for (const char* ffn : {"ffn1.", "ffn2."}) {
      put(p + ffn + "norm.g", {d}, false, li);
      put(p + ffn + "norm.b", {d}, false, li);
      put(p + ffn + "w1", {f, d}, true, li);
      put(p + ffn + "b1", {f}, false, li);
      put(p + ffn + "w2", {d, f}, true, li);
      put(p + ffn + "b2", {d}, false, li);
    }
    put(p + "mhsa.norm.g", {d}, false, li);
    put(p + "mhsa.norm.b", {d}, false, li);
    for (const char* proj : {"q", "k", "v", "o"}) {
      put(p + "mhsa.w" + std::string(proj), {d, d}, true, li);
      put(p + "mhsa.b" + std::string(proj), {d}, false, li);
    }
    put(p + "conv.norm.g", {d}, false, li);
    put(p + "conv.norm.b", {d}, false, li);
    put(p + "conv.pw1.w", {2 * d, d}, true, li);
    put(p + "conv.pw1.b", {2 * d}, false, li);
    put(p + "conv.dw.w", {cfg.conv_kernel, d}, true, li);
    put(p + "conv.dw.b", {d}, false, li);
    put(p + "conv.norm2.g", {d}, false, li);
    put(p + "conv.norm2.b", {d}, false, li);
    put(p + "conv.pw2.w", {d, d}, true, li);
    put(p + "conv.pw2.b", {d}, false, li);
    put(p + "out_norm.g", {d}, false, li);
    put(p + "out_norm.b", {d}, false, li);
  }
  put("ctc.w", {cfg.vocab, d}, false, -1);
  put("ctc.b", {cfg.vocab}, false, -1);
  put("dec.emb", {cfg.vocab, d}, false, -1);
  put("dec.norm1.g", {d}, false, -1);
  put("dec.norm1.b", {d}, false, -1);
  put("dec.q.w", {d, d}, false, -1);
  put("dec.q.b", {d}, false, -1);
  put("dec.norm2.g", {d}, false, -1);
  put("dec.norm2.b", {d}, false, -1);
  put("dec.out.w", {cfg.vocab, d}, false, -1);
  put("dec.out.b", {cfg.vocab}, false, -1);
  return inv;
}

std::string scale_key(const std::string& tensor_name, int bits) {
  return tensor_name + "@" + std::to_string(bits);
}

void ParamSource::attach_scales(const std::map<std::string, double>& scales,
                                bool trainable) {
  scales_ = &scales;
  scales_trainable_ = trainable;
}

NodeId ParamSource::node(const std::string& name) {
  if (g_->has_leaf(name)) return g_->leaf_id(name);
  return trainable_ ? g_->param(name, tensor(name))
                    : g_->input(name, tensor(name));
}

NodeId ParamSource::scale_node(const std::string& tensor_name, int bits) {
  if (scales_ == nullptr) fail(ErrorKind::config, "no scales attached");
  const std::string key = scale_key(tensor_name, bits);
  if (g_->has_leaf(key)) return g_->leaf_id(key);
  auto it = scales_->find(key);
  if (it == scales_->end()) {
    fail(ErrorKind::config, "missing quantization scale " + key);
  }
  const Tensor t = Tensor::scalar(it->second);
  return scales_trainable_ ? g_->param(key, t) : g_->input(key, t);
}

const Tensor& ParamSource::tensor(const std::string& name) const {
  auto it = tensors_->find(name);
  if (it == tensors_->end()) {
    fail(ErrorKind::config, "missing parameter tensor " + name);
  }
  return it->second;
}

void validate_spec_bounds(const EncoderConfig& cfg, const SubnetSpec& spec) {
  if (spec.depth < 1 || spec.depth > cfg.depth_max) {
    fail(ErrorKind::config, "spec depth " + std::to_string(spec.depth) +
                                " outside [1, " +
                                std::to_string(cfg.depth_max) + "]");
  }
  if (spec.width < 1 || spec.width > cfg.ffn_max) {
    fail(ErrorKind::config, "spec width " + std::to_string(spec.width) +
                                " outside [1, " + std::to_string(cfg.ffn_max) +
                                "]");
  }
  if (spec.bits != kFloatBits && (spec.bits < 2 || spec.bits > 16)) {
    fail(ErrorKind::config, "spec bits " + std::to_string(spec.bits));
  }
}

namespace {

std::vector<std::int32_t> kept_as_i32(const std::vector<std::size_t>& kept) {
  std::vector<std::int32_t> out;
  out.reserve(kept.size());
  for (std::size_t i : kept) out.push_back(static_cast<std::int32_t>(i));
  return out;
}

}  // namespace

PreparedParams prepare_subnet_params(Graph& g, ParamSource& params,
                                     const EncoderConfig& cfg,
                                     const SubnetSpec& spec,
                                     MaskPolicy policy) {
  validate_spec_bounds(cfg, spec);
  PreparedParams out;
  const bool quantize = spec.bits != kFloatBits;
  // Geometry came from the tensors themselves so extracted (pre-sliced)
  // parameter sets reuse this path with width == ffn dimension.
  auto plain = [&](const std::string& name) { out[name] = params.node(name); };
  auto quant_w = [&](const std::string& name) {
    NodeId n = params.node(name);
    if (quantize) {
      n = fake_quantize_node(g, n, params.scale_node(name, spec.bits),
                             spec.bits);
    }
    out[name] = n;
  };

  plain("frontend.proj.w");
  plain("frontend.proj.b");
  for (std::size_t l = 0; l < spec.depth; ++l) {
    const std::string p = "enc.l" + std::to_string(l) + ".";
    for (const char* ffn : {"ffn1.", "ffn2."}) {
      plain(p + ffn + "norm.g");
      plain(p + ffn + "norm.b");
      const std::string w1 = p + ffn + "w1";
      const std::string b1 = p + ffn + "b1";
      const std::string w2 = p + ffn + "w2";
      const std::size_t rows = params.tensor(w1).rows();
      if (spec.width < rows) {
        // Forward the kept hidden units only. Slicing is bitwise equal to
        // zero-masking the full matrices (dropped rows contribute exact
        // zeros there), but skips their compute; step-size gradients keep
        // the master element count so they match the masked composition.
        const auto kept =
            kept_as_i32(mask_keep_indices(params.tensor(w1), spec.width, policy));
        NodeId w1n = g.embed_rows(params.node(w1), kept);
        NodeId b1n = g.embed_rows(params.node(b1), kept);
        NodeId w2n = g.gather_cols(params.node(w2), kept);
        if (quantize) {
          w1n = fake_quantize_node(g, w1n, params.scale_node(w1, spec.bits),
                                   spec.bits, params.tensor(w1).numel());
          w2n = fake_quantize_node(g, w2n, params.scale_node(w2, spec.bits),
                                   spec.bits, params.tensor(w2).numel());
        }
        out[w1] = w1n;
        out[b1] = b1n;
        out[w2] = w2n;
      } else {
        quant_w(w1);
        plain(b1);
        quant_w(w2);
      }
      plain(p + ffn + "b2");
    }
    plain(p + "mhsa.norm.g");
    plain(p + "mhsa.norm.b");
    for (const char* proj : {"q", "k", "v", "o"}) {
      quant_w(p + "mhsa.w" + std::string(proj));
      plain(p + "mhsa.b" + std::string(proj));
    }
    plain(p + "conv.norm.g");
    plain(p + "conv.norm.b");
    quant_w(p + "conv.pw1.w");
    plain(p + "conv.pw1.b");
    quant_w(p + "conv.dw.w");
    plain(p + "conv.dw.b");
    plain(p + "conv.norm2.g");
    plain(p + "conv.norm2.b");
    quant_w(p + "conv.pw2.w");
    plain(p + "conv.pw2.b");
    plain(p + "out_norm.g");
    plain(p + "out_norm.b");
  }
  plain("ctc.w");
  plain("ctc.b");
  plain("dec.emb");
  plain("dec.norm1.g");
  plain("dec.norm1.b");
  plain("dec.q.w");
  plain("dec.q.b");
  plain("dec.norm2.g");
  plain("dec.norm2.b");
  plain("dec.out.w");
  plain("dec.out.b");
  return out;
}

namespace {

NodeId prepared(const PreparedParams& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) fail(ErrorKind::config, "parameter not prepared: " + name);
  return it->second;
}

NodeId apply_norm(Graph& g, const PreparedParams& p, const std::string& prefix,
                  NodeId x) {
  return g.layer_norm_affine(x, prepared(p, prefix + ".g"),
                             prepared(p, prefix + ".b"));
}

NodeId linear_nt(Graph& g, const PreparedParams& p, const std::string& w,
                 const std::string& b, NodeId x) {
  return g.linear_nt(x, prepared(p, w), prepared(p, b));
}

NodeId ffn_block(Graph& g, const PreparedParams& p, const std::string& prefix,
                 NodeId x) {
  NodeId h = apply_norm(g, p, prefix + "norm", x);
  h = linear_nt(g, p, prefix + "w1", prefix + "b1", h);
  h = g.swish(h);
  h = linear_nt(g, p, prefix + "w2", prefix + "b2", h);
  return g.add(x, g.scale(h, 0.5));  // macaron half-step
}

NodeId mhsa_block(Graph& g, const PreparedParams& p, const std::string& pfx,
                  const EncoderConfig& cfg, NodeId x) {
  NodeId h = apply_norm(g, p, pfx + "norm", x);
  const NodeId q = linear_nt(g, p, pfx + "wq", pfx + "bq", h);
  const NodeId k = linear_nt(g, p, pfx + "wk", pfx + "bk", h);
  const NodeId v = linear_nt(g, p, pfx + "wv", pfx + "bv", h);
  const std::size_t dk = cfg.d_model / cfg.heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  NodeId heads_out = kNoNode;
  for (std::size_t head = 0; head < cfg.heads; ++head) {
    const std::size_t c0 = head * dk, c1 = (head + 1) * dk;
    const NodeId qh = g.slice_cols(q, c0, c1);
    const NodeId kh = g.slice_cols(k, c0, c1);
    const NodeId vh = g.slice_cols(v, c0, c1);
    const NodeId scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dk);
    const NodeId att = g.matmul(g.softmax_rows(scores), vh);
    heads_out = head == 0 ? att : g.concat_cols(heads_out, att);
  }
  const NodeId o = linear_nt(g, p, pfx + "wo", pfx + "bo", heads_out);
  return g.add(x, o);
}

NodeId conv_block(Graph& g, const PreparedParams& p, const std::string& pfx,
                  const EncoderConfig& cfg, NodeId x) {
  NodeId h = apply_norm(g, p, pfx + "norm", x);
  h = linear_nt(g, p, pfx + "pw1.w", pfx + "pw1.b", h);
  // Gated linear unit over the doubled channels.
  const NodeId lin = g.slice_cols(h, 0, cfg.d_model);
  const NodeId gate = g.sigmoid(g.slice_cols(h, cfg.d_model, 2 * cfg.d_model));
  h = g.mul(lin, gate);
  h = g.depthwise_conv1d(h, prepared(p, pfx + "dw.w"));
  h = g.add_rowvec(h, prepared(p, pfx + "dw.b"));
  h = apply_norm(g, p, pfx + "norm2", h);
  h = g.swish(h);
  h = linear_nt(g, p, pfx + "pw2.w", pfx + "pw2.b", h);
  return g.add(x, h);
}

}  // namespace

EncoderNodes build_encoder(Graph& g, const PreparedParams& p,
                           const EncoderConfig& cfg, const SubnetSpec& spec,
                           NodeId feats, std::vector<NodeId>* layer_states) {
  const Tensor& fv = g.val(feats);
  if (fv.rows() < 1 || fv.numel() == 0) {
    fail(ErrorKind::config, "encoder forward on empty input");
  }
  if (fv.cols() != cfg.d_in) {
    fail(ErrorKind::shape, "input feature dim " + std::to_string(fv.cols()) +
                               " does not match configured " +
                               std::to_string(cfg.d_in));
  }
  NodeId x = linear_nt(g, p, "frontend.proj.w", "frontend.proj.b", feats);
  x = g.add(x, g.constant(sinusoidal_pe(fv.rows(), cfg.d_model)));
  for (std::size_t l = 0; l < spec.depth; ++l) {
    const std::string pfx = "enc.l" + std::to_string(l) + ".";
    x = ffn_block(g, p, pfx + "ffn1.", x);
    x = mhsa_block(g, p, pfx + "mhsa.", cfg, x);
    x = conv_block(g, p, pfx + "conv.", cfg, x);
    x = ffn_block(g, p, pfx + "ffn2.", x);
    x = apply_norm(g, p, pfx + "out_norm", x);
    if (layer_states != nullptr) layer_states->push_back(x);
  }
  EncoderNodes out;
  out.encoder_states = x;
  const NodeId logits = linear_nt(g, p, "ctc.w", "ctc.b", x);
  out.frame_log_posteriors = g.log_softmax_rows(logits);
  return out;
}

NodeId build_decoder(Graph& g, const PreparedParams& p,
                     const EncoderConfig& cfg, NodeId encoder_states,
                     const std::vector<std::int32_t>& prefix) {
  if (prefix.empty()) {
    fail(ErrorKind::config, "decoder prefix is empty; it must start with "
                            "the start-of-sequence token");
  }
  NodeId h = g.embed_rows(prepared(p, "dec.emb"), prefix);
  h = g.add(h, g.constant(sinusoidal_pe(prefix.size(), cfg.d_model)));
  NodeId q = apply_norm(g, p, "dec.norm1", h);
  q = linear_nt(g, p, "dec.q.w", "dec.q.b", q);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const NodeId scores = g.scale(g.matmul_nt(q, encoder_states), inv_sqrt_d);
  const NodeId ctx = g.matmul(g.softmax_rows(scores), encoder_states);
  h = g.add(h, ctx);
  h = apply_norm(g, p, "dec.norm2", h);
  const NodeId logits = linear_nt(g, p, "dec.out.w", "dec.out.b", h);
  return g.log_softmax_rows(logits);
}

Tensor sinusoidal_pe(std::size_t frames, std::size_t dim) {
  Tensor pe = Tensor::zeros({frames, dim});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double angle =
          static_cast<double>(t) /
          std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
      pe.at(t, i) = std::sin(angle);
      if (i + 1 < dim) pe.at(t, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

}  // namespace nestnet
