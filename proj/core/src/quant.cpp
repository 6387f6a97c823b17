#include "nestnet/quant.hpp"

#include <cmath>

#include "nestnet/error.hpp"

namespace nestnet {

double qmin(int bits) { return -std::ldexp(1.0, bits - 1); }
double qmax(int bits) { return std::ldexp(1.0, bits - 1) - 1.0; }

void check_quant_args(double scale, int bits) {
  if (bits < 2 || bits > 16) {
    fail(ErrorKind::config, "bit-width " + std::to_string(bits) +
                                " outside supported range [2, 16]");
  }
  if (!(scale > 0.0)) {
    fail(ErrorKind::config, "non-positive quantization scale");
  }
}

Tensor fake_quantize(const Tensor& w, double scale, int bits) {
  check_quant_args(scale, bits);
  const double lo = qmin(bits), hi = qmax(bits);
  Tensor out = w;
  for (double& v : out.values()) {
    const double q = std::min(std::max(std::round(v / scale), lo), hi);
    v = q * scale;
  }
  return out;
}

std::pair<Tensor, double> ste_backward(const Tensor& upstream, const Tensor& w,
                                       double scale, int bits) {
  check_quant_args(scale, bits);
  if (!upstream.same_shape(w)) {
    fail(ErrorKind::shape, "ste_backward: upstream shape " +
                               upstream.shape_str() + " vs weights " +
                               w.shape_str());
  }
  const double lo = qmin(bits), hi = qmax(bits);
  Tensor grad_w = Tensor::zeros(w.shape());
  double grad_s = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double v = w[i] / scale;
    if (v < lo) {
      grad_s += upstream[i] * lo;
    } else if (v > hi) {
      grad_s += upstream[i] * hi;
    } else {
      grad_w[i] = upstream[i];
      grad_s += upstream[i] * (std::round(v) - v);
    }
  }
  grad_s *= lsq_grad_scale(w.numel(), bits);
  return {std::move(grad_w), grad_s};
}

double lsq_grad_scale(std::size_t numel, int bits) {
  return 1.0 / std::sqrt(static_cast<double>(numel) * qmax(bits));
}

IntTensor export_int(const Tensor& w, double scale, int bits) {
  check_quant_args(scale, bits);
  const double lo = qmin(bits), hi = qmax(bits);
  IntTensor t;
  t.shape = w.shape();
  t.bits = bits;
  t.scale = scale;
  t.codes.resize(w.numel());
  for (std::size_t i = 0; i < w.numel(); ++i) {
    t.codes[i] = static_cast<std::int32_t>(
        std::min(std::max(std::round(w[i] / scale), lo), hi));
  }
  return t;
}

Tensor dequantize(const IntTensor& t) {
  Tensor out = Tensor::zeros(t.shape);
  for (std::size_t i = 0; i < t.codes.size(); ++i) {
    out[i] = static_cast<double>(t.codes[i]) * t.scale;
  }
  return out;
}

std::vector<std::uint8_t> pack_codes(const IntTensor& t) {
  const int b = t.bits;
  std::vector<std::uint8_t> bytes((t.codes.size() * b + 7) / 8, 0);
  std::size_t bitpos = 0;
  const std::uint32_t mask = (1u << b) - 1u;
  for (std::int32_t code : t.codes) {
    std::uint32_t u = static_cast<std::uint32_t>(code) & mask;
    for (int k = 0; k < b; ++k, ++bitpos) {
      if (u & (1u << k)) bytes[bitpos >> 3] |= std::uint8_t(1u << (bitpos & 7));
    }
  }
  return bytes;
}

IntTensor unpack_codes(const std::vector<std::uint8_t>& bytes,
                       std::vector<std::size_t> shape, int bits, double scale) {
  check_quant_args(scale, bits);
  IntTensor t;
  t.bits = bits;
  t.scale = scale;
  t.shape = std::move(shape);
  const std::size_t n = shape_numel(t.shape);
  if (bytes.size() < (n * bits + 7) / 8) {
    fail(ErrorKind::truncation, "packed code buffer too short");
  }
  t.codes.resize(n);
  std::size_t bitpos = 0;
  const std::int32_t half = 1 << (bits - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u = 0;
    for (int k = 0; k < bits; ++k, ++bitpos) {
      if (bytes[bitpos >> 3] & (1u << (bitpos & 7))) u |= 1u << k;
    }
    std::int32_t code = static_cast<std::int32_t>(u);
    if (code >= half) code -= 2 * half;
    t.codes[i] = code;
  }
  return t;
}

double init_scale(const Tensor& w, int bits) {
  double mean_abs = 0.0;
  for (double v : w.values()) mean_abs += std::abs(v);
  mean_abs /= static_cast<double>(w.numel());
  const double s = 2.0 * mean_abs / std::sqrt(qmax(bits));
  // Degenerate all-zero tensors still need a usable positive step.
  return s > 0.0 ? s : 1.0;
}

NodeId fake_quantize_node(Graph& g, NodeId w, NodeId s, int bits,
                          std::size_t grad_scale_numel) {
  const Tensor& wv = g.val(w);
  const double sv = g.val(s)[0];
  check_quant_args(sv, bits);
  const double f = lsq_grad_scale(
      grad_scale_numel > 0 ? grad_scale_numel : wv.numel(), bits);
  // View of s whose derivative is f; at build time s - sv is exactly zero,
  // so the value is bitwise equal to the raw scale.
  NodeId s_view = g.add(g.constant_scalar(sv),
                        g.scale(g.sub(s, g.constant_scalar(sv)), f));
  NodeId v = g.div_by_scalar(w, s_view);
  NodeId v_clip = g.clip(v, qmin(bits), qmax(bits));
  // Rounding residual recorded at build time.
  Tensor residual = g.val(v_clip);
  for (double& x : residual.values()) x = std::round(x) - x;
  NodeId v_round = g.add(v_clip, g.constant(std::move(residual)));
  return g.mul_by_scalar(v_round, s_view);
}

}  // namespace nestnet
