#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nestnet/graph.hpp"
#include "nestnet/tensor.hpp"

namespace nestnet {

inline constexpr int kFloatBits = 32;  // sentinel for "not quantized"

/// Learnable step size of the symmetric per-tensor quantizer. One scale
/// exists per (tensor, bit-width) pair; the same float master weights back
/// every precision.
struct QuantScale {
  std::string tensor_name;
  int bits = 8;
  double scale = 1.0;
  bool trainable = true;
};

double qmin(int bits);
double qmax(int bits);
void check_quant_args(double scale, int bits);

/// Signed integer codes plus the step size; codes * scale reproduces the
/// fake-quantized weights exactly.
struct IntTensor {
  std::vector<std::size_t> shape;
  std::vector<std::int32_t> codes;
  int bits = 8;
  double scale = 1.0;
};

// w_hat = clamp(round(w / s), qmin, qmax) * s, rounding half away from zero.
Tensor fake_quantize(const Tensor& w, double scale, int bits);

// Clipped straight-through weight gradient and the learned-step-size scale
// gradient: per element, d w_hat / d s is (round(w/s) - w/s) inside the
// representable range and qmin / qmax outside; the summed scale gradient is
// multiplied by 1 / sqrt(numel * qmax).
std::pair<Tensor, double> ste_backward(const Tensor& upstream, const Tensor& w,
                                       double scale, int bits);

double lsq_grad_scale(std::size_t numel, int bits);

IntTensor export_int(const Tensor& w, double scale, int bits);
Tensor dequantize(const IntTensor& t);

// Packed little-endian bitstream of the b-bit two's-complement codes,
// row-major.
std::vector<std::uint8_t> pack_codes(const IntTensor& t);
IntTensor unpack_codes(const std::vector<std::uint8_t>& bytes,
                       std::vector<std::size_t> shape, int bits, double scale);

// Learned-step-size initialization: 2 * mean(|w|) / sqrt(qmax).
double init_scale(const Tensor& w, int bits);

/// Quantizer as a differentiable subgraph. The rounding residual and the
/// gradient-scale linearization of the step size are recorded as constants
/// at build time, so replaying the graph after rebinding w or s stays
/// consistent with the straight-through backward rule. When the input is a
/// row/column slice of a wider master tensor, `grad_scale_numel` carries
/// the master's element count so the step-size gradient matches the
/// masked-forward composition exactly.
NodeId fake_quantize_node(Graph& g, NodeId w, NodeId s, int bits,
                          std::size_t grad_scale_numel = 0);

}  // namespace nestnet
