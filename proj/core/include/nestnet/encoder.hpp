#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nestnet/graph.hpp"
#include "nestnet/quant.hpp"
#include "nestnet/tensor.hpp"

namespace nestnet {

/// Static geometry of the largest encoder. `vocab` includes the blank
/// token (index 0); `d_in` is the input feature dimension.
struct EncoderConfig {
  std::size_t depth_max = 4;
  std::size_t d_model = 16;
  std::size_t ffn_max = 64;
  std::size_t heads = 2;
  std::size_t conv_kernel = 3;
  std::size_t vocab = 12;
  std::size_t d_in = 8;
};

void validate_config(const EncoderConfig& cfg);

/// One point in the (depth, width, bits) grid; bits == 32 means the float
/// master weights are used unquantized.
struct SubnetSpec {
  std::size_t depth = 0;
  std::size_t width = 0;
  int bits = kFloatBits;

  bool operator==(const SubnetSpec&) const = default;
  auto operator<=>(const SubnetSpec&) const = default;
};

std::string spec_to_string(const SubnetSpec& spec);  // "8-1024-4bit"
SubnetSpec spec_from_string(const std::string& s);

enum class MaskPolicy { leading, l2norm };

std::string policy_to_string(MaskPolicy p);
MaskPolicy policy_from_string(const std::string& s);

// Kept hidden-unit indices for one FFN module, computed from the first
// matrix's rows. `leading` keeps 0..keep-1; `l2norm` keeps the rows of
// largest L2 norm, ties broken toward the lower index. Ascending order.
std::vector<std::size_t> mask_keep_indices(const Tensor& first_matrix,
                                           std::size_t keep, MaskPolicy policy);

// Zeroes the rows of W outside the kept set derived from W itself.
Tensor width_mask(const Tensor& W, std::size_t keep, MaskPolicy policy);
// Same-set variants used for the rest of the module (second matrix, bias).
Tensor apply_row_mask(const Tensor& W, const std::vector<std::size_t>& kept);
Tensor apply_col_mask(const Tensor& W, const std::vector<std::size_t>& kept);

struct ParamInfo {
  std::string name;
  std::vector<std::size_t> shape;
  bool quantizable = false;
  int layer = -1;  // -1 for tensors outside the layer stack
};

// Every trainable tensor exactly once, in a fixed order that also defines
// serialization and optimizer-state order.
std::vector<ParamInfo> param_inventory(const EncoderConfig& cfg);

std::string scale_key(const std::string& tensor_name, int bits);

/// Resolves named parameters to graph leaves, creating each leaf on first
/// use. Backed by the master tensor map of a supernet (trainable) or by
/// the sliced tensors of an extracted model (constant).
class ParamSource {
 public:
  ParamSource(Graph& g, const std::map<std::string, Tensor>& tensors,
              bool trainable)
      : g_(&g), tensors_(&tensors), trainable_(trainable) {}

  void attach_scales(const std::map<std::string, double>& scales,
                     bool trainable);

  NodeId node(const std::string& name);
  NodeId scale_node(const std::string& tensor_name, int bits);
  const Tensor& tensor(const std::string& name) const;

 private:
  Graph* g_;
  const std::map<std::string, Tensor>* tensors_;
  bool trainable_;
  const std::map<std::string, double>* scales_ = nullptr;
  bool scales_trainable_ = false;
};

/// Weight nodes for one sub-network view: width-masked where the spec
/// shrinks the FFN, fake-quantized where the spec lowers the precision.
/// Shared by every utterance forwarded under the same spec in one graph.
using PreparedParams = std::map<std::string, NodeId>;

PreparedParams prepare_subnet_params(Graph& g, ParamSource& params,
                                     const EncoderConfig& cfg,
                                     const SubnetSpec& spec,
                                     MaskPolicy policy);

struct EncoderNodes {
  NodeId frame_log_posteriors = kNoNode;  // [T, vocab]
  NodeId encoder_states = kNoNode;        // [T, d_model]
};

// Forward through the bottom spec.depth layers; returns per-frame log
// posteriors (rows are normalized log-distributions) and the final hidden
// states for the attention decoder. `layer_states`, when given, receives
// the hidden state node after each layer.
EncoderNodes build_encoder(Graph& g, const PreparedParams& p,
                           const EncoderConfig& cfg, const SubnetSpec& spec,
                           NodeId feats,
                           std::vector<NodeId>* layer_states = nullptr);

// Single cross-attention decoder layer over the encoder states, teacher
// forced with `prefix` (must start with the start-of-sequence id 0).
// Output rows are log-distributions, one per prefix position.
NodeId build_decoder(Graph& g, const PreparedParams& p,
                     const EncoderConfig& cfg, NodeId encoder_states,
                     const std::vector<std::int32_t>& prefix);

Tensor sinusoidal_pe(std::size_t frames, std::size_t dim);

void validate_spec_bounds(const EncoderConfig& cfg, const SubnetSpec& spec);

}  // namespace nestnet
