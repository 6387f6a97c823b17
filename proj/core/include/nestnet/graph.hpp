#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nestnet/tensor.hpp"

namespace nestnet {

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = 0xFFFFFFFFu;

/// Gradient per named trainable leaf, shapes matching the parameters.
using GradMap = std::map<std::string, Tensor>;

enum class OpKind : std::uint8_t {
  leaf,             // named rebindable input (trainable or not)
  constant,         // recorded value, never rebound, never differentiated
  add,              // elementwise, same shape
  sub,              // elementwise, same shape
  mul,              // elementwise, same shape
  scale,            // multiply by compile-time constant attr_a
  add_rowvec,       // X[i,j] + v[j]
  mul_rowvec,       // X[i,j] * v[j]
  scale_rows,       // X[i,j] * v[i]
  matmul,           // [n,k] x [k,m]
  matmul_nt,        // [n,k] x [m,k]^T
  linear_nt,        // x [n,k] * W[m,k]^T + b[m]
  slice_cols,       // columns [attr_i0, attr_i1)
  concat_cols,      // two inputs side by side
  softmax_rows,
  log_softmax_rows,
  log_op,
  exp_op,
  relu,
  sigmoid,
  swish,            // x * sigmoid(x)
  layer_norm_rows,  // per-row normalization, eps = attr_a, no affine
  layer_norm_affine,// normalized rows scaled by gamma, shifted by beta
  depthwise_conv1d, // X [T,C], kernel [K,C], zero 'same' padding
  mean_all,
  sum_all,
  div_scalar_node,  // X / s, s a {1} node
  mul_scalar_node,  // X * s
  clip,             // clamp to [attr_a, attr_b], pass-through gradient inside
  stop_gradient,    // forward identity, no backward contribution
  embed_rows,       // gather rows of input 0 by index list
  gather_cols,      // gather columns of input 0 by index list
  ctc,              // CTC negative log-likelihood of the index-list target
  nll_rows,         // mean negative log-likelihood of targets under log-prob rows
};

const char* op_name(OpKind kind);

struct Node {
  OpKind kind = OpKind::leaf;
  NodeId in0 = kNoNode;
  NodeId in1 = kNoNode;
  NodeId in2 = kNoNode;
  bool requires_grad = false;
  bool trainable = false;
  std::int32_t name_id = -1;   // leaves only
  double attr_a = 0.0;
  double attr_b = 0.0;
  std::vector<std::int32_t> idx;  // embed / ctc / nll targets
  Tensor value;
};

/// Reverse-mode computation record. Nodes are appended in topological order
/// and evaluated eagerly on creation; forward() re-evaluates the whole
/// record in that same order (used after rebinding leaves). Reductions run
/// in a fixed left-to-right order so replays are bitwise stable.
class Graph {
 public:
  explicit Graph(bool check_finite = true) : check_finite_(check_finite) {}

  // -- leaves ---------------------------------------------------------
  NodeId input(const std::string& name, Tensor value);
  NodeId param(const std::string& name, Tensor value);
  NodeId constant(Tensor value);
  NodeId constant_scalar(double value);

  void bind(NodeId leaf, Tensor value);
  void bind(const std::string& name, Tensor value);
  bool has_leaf(const std::string& name) const;
  NodeId leaf_id(const std::string& name) const;

  // -- ops ------------------------------------------------------------
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId x, double c);
  NodeId add_rowvec(NodeId x, NodeId v);
  NodeId mul_rowvec(NodeId x, NodeId v);
  NodeId scale_rows(NodeId x, NodeId v);
  NodeId matmul(NodeId a, NodeId b);
  NodeId matmul_nt(NodeId a, NodeId b);
  NodeId linear_nt(NodeId x, NodeId w, NodeId b);
  NodeId slice_cols(NodeId x, std::size_t c0, std::size_t c1);
  NodeId concat_cols(NodeId a, NodeId b);
  NodeId softmax_rows(NodeId x);
  NodeId log_softmax_rows(NodeId x);
  NodeId log(NodeId x);
  NodeId exp(NodeId x);
  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId swish(NodeId x);
  NodeId layer_norm_rows(NodeId x, double eps = 1e-5);
  NodeId layer_norm_affine(NodeId x, NodeId gamma, NodeId beta,
                           double eps = 1e-5);
  NodeId depthwise_conv1d(NodeId x, NodeId kernel);
  NodeId mean_all(NodeId x);
  NodeId sum_all(NodeId x);
  NodeId div_by_scalar(NodeId x, NodeId s);
  NodeId mul_by_scalar(NodeId x, NodeId s);
  NodeId clip(NodeId x, double lo, double hi);
  NodeId stop_gradient(NodeId x);
  NodeId embed_rows(NodeId table, const std::vector<std::int32_t>& indices);
  NodeId gather_cols(NodeId x, const std::vector<std::int32_t>& indices);
  NodeId ctc_loss_node(NodeId log_posteriors,
                       const std::vector<std::int32_t>& target);
  NodeId nll_rows(NodeId log_probs, const std::vector<std::int32_t>& targets);

  // -- execution ------------------------------------------------------
  void forward();
  GradMap gradients(NodeId loss);

  const Tensor& val(NodeId id) const;
  double scalar_val(NodeId id) const;
  // Accumulated gradient of a non-leaf node after gradients(); leaf
  // gradients are surrendered to the returned map. Zero for untouched nodes.
  const Tensor& grad(NodeId id) const;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_[id]; }
  const std::string& leaf_name(const Node& n) const { return names_[n.name_id]; }

 private:
  NodeId push(Node n);
  void eval_node(Node& n);
  void backward_node(NodeId id);
  Tensor& grad_buf(NodeId id);
  std::string describe(NodeId id) const;
  void check_same_shape(NodeId a, NodeId b, const char* what) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<std::string> names_;
  std::map<std::string, NodeId> by_name_;
  bool check_finite_ = true;
  Tensor zero_placeholder_;
};

/// Central-difference gradient oracle. `fn` maps a full set of named
/// parameter tensors to a scalar; every coordinate of every tensor in
/// `point` is perturbed by +-eps.
GradMap finite_diff(
    const std::function<double(const std::map<std::string, Tensor>&)>& fn,
    const std::map<std::string, Tensor>& point, double eps);

}  // namespace nestnet
