#include "nestnet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nestnet/error.hpp"

namespace nestnet {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Row-wise ops treat a rank-1 tensor as a single row.
std::pair<std::size_t, std::size_t> row_shape(const Tensor& t) {
  if (t.rank() == 1) return {1, t.numel()};
  return {t.rows(), t.cols()};
}

// Extended CTC label sequence with blanks: [0, y1, 0, y2, ..., yL, 0].
std::vector<std::int32_t> ctc_extended(const std::vector<std::int32_t>& y) {
  std::vector<std::int32_t> ext(2 * y.size() + 1, 0);
  for (std::size_t i = 0; i < y.size(); ++i) ext[2 * i + 1] = y[i];
  return ext;
}

// Forward (alpha) lattice in log space; alpha[t*S + s] includes the
// emission at frame t.
std::vector<double> ctc_alpha(const Tensor& lp,
                              const std::vector<std::int32_t>& ext) {
  const std::size_t frames = lp.rows();
  const std::size_t states = ext.size();
  std::vector<double> alpha(frames * states, kNegInf);
  alpha[0] = lp.at(0, ext[0]);
  if (states > 1) alpha[1] = lp.at(0, ext[1]);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < states; ++s) {
      double a = alpha[(t - 1) * states + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * states + s - 1]);
      if (s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2]) {
        a = log_add(a, alpha[(t - 1) * states + s - 2]);
      }
      alpha[t * states + s] = a + lp.at(t, ext[s]);
    }
  }
  return alpha;
}

// Backward (beta) lattice, excluding the emission at frame t so that
// alpha + beta is the log-probability of all paths through (t, s).
std::vector<double> ctc_beta(const Tensor& lp,
                             const std::vector<std::int32_t>& ext) {
  const std::size_t frames = lp.rows();
  const std::size_t states = ext.size();
  std::vector<double> beta(frames * states, kNegInf);
  beta[(frames - 1) * states + states - 1] = 0.0;
  if (states > 1) beta[(frames - 1) * states + states - 2] = 0.0;
  for (std::size_t t = frames - 1; t-- > 0;) {
    for (std::size_t s = 0; s < states; ++s) {
      double b = beta[(t + 1) * states + s] + lp.at(t + 1, ext[s]);
      if (s + 1 < states) {
        b = log_add(b, beta[(t + 1) * states + s + 1] + lp.at(t + 1, ext[s + 1]));
      }
      if (s + 2 < states && ext[s + 2] != 0 && ext[s + 2] != ext[s]) {
        b = log_add(b, beta[(t + 1) * states + s + 2] + lp.at(t + 1, ext[s + 2]));
      }
      beta[t * states + s] = b;
    }
  }
  return beta;
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_rowvec: return "add_rowvec";
    case OpKind::mul_rowvec: return "mul_rowvec";
    case OpKind::scale_rows: return "scale_rows";
    case OpKind::matmul: return "matmul";
    case OpKind::matmul_nt: return "matmul_nt";
    case OpKind::linear_nt: return "linear_nt";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::log_softmax_rows: return "log_softmax_rows";
    case OpKind::log_op: return "log";
    case OpKind::exp_op: return "exp";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::swish: return "swish";
    case OpKind::layer_norm_rows: return "layer_norm_rows";
    case OpKind::layer_norm_affine: return "layer_norm_affine";
    case OpKind::depthwise_conv1d: return "depthwise_conv1d";
    case OpKind::mean_all: return "mean_all";
    case OpKind::sum_all: return "sum_all";
    case OpKind::div_scalar_node: return "div_by_scalar";
    case OpKind::mul_scalar_node: return "mul_by_scalar";
    case OpKind::clip: return "clip";
    case OpKind::stop_gradient: return "stop_gradient";
    case OpKind::embed_rows: return "embed_rows";
    case OpKind::gather_cols: return "gather_cols";
    case OpKind::ctc: return "ctc";
    case OpKind::nll_rows: return "nll_rows";
  }
  return "?";
}

std::string Graph::describe(NodeId id) const {
  const Node& n = nodes_[id];
  std::string s = "node#" + std::to_string(id) + " (" + op_name(n.kind);
  if (n.name_id >= 0) s += " '" + names_[n.name_id] + "'";
  s += " " + n.value.shape_str() + ")";
  return s;
}

void Graph::check_same_shape(NodeId a, NodeId b, const char* what) const {
  if (!nodes_[a].value.same_shape(nodes_[b].value)) {
    fail(ErrorKind::shape, std::string(what) + ": shape mismatch between " +
                               describe(a) + " and " + describe(b));
  }
}

NodeId Graph::push(Node n) {
  if (nodes_.size() >= kNoNode) fail(ErrorKind::runtime, "graph too large");
  const NodeId id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(n));
  Node& node = nodes_.back();
  if (node.kind != OpKind::leaf && node.kind != OpKind::constant) {
    node.requires_grad =
        node.kind != OpKind::stop_gradient &&
        ((node.in0 != kNoNode && nodes_[node.in0].requires_grad) ||
         (node.in1 != kNoNode && nodes_[node.in1].requires_grad) ||
         (node.in2 != kNoNode && nodes_[node.in2].requires_grad));
    eval_node(node);
    if (check_finite_ && !node.value.all_finite()) {
      fail(ErrorKind::overflow, "non-finite intermediate at " + describe(id));
    }
  }
  return id;
}

NodeId Graph::input(const std::string& name, Tensor value) {
  if (by_name_.count(name)) fail(ErrorKind::config, "duplicate leaf " + name);
  Node n;
  n.kind = OpKind::leaf;
  n.value = std::move(value);
  n.name_id = static_cast<std::int32_t>(names_.size());
  names_.push_back(name);
  const NodeId id = push(std::move(n));
  by_name_[name] = id;
  return id;
}

NodeId Graph::param(const std::string& name, Tensor value) {
  const NodeId id = input(name, std::move(value));
  nodes_[id].trainable = true;
  nodes_[id].requires_grad = true;
  return id;
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.kind = OpKind::constant;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::constant_scalar(double value) {
  return constant(Tensor::scalar(value));
}

void Graph::bind(NodeId leaf, Tensor value) {
  Node& n = nodes_[leaf];
  if (n.kind != OpKind::leaf) fail(ErrorKind::config, "bind on non-leaf");
  if (!n.value.same_shape(value)) {
    fail(ErrorKind::shape, "bind shape " + value.shape_str() +
                               " does not match " + describe(leaf));
  }
  n.value = std::move(value);
}

void Graph::bind(const std::string& name, Tensor value) {
  bind(leaf_id(name), std::move(value));
}

bool Graph::has_leaf(const std::string& name) const {
  return by_name_.count(name) != 0;
}

NodeId Graph::leaf_id(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) fail(ErrorKind::config, "no leaf named " + name);
  return it->second;
}

// ---------------------------------------------------------------------
// op builders

NodeId Graph::add(NodeId a, NodeId b) {
  check_same_shape(a, b, "add");
  Node n;
  n.kind = OpKind::add;
  n.in0 = a;
  n.in1 = b;
  return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  check_same_shape(a, b, "sub");
  Node n;
  n.kind = OpKind::sub;
  n.in0 = a;
  n.in1 = b;
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  check_same_shape(a, b, "mul");
  Node n;
  n.kind = OpKind::mul;
  n.in0 = a;
  n.in1 = b;
  return push(std::move(n));
}

NodeId Graph::scale(NodeId x, double c) {
  Node n;
  n.kind = OpKind::scale;
  n.in0 = x;
  n.attr_a = c;
  return push(std::move(n));
}

NodeId Graph::add_rowvec(NodeId x, NodeId v) {
  if (nodes_[v].value.numel() != nodes_[x].value.cols()) {
    fail(ErrorKind::shape, "add_rowvec: vector " + describe(v) +
                               " does not span columns of " + describe(x));
  }
  Node n;
  n.kind = OpKind::add_rowvec;
  n.in0 = x;
  n.in1 = v;
  return push(std::move(n));
}

NodeId Graph::mul_rowvec(NodeId x, NodeId v) {
  if (nodes_[v].value.numel() != nodes_[x].value.cols()) {
    fail(ErrorKind::shape, "mul_rowvec: vector " + describe(v) +
                               " does not span columns of " + describe(x));
  }
  Node n;
  n.kind = OpKind::mul_rowvec;
  n.in0 = x;
  n.in1 = v;
  return push(std::move(n));
}

NodeId Graph::scale_rows(NodeId x, NodeId v) {
  if (nodes_[v].value.numel() != nodes_[x].value.rows()) {
    fail(ErrorKind::shape, "scale_rows: vector " + describe(v) +
                               " does not span rows of " + describe(x));
  }
  Node n;
  n.kind = OpKind::scale_rows;
  n.in0 = x;
  n.in1 = v;
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  if (nodes_[a].value.cols() != nodes_[b].value.rows()) {
    fail(ErrorKind::shape,
         "matmul: inner dimensions of " + describe(a) + " and " + describe(b));
  }
  Node n;
  n.kind = OpKind::matmul;
  n.in0 = a;
  n.in1 = b;
  return push(std::move(n));
}

NodeId Graph::matmul_nt(NodeId a, NodeId b) {
  if (nodes_[a].value.cols() != nodes_[b].value.cols()) {
    fail(ErrorKind::shape, "matmul_nt: inner dimensions of " + describe(a) +
                               " and " + describe(b));
  }
  Node n;
  n.kind = OpKind::matmul_nt;
  n.in0 = a;
  n.in1 = b;
  return push(std::move(n));
}

NodeId Graph::linear_nt(NodeId x, NodeId w, NodeId b) {
  if (nodes_[x].value.cols() != nodes_[w].value.cols()) {
    fail(ErrorKind::shape, "linear_nt: inner dimensions of " + describe(x) +
                               " and " + describe(w));
  }
  if (nodes_[b].value.numel() != nodes_[w].value.rows()) {
    fail(ErrorKind::shape, "linear_nt: bias " + describe(b) +
                               " does not match " + describe(w));
  }
  Node n;
  n.kind = OpKind::linear_nt;
  n.in0 = x;
  n.in1 = w;
  n.in2 = b;
  return push(std::move(n));
}

NodeId Graph::slice_cols(NodeId x, std::size_t c0, std::size_t c1) {
  if (c0 >= c1 || c1 > nodes_[x].value.cols()) {
    fail(ErrorKind::shape, "slice_cols: bad range on " + describe(x));
  }
  Node n;
  n.kind = OpKind::slice_cols;
  n.in0 = x;
  n.attr_a = static_cast<double>(c0);
  n.attr_b = static_cast<double>(c1);
  return push(std::move(n));
}

NodeId Graph::concat_cols(NodeId a, NodeId b) {
  if (nodes_[a].value.rows() != nodes_[b].value.rows()) {
    fail(ErrorKind::shape,
         "concat_cols: row mismatch between " + describe(a) + " and " + describe(b));
  }
  Node n;
  n.kind = OpKind::concat_cols;
  n.in0 = a;
  n.in1 = b;
  return push(std::move(n));
}

NodeId Graph::softmax_rows(NodeId x) {
  Node n;
  n.kind = OpKind::softmax_rows;
  n.in0 = x;
  return push(std::move(n));
}

NodeId Graph::log_softmax_rows(NodeId x) {
  Node n;
  n.kind = OpKind::log_softmax_rows;
  n.in0 = x;
  return push(std::move(n));
}

NodeId Graph::log(NodeId x) {
  Node n;
  n.kind = OpKind::log_op;
  n.in0 = x;
  return push(std::move(n));
}

NodeId Graph::exp(NodeId x) {
  Node n;
  n.kind = OpKind::exp_op;
  n.in0 = x;
  return push(std::move(n));
}

NodeId Graph::relu(NodeId x) {
  Node n;
  n.kind = OpKind::relu;
  n.in0 = x;
  return push(std::move(n));
}

NodeId Graph::sigmoid(NodeId x) {
  Node n;
  n.kind = OpKind::sigmoid;
  n.in0 = x;
  return push(std::move(n));
}

NodeId Graph::swish(NodeId x) {
  Node n;
  n.kind = OpKind::swish;
  n.in0 = x;
  return push(std::move(n));
}

NodeId Graph::layer_norm_rows(NodeId x, double eps) {
  Node n;
  n.kind = OpKind::layer_norm_rows;
  n.in0 = x;
  n.attr_a = eps;
  return push(std::move(n));
}

NodeId Graph::layer_norm_affine(NodeId x, NodeId gamma, NodeId beta,
                                double eps) {
  if (nodes_[gamma].value.numel() != nodes_[x].value.cols() ||
      nodes_[beta].value.numel() != nodes_[x].value.cols()) {
    fail(ErrorKind::shape, "layer_norm_affine: affine vectors do not span "
                           "columns of " + describe(x));
  }
  Node n;
  n.kind = OpKind::layer_norm_affine;
  n.in0 = x;
  n.in1 = gamma;
  n.in2 = beta;
  n.attr_a = eps;
  return push(std::move(n));
}

NodeId Graph::depthwise_conv1d(NodeId x, NodeId kernel) {
  const Tensor& k = nodes_[kernel].value;
  if (k.rows() % 2 == 0) {
    fail(ErrorKind::shape, "depthwise_conv1d: kernel length must be odd");
  }
  if (k.cols() != nodes_[x].value.cols()) {
    fail(ErrorKind::shape, "depthwise_conv1d: channel mismatch between " +
                               describe(x) + " and " + describe(kernel));
  }
  Node n;
  n.kind = OpKind::depthwise_conv1d;
  n.in0 = x;
  n.in1 = kernel;
  return push(std::move(n));
}

NodeId Graph::mean_all(NodeId x) {
  Node n;
  n.kind = OpKind::mean_all;
  n.in0 = x;
  return push(std::move(n));
}

NodeId Graph::sum_all(NodeId x) {
  Node n;
  n.kind = OpKind::sum_all;
  n.in0 = x;
  return push(std::move(n));
}

NodeId Graph::div_by_scalar(NodeId x, NodeId s) {
  if (nodes_[s].value.numel() != 1) {
    fail(ErrorKind::shape, "div_by_scalar: " + describe(s) + " is not scalar");
  }
  Node n;
  n.kind = OpKind::div_scalar_node;
  n.in0 = x;
  n.in1 = s;
  return push(std::move(n));
}

NodeId Graph::mul_by_scalar(NodeId x, NodeId s) {
  if (nodes_[s].value.numel() != 1) {
    fail(ErrorKind::shape, "mul_by_scalar: " + describe(s) + " is not scalar");
  }
  Node n;
  n.kind = OpKind::mul_scalar_node;
  n.in0 = x;
  n.in1 = s;
  return push(std::move(n));
}

NodeId Graph::clip(NodeId x, double lo, double hi) {
  Node n;
  n.kind = OpKind::clip;
  n.in0 = x;
  n.attr_a = lo;
  n.attr_b = hi;
  return push(std::move(n));
}

NodeId Graph::stop_gradient(NodeId x) {
  Node n;
  n.kind = OpKind::stop_gradient;
  n.in0 = x;
  return push(std::move(n));
}

NodeId Graph::embed_rows(NodeId table, const std::vector<std::int32_t>& indices) {
  if (indices.empty()) fail(ErrorKind::config, "embed_rows: empty index list");
  const Tensor& t = nodes_[table].value;
  for (std::int32_t i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= t.rows()) {
      fail(ErrorKind::config, "embed_rows: index " + std::to_string(i) +
                                  " out of range for " + describe(table));
    }
  }
  Node n;
  n.kind = OpKind::embed_rows;
  n.in0 = table;
  n.idx = indices;
  return push(std::move(n));
}

NodeId Graph::gather_cols(NodeId x, const std::vector<std::int32_t>& indices) {
  if (indices.empty()) fail(ErrorKind::config, "gather_cols: empty index list");
  const Tensor& t = nodes_[x].value;
  for (std::int32_t i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= t.cols()) {
      fail(ErrorKind::config, "gather_cols: index " + std::to_string(i) +
                                  " out of range for " + describe(x));
    }
  }
  Node n;
  n.kind = OpKind::gather_cols;
  n.in0 = x;
  n.idx = indices;
  return push(std::move(n));
}

NodeId Graph::ctc_loss_node(NodeId log_posteriors,
                            const std::vector<std::int32_t>& target) {
  const Tensor& lp = nodes_[log_posteriors].value;
  const std::size_t frames = lp.rows();
  const std::size_t vocab = lp.cols();
  if (frames < 1) fail(ErrorKind::config, "ctc: empty input");
  std::size_t min_frames = target.size();
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] <= 0 || static_cast<std::size_t>(target[i]) >= vocab) {
      fail(ErrorKind::config,
           "ctc: unknown token " + std::to_string(target[i]));
    }
    if (i > 0 && target[i] == target[i - 1]) ++min_frames;
  }
  if (min_frames > frames) {
    fail(ErrorKind::config, "ctc: target needs " + std::to_string(min_frames) +
                                " frames but input has " +
                                std::to_string(frames));
  }
  Node n;
  n.kind = OpKind::ctc;
  n.in0 = log_posteriors;
  n.idx = target;
  return push(std::move(n));
}

NodeId Graph::nll_rows(NodeId log_probs,
                       const std::vector<std::int32_t>& targets) {
  const Tensor& lp = nodes_[log_probs].value;
  if (targets.size() != lp.rows()) {
    fail(ErrorKind::shape, "nll_rows: " + std::to_string(targets.size()) +
                               " targets for " + describe(log_probs));
  }
  for (std::int32_t t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= lp.cols()) {
      fail(ErrorKind::config, "nll_rows: target " + std::to_string(t) +
                                  " out of range");
    }
  }
  Node n;
  n.kind = OpKind::nll_rows;
  n.in0 = log_probs;
  n.idx = targets;
  return push(std::move(n));
}

// ---------------------------------------------------------------------
// evaluation

void Graph::eval_node(Node& n) {
  const Tensor& a = n.in0 != kNoNode ? nodes_[n.in0].value : zero_placeholder_;
  const Tensor& b = n.in1 != kNoNode ? nodes_[n.in1].value : zero_placeholder_;
  switch (n.kind) {
    case OpKind::leaf:
    case OpKind::constant:
      break;
    case OpKind::add: {
      n.value = a;
      double* o = n.value.data();
      const double* q = b.data();
      for (std::size_t i = 0; i < n.value.numel(); ++i) o[i] += q[i];
      break;
    }
    case OpKind::sub: {
      n.value = a;
      double* o = n.value.data();
      const double* q = b.data();
      for (std::size_t i = 0; i < n.value.numel(); ++i) o[i] -= q[i];
      break;
    }
    case OpKind::mul: {
      n.value = a;
      double* o = n.value.data();
      const double* q = b.data();
      for (std::size_t i = 0; i < n.value.numel(); ++i) o[i] *= q[i];
      break;
    }
    case OpKind::scale: {
      n.value = a;
      for (double& v : n.value.values()) v *= n.attr_a;
      break;
    }
    case OpKind::add_rowvec: {
      n.value = a;
      const std::size_t r = a.rows(), c = a.cols();
      double* o = n.value.data();
      const double* q = b.data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) o[i * c + j] += q[j];
      break;
    }
    case OpKind::mul_rowvec: {
      n.value = a;
      const std::size_t r = a.rows(), c = a.cols();
      double* o = n.value.data();
      const double* q = b.data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) o[i * c + j] *= q[j];
      break;
    }
    case OpKind::scale_rows: {
      n.value = a;
      const std::size_t r = a.rows(), c = a.cols();
      double* o = n.value.data();
      const double* q = b.data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) o[i * c + j] *= q[i];
      break;
    }
    case OpKind::matmul: {
      const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
      n.value = Tensor::zeros({r, c});
      double* o = n.value.data();
      const double* p = a.data();
      const double* q = b.data();
      // Accumulation runs in ascending k for every output element.
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double av = p[i * k + kk];
          const double* brow = q + kk * c;
          double* orow = o + i * c;
          for (std::size_t j = 0; j < c; ++j) orow[j] += av * brow[j];
        }
      }
      break;
    }
    case OpKind::matmul_nt: {
      const std::size_t r = a.rows(), k = a.cols(), c = b.rows();
      n.value = Tensor::zeros({r, c});
      double* o = n.value.data();
      const double* p = a.data();
      const double* q = b.data();
      for (std::size_t i = 0; i < r; ++i) {
        const double* arow = p + i * k;
        for (std::size_t j = 0; j < c; ++j) {
          const double* brow = q + j * k;
          double acc = 0.0;
          for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
          o[i * c + j] = acc;
        }
      }
      break;
    }
    case OpKind::linear_nt: {
      const Tensor& bias = nodes_[n.in2].value;
      const std::size_t r = a.rows(), k = a.cols(), c = b.rows();
      n.value = Tensor::zeros({r, c});
      double* o = n.value.data();
      const double* p = a.data();
      const double* q = b.data();
      const double* bv = bias.data();
      for (std::size_t i = 0; i < r; ++i) {
        const double* arow = p + i * k;
        for (std::size_t j = 0; j < c; ++j) {
          const double* brow = q + j * k;
          double acc = bv[j];
          for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
          o[i * c + j] = acc;
        }
      }
      break;
    }
    case OpKind::slice_cols: {
      const std::size_t c0 = static_cast<std::size_t>(n.attr_a);
      const std::size_t c1 = static_cast<std::size_t>(n.attr_b);
      const std::size_t r = a.rows(), c = a.cols();
      n.value = Tensor::zeros({r, c1 - c0});
      double* o = n.value.data();
      const double* p = a.data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = c0; j < c1; ++j) *o++ = p[i * c + j];
      break;
    }
    case OpKind::concat_cols: {
      const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
      n.value = Tensor::zeros({r, ca + cb});
      double* o = n.value.data();
      const double* p = a.data();
      const double* q = b.data();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < ca; ++j) o[i * (ca + cb) + j] = p[i * ca + j];
        for (std::size_t j = 0; j < cb; ++j)
          o[i * (ca + cb) + ca + j] = q[i * cb + j];
      }
      break;
    }
    case OpKind::softmax_rows: {
      n.value = a;
      const auto [r, c] = row_shape(a);
      double* o = n.value.data();
      for (std::size_t i = 0; i < r; ++i) {
        double* row = o + i * c;
        double m = row[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          row[j] = std::exp(row[j] - m);
          z += row[j];
        }
        for (std::size_t j = 0; j < c; ++j) row[j] /= z;
      }
      break;
    }
    case OpKind::log_softmax_rows: {
      n.value = a;
      const auto [r, c] = row_shape(a);
      double* o = n.value.data();
      for (std::size_t i = 0; i < r; ++i) {
        double* row = o + i * c;
        double m = row[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
        const double lse = m + std::log(z);
        for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
      }
      break;
    }
    case OpKind::log_op: {
      n.value = a;
      for (double& v : n.value.values()) v = std::log(v);
      break;
    }
    case OpKind::exp_op: {
      n.value = a;
      for (double& v : n.value.values()) v = std::exp(v);
      break;
    }
    case OpKind::relu: {
      n.value = a;
      for (double& v : n.value.values()) v = v > 0.0 ? v : 0.0;
      break;
    }
    case OpKind::sigmoid: {
      n.value = a;
      for (double& v : n.value.values()) v = 1.0 / (1.0 + std::exp(-v));
      break;
    }
    case OpKind::swish: {
      n.value = a;
      for (double& v : n.value.values()) v = v / (1.0 + std::exp(-v));
      break;
    }
    case OpKind::layer_norm_rows: {
      n.value = a;
      const auto [r, c] = row_shape(a);
      double* o = n.value.data();
      for (std::size_t i = 0; i < r; ++i) {
        double* row = o + i * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = row[j] - mean;
          var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + n.attr_a);
        for (std::size_t j = 0; j < c; ++j) row[j] = (row[j] - mean) * inv;
      }
      break;
    }
    case OpKind::layer_norm_affine: {
      const Tensor& beta = nodes_[n.in2].value;
      n.value = a;
      const auto [r, c] = row_shape(a);
      double* o = n.value.data();
      const double* gam = b.data();
      const double* bet = beta.data();
      for (std::size_t i = 0; i < r; ++i) {
        double* row = o + i * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = row[j] - mean;
          var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + n.attr_a);
        for (std::size_t j = 0; j < c; ++j) {
          row[j] = (row[j] - mean) * inv * gam[j] + bet[j];
        }
      }
      break;
    }
    case OpKind::depthwise_conv1d: {
      const std::size_t frames = a.rows(), ch = a.cols(), klen = b.rows();
      const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(klen - 1) / 2;
      n.value = Tensor::zeros({frames, ch});
      double* o = n.value.data();
      const double* p = a.data();
      const double* q = b.data();
      for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t j = 0; j < klen; ++j) {
          const std::ptrdiff_t src =
              static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(j) - off;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(frames)) continue;
          const double* xrow = p + src * ch;
          const double* krow = q + j * ch;
          double* orow = o + t * ch;
          for (std::size_t cch = 0; cch < ch; ++cch)
            orow[cch] += xrow[cch] * krow[cch];
        }
      }
      break;
    }
    case OpKind::mean_all: {
      double s = 0.0;
      for (double v : a.values()) s += v;
      n.value = Tensor::scalar(s / static_cast<double>(a.numel()));
      break;
    }
    case OpKind::sum_all: {
      double s = 0.0;
      for (double v : a.values()) s += v;
      n.value = Tensor::scalar(s);
      break;
    }
    case OpKind::div_scalar_node: {
      n.value = a;
      const double s = b[0];
      for (double& v : n.value.values()) v /= s;
      break;
    }
    case OpKind::mul_scalar_node: {
      n.value = a;
      const double s = b[0];
      for (double& v : n.value.values()) v *= s;
      break;
    }
    case OpKind::clip: {
      n.value = a;
      for (double& v : n.value.values())
        v = std::min(std::max(v, n.attr_a), n.attr_b);
      break;
    }
    case OpKind::stop_gradient: {
      n.value = a;
      break;
    }
    case OpKind::embed_rows: {
      const std::size_t c = a.cols();
      n.value = Tensor::zeros({n.idx.size(), c});
      double* o = n.value.data();
      const double* p = a.data();
      for (std::size_t i = 0; i < n.idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j)
          o[i * c + j] = p[static_cast<std::size_t>(n.idx[i]) * c + j];
      break;
    }
    case OpKind::gather_cols: {
      const std::size_t r = a.rows(), c = a.cols();
      n.value = Tensor::zeros({r, n.idx.size()});
      double* o = n.value.data();
      const double* p = a.data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n.idx.size(); ++j)
          o[i * n.idx.size() + j] = p[i * c + static_cast<std::size_t>(n.idx[j])];
      break;
    }
    case OpKind::ctc: {
      const std::vector<std::int32_t> ext = ctc_extended(n.idx);
      const std::vector<double> alpha = ctc_alpha(a, ext);
      const std::size_t states = ext.size();
      const std::size_t frames = a.rows();
      double logp = alpha[(frames - 1) * states + states - 1];
      if (states > 1)
        logp = log_add(logp, alpha[(frames - 1) * states + states - 2]);
      n.value = Tensor::scalar(-logp);
      break;
    }
    case OpKind::nll_rows: {
      const std::size_t c = a.cols();
      double s = 0.0;
      for (std::size_t i = 0; i < n.idx.size(); ++i)
        s -= a.data()[i * c + static_cast<std::size_t>(n.idx[i])];
      n.value = Tensor::scalar(s / static_cast<double>(n.idx.size()));
      break;
    }
  }
}

void Graph::forward() {
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (n.kind == OpKind::leaf || n.kind == OpKind::constant) continue;
    eval_node(n);
    if (check_finite_ && !n.value.all_finite()) {
      fail(ErrorKind::overflow, "non-finite intermediate at " + describe(id));
    }
  }
}

Tensor& Graph::grad_buf(NodeId id) {
  Tensor& g = grads_[id];
  if (g.empty()) g = Tensor::zeros(nodes_[id].value.shape());
  return g;
}

const Tensor& Graph::grad(NodeId id) const {
  if (id < grads_.size() && !grads_[id].empty()) return grads_[id];
  return zero_placeholder_;
}

const Tensor& Graph::val(NodeId id) const { return nodes_[id].value; }

double Graph::scalar_val(NodeId id) const {
  const Tensor& t = nodes_[id].value;
  if (t.numel() != 1) fail(ErrorKind::shape, "scalar_val on " + describe(id));
  return t[0];
}

void Graph::backward_node(NodeId id) {
  Node& n = nodes_[id];
  const Tensor& g = grads_[id];
  const Tensor& a = n.in0 != kNoNode ? nodes_[n.in0].value : zero_placeholder_;
  const Tensor& b = n.in1 != kNoNode ? nodes_[n.in1].value : zero_placeholder_;
  const bool need0 = n.in0 != kNoNode && nodes_[n.in0].requires_grad;
  const bool need1 = n.in1 != kNoNode && nodes_[n.in1].requires_grad;
  const bool need2 = n.in2 != kNoNode && nodes_[n.in2].requires_grad;
  switch (n.kind) {
    case OpKind::leaf:
    case OpKind::constant:
    case OpKind::stop_gradient:
      break;
    case OpKind::add: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] += g[i];
      }
      if (need1) {
        double* o = grad_buf(n.in1).data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] += g[i];
      }
      break;
    }
    case OpKind::sub: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] += g[i];
      }
      if (need1) {
        double* o = grad_buf(n.in1).data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] -= g[i];
      }
      break;
    }
    case OpKind::mul: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] += g[i] * b[i];
      }
      if (need1) {
        double* o = grad_buf(n.in1).data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] += g[i] * a[i];
      }
      break;
    }
    case OpKind::scale: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] += g[i] * n.attr_a;
      }
      break;
    }
    case OpKind::add_rowvec: {
      const std::size_t r = a.rows(), c = a.cols();
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] += g[i];
      }
      if (need1) {
        double* o = grad_buf(n.in1).data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) o[j] += g[i * c + j];
      }
      break;
    }
    case OpKind::mul_rowvec: {
      const std::size_t r = a.rows(), c = a.cols();
      if (need0) {
        double* o = grad_buf(n.in0).data();
        const double* q = b.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) o[i * c + j] += g[i * c + j] * q[j];
      }
      if (need1) {
        double* o = grad_buf(n.in1).data();
        const double* p = a.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) o[j] += g[i * c + j] * p[i * c + j];
      }
      break;
    }
    case OpKind::scale_rows: {
      const std::size_t r = a.rows(), c = a.cols();
      if (need0) {
        double* o = grad_buf(n.in0).data();
        const double* q = b.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) o[i * c + j] += g[i * c + j] * q[i];
      }
      if (need1) {
        double* o = grad_buf(n.in1).data();
        const double* p = a.data();
        for (std::size_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * p[i * c + j];
          o[i] += acc;
        }
      }
      break;
    }
    case OpKind::matmul: {
      const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
      if (need0) {
        // dA = dY * B^T
        double* o = grad_buf(n.in0).data();
        const double* q = b.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* grow = g.data() + i * c;
            const double* brow = q + kk * c;
            for (std::size_t j = 0; j < c; ++j) acc += grow[j] * brow[j];
            o[i * k + kk] += acc;
          }
      }
      if (need1) {
        // dB = A^T * dY, accumulated row by row of dY
        double* o = grad_buf(n.in1).data();
        const double* p = a.data();
        for (std::size_t i = 0; i < r; ++i) {
          const double* grow = g.data() + i * c;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = p[i * k + kk];
            double* orow = o + kk * c;
            for (std::size_t j = 0; j < c; ++j) orow[j] += av * grow[j];
          }
        }
      }
      break;
    }
    case OpKind::matmul_nt: {
      // y = A * B^T, y is [r, c] with c = rows(B)
      const std::size_t r = a.rows(), k = a.cols(), c = b.rows();
      if (need0) {
        // dA = dY * B
        double* o = grad_buf(n.in0).data();
        const double* q = b.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double gv = g[i * c + j];
            const double* brow = q + j * k;
            double* orow = o + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) orow[kk] += gv * brow[kk];
          }
      }
      if (need1) {
        // dB = dY^T * A
        double* o = grad_buf(n.in1).data();
        const double* p = a.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double gv = g[i * c + j];
            const double* arow = p + i * k;
            double* orow = o + j * k;
            for (std::size_t kk = 0; kk < k; ++kk) orow[kk] += gv * arow[kk];
          }
      }
      break;
    }
    case OpKind::linear_nt: {
      const std::size_t r = a.rows(), k = a.cols(), c = b.rows();
      if (need0) {
        double* o = grad_buf(n.in0).data();
        const double* q = b.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double gv = g[i * c + j];
            const double* brow = q + j * k;
            double* orow = o + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) orow[kk] += gv * brow[kk];
          }
      }
      if (need1) {
        double* o = grad_buf(n.in1).data();
        const double* p = a.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double gv = g[i * c + j];
            const double* arow = p + i * k;
            double* orow = o + j * k;
            for (std::size_t kk = 0; kk < k; ++kk) orow[kk] += gv * arow[kk];
          }
      }
      if (need2) {
        double* o = grad_buf(n.in2).data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) o[j] += g[i * c + j];
      }
      break;
    }
    case OpKind::slice_cols: {
      if (need0) {
        const std::size_t c0 = static_cast<std::size_t>(n.attr_a);
        const std::size_t c1 = static_cast<std::size_t>(n.attr_b);
        const std::size_t r = a.rows(), c = a.cols();
        double* o = grad_buf(n.in0).data();
        const double* gq = g.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = c0; j < c1; ++j) o[i * c + j] += *gq++;
      }
      break;
    }
    case OpKind::concat_cols: {
      const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < ca; ++j)
            o[i * ca + j] += g[i * (ca + cb) + j];
      }
      if (need1) {
        double* o = grad_buf(n.in1).data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < cb; ++j)
            o[i * cb + j] += g[i * (ca + cb) + ca + j];
      }
      break;
    }
    case OpKind::softmax_rows: {
      if (need0) {
        const auto [r, c] = row_shape(n.value);
        double* o = grad_buf(n.in0).data();
        const double* y = n.value.data();
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            o[i * c + j] += (g[i * c + j] - dot) * y[i * c + j];
        }
      }
      break;
    }
    case OpKind::log_softmax_rows: {
      if (need0) {
        const auto [r, c] = row_shape(n.value);
        double* o = grad_buf(n.in0).data();
        const double* y = n.value.data();
        for (std::size_t i = 0; i < r; ++i) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            o[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gsum;
        }
      }
      break;
    }
    case OpKind::log_op: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] += g[i] / a[i];
      }
      break;
    }
    case OpKind::exp_op: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        const double* y = n.value.data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] += g[i] * y[i];
      }
      break;
    }
    case OpKind::relu: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < g.numel(); ++i)
          o[i] += a[i] > 0.0 ? g[i] : 0.0;
      }
      break;
    }
    case OpKind::sigmoid: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        const double* y = n.value.data();
        for (std::size_t i = 0; i < g.numel(); ++i)
          o[i] += g[i] * y[i] * (1.0 - y[i]);
      }
      break;
    }
    case OpKind::swish: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const double s = 1.0 / (1.0 + std::exp(-a[i]));
          o[i] += g[i] * (s + a[i] * s * (1.0 - s));
        }
      }
      break;
    }
    case OpKind::layer_norm_rows: {
      if (need0) {
        const auto [r, c] = row_shape(a);
        double* o = grad_buf(n.in0).data();
        const double* y = n.value.data();
        const double cn = static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i) {
          // Recover 1/sqrt(var+eps) from the input row.
          double mean = 0.0;
          for (std::size_t j = 0; j < c; ++j) mean += a[i * c + j];
          mean /= cn;
          double var = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double d = a[i * c + j] - mean;
            var += d * d;
          }
          var /= cn;
          const double inv = 1.0 / std::sqrt(var + n.attr_a);
          double gmean = 0.0, gydot = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            gmean += g[i * c + j];
            gydot += g[i * c + j] * y[i * c + j];
          }
          gmean /= cn;
          gydot /= cn;
          for (std::size_t j = 0; j < c; ++j)
            o[i * c + j] += inv * (g[i * c + j] - gmean - y[i * c + j] * gydot);
        }
      }
      break;
    }
    case OpKind::layer_norm_affine: {
      const auto [r, c] = row_shape(a);
      const double cn = static_cast<double>(c);
      const double* gam = b.data();
      double* ox = need0 ? grad_buf(n.in0).data() : nullptr;
      double* og = need1 ? grad_buf(n.in1).data() : nullptr;
      double* ob = need2 ? grad_buf(n.in2).data() : nullptr;
      std::vector<double> xhat(c);
      for (std::size_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += a[i * c + j];
        mean /= cn;
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = a[i * c + j] - mean;
          var += d * d;
        }
        var /= cn;
        const double inv = 1.0 / std::sqrt(var + n.attr_a);
        for (std::size_t j = 0; j < c; ++j) xhat[j] = (a[i * c + j] - mean) * inv;
        if (og != nullptr) {
          for (std::size_t j = 0; j < c; ++j) og[j] += g[i * c + j] * xhat[j];
        }
        if (ob != nullptr) {
          for (std::size_t j = 0; j < c; ++j) ob[j] += g[i * c + j];
        }
        if (ox != nullptr) {
          // ghat is the gradient against the normalized row.
          double gmean = 0.0, gxdot = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double gh = g[i * c + j] * gam[j];
            gmean += gh;
            gxdot += gh * xhat[j];
          }
          gmean /= cn;
          gxdot /= cn;
          for (std::size_t j = 0; j < c; ++j) {
            const double gh = g[i * c + j] * gam[j];
            ox[i * c + j] += inv * (gh - gmean - xhat[j] * gxdot);
          }
        }
      }
      break;
    }
    case OpKind::depthwise_conv1d: {
      const std::size_t frames = a.rows(), ch = a.cols(), klen = b.rows();
      const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(klen - 1) / 2;
      if (need0) {
        double* o = grad_buf(n.in0).data();
        const double* q = b.data();
        for (std::size_t t = 0; t < frames; ++t)
          for (std::size_t j = 0; j < klen; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) +
                                       static_cast<std::ptrdiff_t>(j) - off;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(frames)) continue;
            for (std::size_t cch = 0; cch < ch; ++cch)
              o[src * ch + cch] += g[t * ch + cch] * q[j * ch + cch];
          }
      }
      if (need1) {
        double* o = grad_buf(n.in1).data();
        const double* p = a.data();
        for (std::size_t j = 0; j < klen; ++j)
          for (std::size_t t = 0; t < frames; ++t) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) +
                                       static_cast<std::ptrdiff_t>(j) - off;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(frames)) continue;
            for (std::size_t cch = 0; cch < ch; ++cch)
              o[j * ch + cch] += g[t * ch + cch] * p[src * ch + cch];
          }
      }
      break;
    }
    case OpKind::mean_all: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        const double gv = g[0] / static_cast<double>(a.numel());
        for (std::size_t i = 0; i < a.numel(); ++i) o[i] += gv;
      }
      break;
    }
    case OpKind::sum_all: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        const double gv = g[0];
        for (std::size_t i = 0; i < a.numel(); ++i) o[i] += gv;
      }
      break;
    }
    case OpKind::div_scalar_node: {
      const double s = b[0];
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] += g[i] / s;
      }
      if (need1) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.numel(); ++i)
          acc += g[i] * (-a[i] / (s * s));
        grad_buf(n.in1)[0] += acc;
      }
      break;
    }
    case OpKind::mul_scalar_node: {
      const double s = b[0];
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < g.numel(); ++i) o[i] += g[i] * s;
      }
      if (need1) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * a[i];
        grad_buf(n.in1)[0] += acc;
      }
      break;
    }
    case OpKind::clip: {
      if (need0) {
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < g.numel(); ++i)
          o[i] += (a[i] >= n.attr_a && a[i] <= n.attr_b) ? g[i] : 0.0;
      }
      break;
    }
    case OpKind::embed_rows: {
      if (need0) {
        const std::size_t c = a.cols();
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < n.idx.size(); ++i)
          for (std::size_t j = 0; j < c; ++j)
            o[static_cast<std::size_t>(n.idx[i]) * c + j] += g[i * c + j];
      }
      break;
    }
    case OpKind::gather_cols: {
      if (need0) {
        const std::size_t r = a.rows(), c = a.cols();
        double* o = grad_buf(n.in0).data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < n.idx.size(); ++j)
            o[i * c + static_cast<std::size_t>(n.idx[j])] +=
                g[i * n.idx.size() + j];
      }
      break;
    }
    case OpKind::ctc: {
      if (need0) {
        const std::vector<std::int32_t> ext = ctc_extended(n.idx);
        const std::vector<double> alpha = ctc_alpha(a, ext);
        const std::vector<double> beta = ctc_beta(a, ext);
        const std::size_t states = ext.size();
        const std::size_t frames = a.rows();
        const std::size_t vocab = a.cols();
        double logp = alpha[(frames - 1) * states + states - 1];
        if (states > 1)
          logp = log_add(logp, alpha[(frames - 1) * states + states - 2]);
        double* o = grad_buf(n.in0).data();
        const double gv = g[0];
        std::vector<double> occ(vocab);
        for (std::size_t t = 0; t < frames; ++t) {
          std::fill(occ.begin(), occ.end(), kNegInf);
          for (std::size_t s = 0; s < states; ++s) {
            const std::size_t v = static_cast<std::size_t>(ext[s]);
            occ[v] = log_add(occ[v], alpha[t * states + s] + beta[t * states + s]);
          }
          for (std::size_t v = 0; v < vocab; ++v) {
            if (occ[v] == kNegInf) continue;
            o[t * vocab + v] += gv * (-std::exp(occ[v] - logp));
          }
        }
      }
      break;
    }
    case OpKind::nll_rows: {
      if (need0) {
        const std::size_t c = a.cols();
        double* o = grad_buf(n.in0).data();
        const double gv = g[0] / static_cast<double>(n.idx.size());
        for (std::size_t i = 0; i < n.idx.size(); ++i)
          o[i * c + static_cast<std::size_t>(n.idx[i])] -= gv;
      }
      break;
    }
  }
}

GradMap Graph::gradients(NodeId loss) {
  if (nodes_[loss].value.numel() != 1) {
    fail(ErrorKind::shape, "gradients: loss " + describe(loss) + " is not scalar");
  }
  grads_.assign(nodes_.size(), Tensor{});
  grad_buf(loss)[0] = 1.0;
  for (NodeId id = loss + 1; id-- > 0;) {
    if (grads_[id].empty() || !nodes_[id].requires_grad) continue;
    backward_node(id);
  }
  GradMap out;
  for (const auto& [name, id] : by_name_) {
    const Node& n = nodes_[id];
    if (!n.trainable) continue;
    if (!grads_[id].empty()) {
      out[name] = std::move(grads_[id]);
    } else {
      out[name] = Tensor::zeros(n.value.shape());
    }
  }
  return out;
}

GradMap finite_diff(
    const std::function<double(const std::map<std::string, Tensor>&)>& fn,
    const std::map<std::string, Tensor>& point, double eps) {
  if (eps <= 0.0) fail(ErrorKind::config, "finite_diff: eps must be positive");
  GradMap out;
  std::map<std::string, Tensor> work = point;
  for (auto& [name, t] : work) {
    Tensor g = Tensor::zeros(t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t[i];
      t[i] = orig + eps;
      const double up = fn(work);
      t[i] = orig - eps;
      const double down = fn(work);
      t[i] = orig;
      g[i] = (up - down) / (2.0 * eps);
    }
    out[name] = std::move(g);
  }
  return out;
}

}  // namespace nestnet
