#include "nestnet/losses.hpp"

#include "nestnet/error.hpp"

namespace nestnet {

namespace {

bool depth_only_change(const SubnetSpec& spec, const SubnetSpec& largest) {
  return spec.depth != largest.depth && spec.width == largest.width &&
         spec.bits == largest.bits;
}

LossWeights make_defaults(const std::vector<SubnetSpec>& grid,
                          const SubnetSpec& largest, double depth_l1,
                          double depth_l2, double other_l1, double other_l2) {
  LossWeights w;
  for (const SubnetSpec& spec : grid) {
    if (spec == largest) continue;
    const std::string key = spec_to_string(spec);
    if (depth_only_change(spec, largest)) {
      w.lambda1[key] = depth_l1;
      w.lambda2[key] = depth_l2;
    } else {
      w.lambda1[key] = other_l1;
      w.lambda2[key] = other_l2;
    }
  }
  return w;
}

}  // namespace

double LossWeights::lambda1_for(const SubnetSpec& spec) const {
  auto it = lambda1.find(spec_to_string(spec));
  return it != lambda1.end() ? it->second : 1.0;
}

double LossWeights::lambda2_for(const SubnetSpec& spec) const {
  auto it = lambda2.find(spec_to_string(spec));
  return it != lambda2.end() ? it->second : 1.0;
}

LossWeights LossWeights::conformer_defaults(const std::vector<SubnetSpec>& grid,
                                            const SubnetSpec& largest) {
  return make_defaults(grid, largest, 0.8, 0.2, 1.0, 1.0);
}

LossWeights LossWeights::ssl_defaults(const std::vector<SubnetSpec>& grid,
                                      const SubnetSpec& largest) {
  LossWeights w = make_defaults(grid, largest, 1.0, 0.005, 1.0, 0.1);
  w.lambda_ctc = 1.0;  // pure CTC objective
  return w;
}

NodeId ctc_loss(Graph& g, NodeId log_posteriors,
                const std::vector<std::int32_t>& target) {
  return g.ctc_loss_node(log_posteriors, target);
}

NodeId attention_ce_loss(Graph& g, NodeId decoder_log_probs,
                         const std::vector<std::int32_t>& gold) {
  const Tensor& lp = g.val(decoder_log_probs);
  if (gold.size() != lp.rows()) {
    fail(ErrorKind::shape,
         "attention_ce_loss: " + std::to_string(gold.size()) +
             " gold tokens for " + std::to_string(lp.rows()) + " positions");
  }
  return g.nll_rows(decoder_log_probs, gold);
}

NodeId interpolated_loss(Graph& g, NodeId l_att, NodeId l_ctc, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) {
    fail(ErrorKind::config, "interpolation weight outside [0, 1]");
  }
  return g.add(g.scale(l_att, 1.0 - lambda), g.scale(l_ctc, lambda));
}

NodeId kl_regularizer(Graph& g, NodeId p_max_log_posteriors,
                      NodeId p_i_log_posteriors) {
  const Tensor& pm = g.val(p_max_log_posteriors);
  const Tensor& pi = g.val(p_i_log_posteriors);
  if (!pm.same_shape(pi)) {
    fail(ErrorKind::shape, "kl_regularizer: teacher shape " + pm.shape_str() +
                               " vs student " + pi.shape_str());
  }
  const NodeId teacher = g.stop_gradient(p_max_log_posteriors);
  const NodeId diff = g.sub(teacher, p_i_log_posteriors);
  const NodeId weighted = g.mul(g.exp(teacher), diff);
  // Frame average keeps lambda2 independent of utterance length.
  return g.scale(g.sum_all(weighted), 1.0 / static_cast<double>(pm.rows()));
}

NodeId allinone_loss(Graph& g, const std::vector<SpecLoss>& losses,
                     const SubnetSpec& largest, const LossWeights& weights,
                     const std::vector<SpecLoss>* kls) {
  NodeId total = kNoNode;
  for (const auto& [spec, node] : losses) {
    if (spec == largest) {
      total = node;
      break;
    }
  }
  if (total == kNoNode) {
    fail(ErrorKind::config,
         "allinone_loss: largest network " + spec_to_string(largest) +
             " has no loss term");
  }
  for (const auto& [spec, node] : losses) {
    if (spec == largest) continue;
    total = g.add(total, g.scale(node, weights.lambda1_for(spec)));
  }
  if (kls != nullptr) {
    for (const auto& [spec, node] : *kls) {
      if (spec == largest) continue;
      total = g.add(total, g.scale(node, weights.lambda2_for(spec)));
    }
  }
  return total;
}

}  // namespace nestnet
