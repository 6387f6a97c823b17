#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nestnet/encoder.hpp"
#include "nestnet/graph.hpp"

namespace nestnet {

/// Interpolation and multitask coefficients. lambda1/lambda2 are keyed by
/// spec string; absent entries fall back to the style defaults captured at
/// construction.
struct LossWeights {
  double lambda_ctc = 0.2;
  std::map<std::string, double> lambda1;
  std::map<std::string, double> lambda2;

  double lambda1_for(const SubnetSpec& spec) const;
  double lambda2_for(const SubnetSpec& spec) const;

  // Sub-networks differing from the largest spec only in depth get the
  // depth coefficients; everything else gets the attribute coefficients.
  static LossWeights conformer_defaults(const std::vector<SubnetSpec>& grid,
                                        const SubnetSpec& largest);
  static LossWeights ssl_defaults(const std::vector<SubnetSpec>& grid,
                                  const SubnetSpec& largest);
};

// CTC negative log-likelihood of `target` (blank = 0) under per-frame log
// posteriors, forward recursion in log space. Differentiable.
NodeId ctc_loss(Graph& g, NodeId log_posteriors,
                const std::vector<std::int32_t>& target);

// Mean negative log-likelihood over teacher-forced positions; `gold` must
// already include the end-of-sequence token.
NodeId attention_ce_loss(Graph& g, NodeId decoder_log_probs,
                         const std::vector<std::int32_t>& gold);

// (1 - lambda) * l_att + lambda * l_ctc.
NodeId interpolated_loss(Graph& g, NodeId l_att, NodeId l_ctc, double lambda);

// Mean over frames of KL(p_max || p_i) on log posteriors; p_max is wrapped
// in stop_gradient so nothing flows back into the largest network's branch.
NodeId kl_regularizer(Graph& g, NodeId p_max_log_posteriors,
                      NodeId p_i_log_posteriors);

/// One (spec, scalar node) entry per forwarded sub-network.
using SpecLoss = std::pair<SubnetSpec, NodeId>;

// Multitask aggregate: the largest network's loss plus lambda1-weighted
// sub-network losses, plus lambda2-weighted KL terms when provided.
NodeId allinone_loss(Graph& g, const std::vector<SpecLoss>& losses,
                     const SubnetSpec& largest, const LossWeights& weights,
                     const std::vector<SpecLoss>* kls = nullptr);

}  // namespace nestnet
