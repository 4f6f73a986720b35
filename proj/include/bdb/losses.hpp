#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "bdb/masks.hpp"
#include "bdb/tensor.hpp"

namespace bdb {

// Per-sample class ids of one batch. Identities must be consecutive P×K
// groups only for sampler output; the losses accept any order.
struct BatchLabels {
  std::vector<int> identity;

  std::size_t size() const { return identity.size(); }
  // Throws BatchCompositionError unless ≥ 2 identities are present and every
  // identity has ≥ 2 samples.
  void require_metric_batch() const;
};

// D[i][j] = sqrt(Σ_d (X[i,d] − X[j,d])²). The derivative uses
// sqrt(max(ε, s)) in the denominator so coincident points stay finite.
Tensor pairwise_euclidean(const Tensor& x);
inline constexpr double kSqrtGuard = 1e-12;

// Σ over anchors of softplus(hardest positive − hardest negative).
Tensor batch_hard_soft_margin_triplet(const Tensor& feats, const BatchLabels& labels);

// Mean negative log-likelihood with a stable log-sum-exp.
Tensor softmax_ce(const Tensor& logits, const std::vector<int>& labels);

struct LiftedParams {
  double margin = 1.0;
};

// 1/(2|P|) Σ_{(i,j)∈P} max(0, J_ij)², with
// J_ij = log(Σ_{k∈N(i)} exp(m − D_ik) + Σ_{l∈N(j)} exp(m − D_jl)) + D_ij.
Tensor lifted_structure_loss(const Tensor& feats, const BatchLabels& labels,
                             const LiftedParams& params = {});

struct MarginParams {
  double alpha = 0.2;
  double beta = 1.2;
  // Sampling weights use distances clamped below at this value.
  double cutoff = 0.5;
  // Negatives farther than this get zero sampling weight.
  double nonzero_loss_cutoff = 1.4;
};

// Distance-weighted negative sampling with the margin loss on unit-normalized
// embeddings. Every anchor–positive pair draws one negative; the result is
// the mean over pairs of max(0, α + d_pos − β) + max(0, α − d_neg + β).
Tensor weighted_margin_loss(const Tensor& feats, const BatchLabels& labels, Rng& rng,
                            const MarginParams& params = {});

// Sampling distribution over candidates given anchor–candidate distances on
// the unit sphere of dimension `dim`; zero weight where `allowed` is false.
std::vector<double> distance_weighted_probabilities(const std::vector<double>& distances,
                                                    const std::vector<bool>& allowed,
                                                    std::size_t dim, const MarginParams& params);

struct LossValue {
  Tensor total;
  std::map<std::string, Tensor> components;

  double component(const std::string& name) const;
};

// Unit-weight sum of all components.
LossValue combine(std::map<std::string, Tensor> components);

}  // namespace bdb
