#pragma once

// Training objectives. Every loss has a tape version (differentiable with
// respect to whatever produced its inputs) and a numeric convenience version.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "proda/distmodel.hpp"

namespace proda {

struct Batch {
  Tensor z;                         // n x d unit image embeddings
  std::vector<std::size_t> labels;  // n labels in [0, C)

  std::size_t size() const { return labels.size(); }
};

void validate_batch(const Batch& batch, std::size_t classes, std::size_t dim);

// mean_i [ lse_c(z_i.mu_c / tau + z_i^T A_{c,y_i} z_i / (2 tau^2)) - z_i.mu_{y_i} / tau ]
Var surrogate_loss(const DistributionVars& dist, const Batch& batch, double tau);
double surrogate_loss(const WeightDistribution& dist, const Batch& batch, double tau);

struct McEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

// Monte-Carlo value of mean_i -log E_w[softmax(z_i w^T / tau)_{y_i}] with
// w ~ N(mu, Sigma), all examples sharing the same draws. The standard error
// comes from the delta method over the per-draw contributions.
McEstimate marginal_loss_mc(const WeightDistribution& dist, const Batch& batch, double tau,
                            std::size_t draws, std::uint64_t seed);

struct MgfEstimate {
  double empirical = 0.0;
  double analytic = 0.0;
  double std_error = 0.0;
};

// E[exp(tX)] for X ~ N(mu, sigma^2), sampled and closed form.
MgfEstimate mgf_check(double mu, double sigma, double t, std::size_t draws, std::uint64_t seed);

// (1 / (K (K - 1))) sum_{i<j} |cos(g_i, g_j)| over the rows of a K x d matrix.
// Identical rows give 1/2. K < 2 gives 0 and a warning on stderr.
Var semantic_orthogonality_loss(Var embeddings);
double semantic_orthogonality_loss(const Tensor& embeddings);

struct LossTerms {
  Var total;
  Var upper;
  Var so;
};

// upper + lambda * so. embeddings are the bare-prompt encodings.
LossTerms total_loss(const DistributionVars& dist, const Batch& batch, Var embeddings,
                     const LossConfig& config);

// mean_i -log softmax(z_i W^T / tau)_{y_i}
Var cross_entropy_single(Var weights, const Batch& batch, double tau);
double cross_entropy_single(const Tensor& weights, const Batch& batch, double tau);

// Cross-entropy on the per-class mean of the samples.
Var ensemble_ce_loss(std::span<const Var> samples, const Batch& batch, double tau);
double ensemble_ce_loss(const WeightSamples& samples, const Batch& batch, double tau);

// Arithmetic mean of equally shaped nodes; the single node itself when B = 1.
Var mean_of(std::span<const Var> samples);

}  // namespace proda
