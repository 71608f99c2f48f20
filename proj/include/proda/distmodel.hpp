#pragma once

// Classifier weights generated by prompts, and the Gaussian fitted to them.
//
// Covariance storage:
//   FullBlocks      (C*d) x (C*d); block (c, y) is Sigma_cy
//   DiagonalBlocks  (C*C) x d;     row c*C + y holds Cov(w_c[k], w_y[k])

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "proda/rng.hpp"
#include "proda/textenc.hpp"

namespace proda {

enum class CovMode { FullBlocks, DiagonalBlocks };
enum class Estimator { ML, Unbiased };

std::string_view to_string(CovMode m);
CovMode cov_mode_from_string(std::string_view s);
std::string_view to_string(Estimator e);
Estimator estimator_from_string(std::string_view s);

struct LossConfig {
  double tau = 0.01;
  double lambda = 0.1;
  CovMode cov_mode = CovMode::DiagonalBlocks;
  Estimator estimator = Estimator::ML;
};

// B samples of the C x d class-weight matrix.
struct WeightSamples {
  std::vector<Tensor> per_prompt;
  std::vector<std::size_t> prompt_index;

  std::size_t count() const { return per_prompt.size(); }
  std::size_t classes() const { return per_prompt.empty() ? 0 : per_prompt.front().rows(); }
  std::size_t dim() const { return per_prompt.empty() ? 0 : per_prompt.front().cols(); }
};

struct WeightDistribution {
  Tensor mu;  // C x d, not renormalized
  Tensor cov;
  CovMode mode = CovMode::DiagonalBlocks;
  Estimator estimator = Estimator::ML;
  std::size_t sample_count = 0;

  std::size_t classes() const { return mu.rows(); }
  std::size_t dim() const { return mu.cols(); }
  // d x d block Sigma_cy (FullBlocks), or its diagonal as 1 x d (DiagonalBlocks).
  Tensor block(std::size_t c, std::size_t y) const;
  bool is_zero_covariance() const;
};

// The same distribution as tape nodes, so losses differentiate through it.
struct DistributionVars {
  Var mu;
  Var cov;
  CovMode mode = CovMode::DiagonalBlocks;
  std::size_t classes = 0;
  std::size_t dim = 0;
};

// Entry (b, c) = encode_text(assemble_description(P_b, e_c)). Returns B
// C x d nodes, differentiable with respect to the prompt nodes.
std::vector<Var> generate_weights(const BoundEncoder& encoder, std::span<const Var> prompts,
                                  std::span<const Position> positions,
                                  const ClassNameTokens& class_tokens);
WeightSamples generate_weights(const TextEncoder& encoder, const PromptCollection& prompts,
                               const ClassNameTokens& class_tokens);

DistributionVars estimate_distribution(Tape& tape, std::span<const Var> samples,
                                       CovMode mode, Estimator estimator);
WeightDistribution estimate_distribution(const WeightSamples& samples, const LossConfig& config);
WeightDistribution to_distribution(const DistributionVars& vars, Estimator estimator,
                                   std::size_t sample_count);

// z^T A_{c,y} z with A_{c,y} = Sigma_cc + Sigma_yy - Sigma_cy - Sigma_yc.
double quadratic_form(const WeightDistribution& dist, std::size_t c, std::size_t y,
                      std::span<const double> z);

// Bx x C matrix of z_i^T A_{c,y_i} z_i. Entry (i, y_i) is exactly 0.
Var quadratic_terms(const DistributionVars& dist, const Tensor& z,
                    std::span<const std::size_t> labels);

// Draws w_{1:C} ~ N(mu, Sigma). FullBlocks samples the joint C*d Gaussian;
// DiagonalBlocks samples an independent C-dimensional Gaussian per
// coordinate. Coordinates with zero variance stay at the mean exactly, the
// rest use a Cholesky factor retried with jitter 1e-10, 1e-9, 1e-8.
class GaussianSampler {
 public:
  explicit GaussianSampler(const WeightDistribution& dist);

  Tensor sample(Rng& rng) const;
  // Same draw written into out, which must already be C x d.
  void sample_into(Rng& rng, Tensor& out) const;
  const WeightDistribution& distribution() const { return *dist_; }
  bool degenerate() const { return degenerate_; }

 private:
  struct Factor {
    std::vector<std::size_t> active;  // indices with positive variance
    Eigen::MatrixXd lower;
  };
  const WeightDistribution* dist_;
  std::vector<Factor> factors_;  // one (Full) or d (Diagonal)
  bool degenerate_ = true;
};

// Lower Cholesky factor of a PSD matrix, with the jitter schedule above.
Eigen::MatrixXd robust_cholesky(const Eigen::MatrixXd& m);

}  // namespace proda
