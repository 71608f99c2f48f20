#include "proda/losses.hpp"

#include <cmath>
#include <iostream>

namespace proda {

namespace {

// n x C logits z W^T / tau.
Var class_logits(Tape& tape, Var weights, const Tensor& z, double tau) {
  return diff::matmul(tape.constant(z), diff::transpose(weights)) / tau;
}

// mean_i [ lse_c(logits_i) - target_i ], target taken from plain (unshifted) logits.
Var ce_from_logits(Tape& tape, Var shifted, Var plain, std::span<const std::size_t> labels) {
  Tensor onehot(plain.rows(), plain.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) onehot(i, labels[i]) = 1.0;
  Var target = diff::sum(plain * tape.constant(std::move(onehot)), diff::Axis::Cols);
  return diff::mean(diff::logsumexp(shifted, diff::Axis::Cols) - target);
}

void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("tau must be > 0");
}

}  // namespace

void validate_batch(const Batch& batch, std::size_t classes, std::size_t dim) {
  if (batch.size() == 0) throw InvalidArgument("empty batch");
  if (batch.z.rows() != batch.size()) throw ShapeError("batch: one label per embedding row");
  if (batch.z.cols() != dim) {
    throw ShapeError("batch embedding dim " + std::to_string(batch.z.cols()) +
                     " != weight dim " + std::to_string(dim));
  }
  for (std::size_t y : batch.labels) {
    if (y >= classes) throw InvalidArgument("label " + std::to_string(y) + " out of range");
  }
}

Var mean_of(std::span<const Var> samples) {
  if (samples.empty()) throw InvalidArgument("mean of zero samples");
  Var total = samples.front();
  for (std::size_t b = 1; b < samples.size(); ++b) total = total + samples[b];
  return samples.size() == 1 ? total : total / static_cast<double>(samples.size());
}

Var surrogate_loss(const DistributionVars& dist, const Batch& batch, double tau) {
  check_tau(tau);
  validate_batch(batch, dist.classes, dist.dim);
  Tape& tape = *dist.mu.tape;
  Var plain = class_logits(tape, dist.mu, batch.z, tau);
  Var q = quadratic_terms(dist, batch.z, batch.labels);
  Var shifted = plain + q / (2.0 * tau * tau);
  return ce_from_logits(tape, shifted, plain, batch.labels);
}

double surrogate_loss(const WeightDistribution& dist, const Batch& batch, double tau) {
  Tape tape;
  DistributionVars vars{tape.constant(dist.mu), tape.constant(dist.cov), dist.mode,
                        dist.classes(), dist.dim()};
  return surrogate_loss(vars, batch, tau).value().item();
}

McEstimate marginal_loss_mc(const WeightDistribution& dist, const Batch& batch, double tau,
                            std::size_t draws, std::uint64_t seed) {
  check_tau(tau);
  if (draws < 100) throw InvalidArgument("marginal_loss_mc needs at least 100 draws");
  const std::size_t C = dist.classes(), d = dist.dim(), n = batch.size();
  validate_batch(batch, C, d);

  // log p_i(w) = s_{y_i} - lse_c s_c with s_c = z_i . w_c / tau
  std::vector<double> logits(C);
  auto log_prob = [&](const Tensor& w, std::size_t i) {
    auto z = batch.z.row_span(i);
    double top = -INFINITY;
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      auto wc = w.row_span(c);
      for (std::size_t k = 0; k < d; ++k) s += z[k] * wc[k];
      logits[c] = s / tau;
      top = std::max(top, logits[c]);
    }
    double acc = 0.0;
    for (double s : logits) acc += std::exp(s - top);
    return logits[batch.labels[i]] - (top + std::log(acc));
  };

  // Ratios r_is = p_i(w_s) / p_i(mu) are averaged as deviations from 1, so a
  // degenerate distribution gives the cross-entropy at mu with zero error.
  std::vector<double> base(n);
  for (std::size_t i = 0; i < n; ++i) base[i] = log_prob(dist.mu, i);

  GaussianSampler sampler(dist);
  Rng rng(seed);
  Tensor w(C, d);
  std::vector<double> dev_sum(n, 0.0);
  std::vector<double> dev(n * draws);
  for (std::size_t s = 0; s < draws; ++s) {
    sampler.sample_into(rng, w);
    for (std::size_t i = 0; i < n; ++i) {
      const double r = std::expm1(log_prob(w, i) - base[i]);
      dev[s * n + i] = r;
      dev_sum[i] += r;
    }
  }

  McEstimate out;
  std::vector<double> mean_ratio(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = dev_sum[i] / static_cast<double>(draws);
    mean_ratio[i] = 1.0 + m;
    out.estimate += -base[i] - std::log1p(m);
  }
  out.estimate /= static_cast<double>(n);

  // Delta method: h_s = sum_i -(r_is - 1) / (n * mean_ratio_i).
  double h_sum = 0.0, h_sq = 0.0;
  for (std::size_t s = 0; s < draws; ++s) {
    double h = 0.0;
    for (std::size_t i = 0; i < n; ++i) h -= dev[s * n + i] / (static_cast<double>(n) * mean_ratio[i]);
    h_sum += h;
    h_sq += h * h;
  }
  const double S = static_cast<double>(draws);
  const double var = std::max(0.0, (h_sq - h_sum * h_sum / S) / (S - 1.0));
  out.std_error = std::sqrt(var / S);
  if (!std::isfinite(out.estimate) || !std::isfinite(out.std_error)) {
    throw NumericError("marginal_loss_mc produced a non-finite estimate");
  }
  return out;
}

MgfEstimate mgf_check(double mu, double sigma, double t, std::size_t draws, std::uint64_t seed) {
  if (sigma < 0.0) throw InvalidArgument("mgf_check: sigma must be >= 0");
  if (draws < 2) throw InvalidArgument("mgf_check needs at least two draws");
  MgfEstimate out;
  out.analytic = std::exp(t * mu + sigma * sigma * t * t / 2.0);
  const double base = std::exp(t * mu);
  Rng rng(seed);
  double sum = 0.0, sq = 0.0;
  for (std::size_t s = 0; s < draws; ++s) {
    const double v = std::exp(t * (mu + sigma * rng.normal())) - base;
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(draws);
  out.empirical = base + sum / n;
  out.std_error = std::sqrt(std::max(0.0, (sq - sum * sum / n) / (n - 1.0)) / n);
  return out;
}

Var semantic_orthogonality_loss(Var embeddings) {
  Tape& tape = *embeddings.tape;
  const std::size_t K = embeddings.rows();
  if (K < 2) {
    std::cerr << "warning: semantic orthogonality loss needs K >= 2, using 0\n";
    return tape.constant(Tensor::scalar(0.0));
  }
  Var g = diff::l2_normalize(embeddings);
  Var cos = diff::matmul(g, diff::transpose(g));
  Tensor upper(K, K);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i + 1; j < K; ++j) upper(i, j) = 1.0;
  Var pairs = diff::sum(diff::abs(cos) * tape.constant(std::move(upper)));
  return pairs / static_cast<double>(K * (K - 1));
}

double semantic_orthogonality_loss(const Tensor& embeddings) {
  Tape tape;
  return semantic_orthogonality_loss(tape.constant(embeddings)).value().item();
}

LossTerms total_loss(const DistributionVars& dist, const Batch& batch, Var embeddings,
                     const LossConfig& config) {
  if (config.lambda < 0.0) throw InvalidArgument("lambda must be >= 0");
  LossTerms out;
  out.upper = surrogate_loss(dist, batch, config.tau);
  out.so = semantic_orthogonality_loss(embeddings);
  out.total = config.lambda == 0.0 ? out.upper : out.upper + out.so * config.lambda;
  return out;
}

Var cross_entropy_single(Var weights, const Batch& batch, double tau) {
  check_tau(tau);
  validate_batch(batch, weights.rows(), weights.cols());
  Tape& tape = *weights.tape;
  Var plain = class_logits(tape, weights, batch.z, tau);
  return ce_from_logits(tape, plain, plain, batch.labels);
}

double cross_entropy_single(const Tensor& weights, const Batch& batch, double tau) {
  Tape tape;
  return cross_entropy_single(tape.constant(weights), batch, tau).value().item();
}

Var ensemble_ce_loss(std::span<const Var> samples, const Batch& batch, double tau) {
  return cross_entropy_single(mean_of(samples), batch, tau);
}

double ensemble_ce_loss(const WeightSamples& samples, const Batch& batch, double tau) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& w : samples.per_prompt) vars.push_back(tape.constant(w));
  return ensemble_ce_loss(vars, batch, tau).value().item();
}

}  // namespace proda
