#include "proda/distmodel.hpp"

#include <algorithm>
#include <cmath>

namespace proda {

std::string_view to_string(CovMode m) {
  return m == CovMode::FullBlocks ? "full" : "diag";
}

CovMode cov_mode_from_string(std::string_view s) {
  if (s == "full") return CovMode::FullBlocks;
  if (s == "diag") return CovMode::DiagonalBlocks;
  throw InvalidArgument("unknown covariance mode '" + std::string(s) + "' (use diag|full)");
}

std::string_view to_string(Estimator e) { return e == Estimator::ML ? "ml" : "unbiased"; }

Estimator estimator_from_string(std::string_view s) {
  if (s == "ml") return Estimator::ML;
  if (s == "unbiased") return Estimator::Unbiased;
  throw InvalidArgument("unknown estimator '" + std::string(s) + "' (use ml|unbiased)");
}

Tensor WeightDistribution::block(std::size_t c, std::size_t y) const {
  const std::size_t C = classes(), d = dim();
  if (c >= C || y >= C) throw InvalidArgument("class index out of range");
  if (mode == CovMode::FullBlocks) {
    Tensor out(d, d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out(i, j) = cov(c * d + i, y * d + j);
    return out;
  }
  return Tensor::row(cov.row_span(c * C + y));
}

bool WeightDistribution::is_zero_covariance() const {
  return std::all_of(cov.data().begin(), cov.data().end(), [](double v) { return v == 0.0; });
}

// ---------------------------------------------------------------------------

std::vector<Var> generate_weights(const BoundEncoder& encoder, std::span<const Var> prompts,
                                  std::span<const Position> positions,
                                  const ClassNameTokens& class_tokens) {
  if (prompts.empty()) throw InvalidArgument("generate_weights needs at least one prompt");
  if (prompts.size() != positions.size()) throw InvalidArgument("one position per prompt");
  if (class_tokens.classes() < 2) throw InvalidArgument("need at least two classes");
  Tape& tape = encoder.tape();
  std::vector<Var> out;
  out.reserve(prompts.size());
  std::vector<Var> rows(class_tokens.classes());
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    for (std::size_t c = 0; c < class_tokens.classes(); ++c) {
      rows[c] = encoder.encode(
          assemble_description(tape, prompts[b], positions[b], class_tokens.per_class[c]));
    }
    out.push_back(diff::concat_rows(rows));
  }
  return out;
}

WeightSamples generate_weights(const TextEncoder& encoder, const PromptCollection& prompts,
                               const ClassNameTokens& class_tokens) {
  WeightSamples out;
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    Tape tape;
    BoundEncoder bound = encoder.bind(tape);
    const Var p[] = {tape.constant(prompts.prompts[b].tokens)};
    const Position pos[] = {prompts.prompts[b].position};
    out.per_prompt.push_back(generate_weights(bound, p, pos, class_tokens).front().value());
    out.prompt_index.push_back(b);
  }
  return out;
}

DistributionVars estimate_distribution(Tape& tape, std::span<const Var> samples, CovMode mode,
                                       Estimator estimator) {
  const std::size_t B = samples.size();
  if (B == 0) throw InvalidArgument("estimate_distribution needs at least one sample");
  if (estimator == Estimator::Unbiased && B < 2) {
    throw InvalidArgument("unbiased covariance needs at least two samples");
  }
  const std::size_t C = samples.front().rows(), d = samples.front().cols();
  for (const Var& s : samples) {
    if (s.rows() != C || s.cols() != d) throw ShapeError("weight samples disagree in shape");
  }

  Var total = samples.front();
  for (std::size_t b = 1; b < B; ++b) total = total + samples[b];
  Var mu = B == 1 ? total : total / static_cast<double>(B);
  const double divisor = static_cast<double>(estimator == Estimator::ML ? B : B - 1);

  DistributionVars out{mu, {}, mode, C, d};
  if (mode == CovMode::FullBlocks) {
    std::vector<Var> centered;
    centered.reserve(B);
    for (const Var& s : samples) centered.push_back(diff::reshape(s - mu, 1, C * d));
    Var x = diff::concat_rows(centered);
    out.cov = diff::matmul(diff::transpose(x), x) / divisor;
  } else {
    std::vector<std::size_t> idx_c(C * C), idx_y(C * C);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < C; ++y) {
        idx_c[c * C + y] = c;
        idx_y[c * C + y] = y;
      }
    Var acc;
    for (std::size_t b = 0; b < B; ++b) {
      Var dev = samples[b] - mu;
      Var prod = diff::gather_rows(dev, idx_c) * diff::gather_rows(dev, idx_y);
      acc = b == 0 ? prod : acc + prod;
    }
    out.cov = acc / divisor;
  }
  (void)tape;
  return out;
}

WeightDistribution to_distribution(const DistributionVars& vars, Estimator estimator,
                                   std::size_t sample_count) {
  WeightDistribution out;
  out.mu = vars.mu.value();
  out.cov = vars.cov.value();
  out.mode = vars.mode;
  out.estimator = estimator;
  out.sample_count = sample_count;
  return out;
}

WeightDistribution estimate_distribution(const WeightSamples& samples, const LossConfig& config) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(samples.count());
  for (const Tensor& w : samples.per_prompt) vars.push_back(tape.constant(w));
  return to_distribution(estimate_distribution(tape, vars, config.cov_mode, config.estimator),
                         config.estimator, samples.count());
}

double quadratic_form(const WeightDistribution& dist, std::size_t c, std::size_t y,
                      std::span<const double> z) {
  const std::size_t C = dist.classes(), d = dist.dim();
  if (c >= C || y >= C) throw InvalidArgument("quadratic_form: class index out of range");
  if (z.size() != d) throw ShapeError("quadratic_form: z has wrong dimension");
  double q = 0.0;
  if (dist.mode == CovMode::FullBlocks) {
    const Tensor& S = dist.cov;
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double a = S(c * d + i, c * d + j) + S(y * d + i, y * d + j) -
                         S(c * d + i, y * d + j) - S(y * d + i, c * d + j);
        q += z[i] * a * z[j];
      }
    }
  } else {
    auto cc = dist.cov.row_span(c * C + c);
    auto yy = dist.cov.row_span(y * C + y);
    auto cy = dist.cov.row_span(c * C + y);
    for (std::size_t k = 0; k < d; ++k) q += z[k] * z[k] * (cc[k] + yy[k] - 2.0 * cy[k]);
  }
  return q;
}

Var quadratic_terms(const DistributionVars& dist, const Tensor& z,
                    std::span<const std::size_t> labels) {
  const std::size_t C = dist.classes, d = dist.dim, n = z.rows();
  if (z.cols() != d) throw ShapeError("quadratic_terms: embedding dim mismatch");
  if (labels.size() != n) throw ShapeError("quadratic_terms: one label per row");
  for (std::size_t y : labels) {
    if (y >= C) throw InvalidArgument("label out of range");
  }
  Tape& tape = *dist.mu.tape;

  if (dist.mode == CovMode::FullBlocks) {
    // Row (i, c) of U is e_c (x) z_i - e_{y_i} (x) z_i, so u^T Sigma u = z^T A z.
    Tensor u(n * C, C * d);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < C; ++c) {
        if (c == labels[i]) continue;
        for (std::size_t k = 0; k < d; ++k) {
          u(i * C + c, c * d + k) = z(i, k);
          u(i * C + c, labels[i] * d + k) = -z(i, k);
        }
      }
    }
    Var uv = tape.constant(std::move(u));
    Var q = diff::sum(diff::matmul(uv, dist.cov) * uv, diff::Axis::Cols);
    return diff::reshape(q, n, C);
  }

  std::vector<std::size_t> idx_cc(n * C), idx_yy(n * C), idx_cy(n * C);
  Tensor z2(n * C, d);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = labels[i];
    for (std::size_t c = 0; c < C; ++c) {
      idx_cc[i * C + c] = c * C + c;
      idx_yy[i * C + c] = y * C + y;
      idx_cy[i * C + c] = c * C + y;
      for (std::size_t k = 0; k < d; ++k) z2(i * C + c, k) = z(i, k) * z(i, k);
    }
  }
  Var a = (diff::gather_rows(dist.cov, idx_cc) + diff::gather_rows(dist.cov, idx_yy)) -
          diff::gather_rows(dist.cov, idx_cy) * 2.0;
  Var q = diff::sum(a * tape.constant(std::move(z2)), diff::Axis::Cols);
  return diff::reshape(q, n, C);
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd robust_cholesky(const Eigen::MatrixXd& m) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  auto attempt = [&](double jitter, Eigen::MatrixXd& out) {
    Eigen::MatrixXd a = m;
    if (jitter > 0.0) a.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success) return false;
    out = llt.matrixL();
    if (!out.allFinite()) return false;
    const double err = (out * out.transpose() - a).cwiseAbs().maxCoeff();
    return err <= 1e-9 * scale;
  };
  Eigen::MatrixXd out;
  for (double jitter : {0.0, 1e-10, 1e-9, 1e-8}) {
    if (attempt(jitter, out)) return out;
  }
  throw NumericError("Cholesky factorization failed after jitter retries");
}

GaussianSampler::GaussianSampler(const WeightDistribution& dist) : dist_(&dist) {
  const std::size_t C = dist.classes(), d = dist.dim();
  auto build = [&](const Eigen::MatrixXd& full) {
    Factor f;
    for (Eigen::Index i = 0; i < full.rows(); ++i) {
      if (full(i, i) > 0.0) f.active.push_back(static_cast<std::size_t>(i));
    }
    if (!f.active.empty()) {
      const auto k = static_cast<Eigen::Index>(f.active.size());
      Eigen::MatrixXd sub(k, k);
      for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j < k; ++j) sub(i, j) = full(f.active[i], f.active[j]);
      f.lower = robust_cholesky(sub);
      degenerate_ = false;
    }
    return f;
  };
  if (dist.mode == CovMode::FullBlocks) {
    Eigen::MatrixXd full(C * d, C * d);
    for (std::size_t i = 0; i < C * d; ++i)
      for (std::size_t j = 0; j < C * d; ++j) full(i, j) = dist.cov(i, j);
    factors_.push_back(build(full));
  } else {
    for (std::size_t k = 0; k < d; ++k) {
      Eigen::MatrixXd s(C, C);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < C; ++y) s(c, y) = dist.cov(c * C + y, k);
      factors_.push_back(build(s));
    }
  }
}

Tensor GaussianSampler::sample(Rng& rng) const {
  Tensor w(dist_->classes(), dist_->dim());
  sample_into(rng, w);
  return w;
}

void GaussianSampler::sample_into(Rng& rng, Tensor& out) const {
  const WeightDistribution& dist = *dist_;
  if (!out.same_shape(dist.mu)) throw ShapeError("sample_into: output shape mismatch");
  std::copy(dist.mu.data().begin(), dist.mu.data().end(), out.data().begin());
  thread_local std::vector<double> eps;
  for (std::size_t f = 0; f < factors_.size(); ++f) {
    const Factor& factor = factors_[f];
    const std::size_t k = factor.active.size();
    if (k == 0) continue;
    eps.resize(k);
    for (std::size_t i = 0; i < k; ++i) eps[i] = rng.normal();
    const Eigen::MatrixXd& L = factor.lower;
    for (std::size_t i = 0; i < k; ++i) {
      double delta = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        delta += L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * eps[j];
      }
      const std::size_t idx = factor.active[i];
      if (dist.mode == CovMode::FullBlocks) {
        out[idx] += delta;  // flat index c * d + j
      } else {
        out(idx, f) += delta;
      }
    }
  }
}

}  // namespace proda
