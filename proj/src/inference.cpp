#include "proda/inference.hpp"

#include <cmath>

namespace proda {

std::string_view to_string(MetricKind m) {
  return m == MetricKind::Accuracy ? "accuracy" : "mean-per-class";
}

MetricKind metric_from_string(std::string_view s) {
  if (s == "accuracy") return MetricKind::Accuracy;
  if (s == "mean-per-class") return MetricKind::MeanPerClass;
  throw InvalidArgument("unknown metric '" + std::string(s) + "' (use accuracy|mean-per-class)");
}

std::string_view to_string(McMode m) { return m == McMode::Gaussian ? "gaussian" : "empirical"; }

McMode mc_mode_from_string(std::string_view s) {
  if (s == "gaussian") return McMode::Gaussian;
  if (s == "empirical") return McMode::Empirical;
  throw InvalidArgument("unknown Monte-Carlo mode '" + std::string(s) + "'");
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

namespace {

void softmax_into(std::span<const double> z, const Tensor& w, double tau,
                  std::vector<double>& out) {
  const std::size_t C = w.rows();
  out.resize(C);
  double top = -INFINITY;
  for (std::size_t c = 0; c < C; ++c) {
    auto wc = w.row_span(c);
    double s = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) s += z[k] * wc[k];
    out[c] = s / tau;
    top = std::max(top, out[c]);
  }
  double total = 0.0;
  for (double& v : out) {
    v = std::exp(v - top);
    total += v;
  }
  for (double& v : out) v /= total;
}

void check_query(std::span<const double> z, const Tensor& w, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("tau must be > 0");
  if (w.rows() == 0) throw InvalidArgument("no classes to score");
  if (z.size() != w.cols()) throw ShapeError("query dim does not match weight dim");
}

}  // namespace

Prediction score(std::span<const double> z, const Tensor& weights, double tau) {
  check_query(z, weights, tau);
  Prediction p;
  softmax_into(z, weights, tau, p.probs);
  p.label = argmax(p.probs);
  return p;
}

Prediction predict_mean(const WeightDistribution& dist, std::span<const double> z, double tau) {
  return score(z, dist.mu, tau);
}

MonteCarloPredictor::MonteCarloPredictor(const WeightDistribution& dist,
                                         const WeightSamples* samples, double tau,
                                         std::size_t draws, McMode mode, std::uint64_t seed)
    : mu_(dist.mu), tau_(tau) {
  if (draws == 0) throw InvalidArgument("predict_mc needs at least one draw");
  if (!(tau > 0.0)) throw InvalidArgument("tau must be > 0");
  Rng rng(seed);
  draws_.reserve(draws);
  if (mode == McMode::Empirical) {
    if (samples == nullptr || samples->count() == 0) {
      throw InvalidArgument("empirical Monte-Carlo needs the stored per-prompt weights");
    }
    for (std::size_t s = 0; s < draws; ++s) {
      draws_.push_back(samples->per_prompt[rng.below(samples->count())]);
    }
  } else {
    GaussianSampler sampler(dist);
    for (std::size_t s = 0; s < draws; ++s) draws_.push_back(sampler.sample(rng));
  }
}

Prediction MonteCarloPredictor::predict(std::span<const double> z) const {
  check_query(z, mu_, tau_);
  // Accumulate deviations from the mean-weight probabilities so identical
  // draws reproduce predict_mean exactly.
  Prediction p;
  softmax_into(z, mu_, tau_, p.probs);
  const std::size_t C = p.probs.size();
  std::vector<double> dev(C, 0.0), probs;
  for (const Tensor& w : draws_) {
    softmax_into(z, w, tau_, probs);
    for (std::size_t c = 0; c < C; ++c) dev[c] += probs[c] - p.probs[c];
  }
  for (std::size_t c = 0; c < C; ++c) p.probs[c] += dev[c] / static_cast<double>(draws_.size());
  p.label = argmax(p.probs);
  return p;
}

Prediction predict_mc(const WeightDistribution& dist, std::span<const double> z, double tau,
                      std::size_t draws, McMode mode, std::uint64_t seed,
                      const WeightSamples* samples) {
  return MonteCarloPredictor(dist, samples, tau, draws, mode, seed).predict(z);
}

Tensor ensemble_weights(std::span<const Tensor> weight_sets) {
  if (weight_sets.empty()) throw InvalidArgument("ensemble needs at least one weight set");
  Tensor avg = weight_sets.front();
  for (std::size_t s = 1; s < weight_sets.size(); ++s) {
    if (!weight_sets[s].same_shape(avg)) throw ShapeError("ensemble weight sets differ in shape");
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += weight_sets[s][i];
  }
  for (std::size_t c = 0; c < avg.rows(); ++c) {
    auto row = avg.row_span(c);
    double norm = 0.0;
    for (double v : row) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw NumericError("ensemble class embedding has zero norm");
    for (double& v : row) v /= norm;
  }
  return avg;
}

Prediction zero_shot_ensemble(std::span<const Tensor> weight_sets, std::span<const double> z,
                              double tau, bool mean_of_softmax) {
  if (!mean_of_softmax) return score(z, ensemble_weights(weight_sets), tau);
  if (weight_sets.empty()) throw InvalidArgument("ensemble needs at least one weight set");
  Prediction p = score(z, weight_sets.front(), tau);
  for (std::size_t s = 1; s < weight_sets.size(); ++s) {
    Prediction q = score(z, weight_sets[s], tau);
    for (std::size_t c = 0; c < p.probs.size(); ++c) p.probs[c] += q.probs[c];
  }
  for (double& v : p.probs) v /= static_cast<double>(weight_sets.size());
  p.label = argmax(p.probs);
  return p;
}

double metric_value(std::span<const std::size_t> predicted, std::span<const std::size_t> labels,
                    MetricKind metric, std::size_t classes) {
  if (labels.empty()) throw InvalidArgument("empty test set");
  if (predicted.size() != labels.size()) throw ShapeError("one prediction per label");
  if (metric == MetricKind::Accuracy) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
  }
  std::vector<std::size_t> total(classes, 0), hit(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw InvalidArgument("label out of range");
    ++total[labels[i]];
    hit[labels[i]] += predicted[i] == labels[i];
  }
  double recall = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (total[c] == 0) {
      throw InvalidArgument("mean-per-class: class " + std::to_string(c) + " absent from test set");
    }
    recall += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
  }
  return recall / static_cast<double>(classes);
}

double evaluate(const PredictFn& predict, const Tensor& test_z,
                std::span<const std::size_t> labels, MetricKind metric, std::size_t classes) {
  if (test_z.rows() != labels.size()) throw ShapeError("one label per test embedding");
  std::vector<std::size_t> predicted(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) predicted[i] = predict(test_z.row_span(i));
  return metric_value(predicted, labels, metric, classes);
}

}  // namespace proda
