#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "proda/distmodel.hpp"

namespace proda {

enum class MetricKind { Accuracy, MeanPerClass };

std::string_view to_string(MetricKind m);
MetricKind metric_from_string(std::string_view s);

struct Prediction {
  std::vector<double> probs;
  std::size_t label = 0;
};

// Lowest index among the maxima.
std::size_t argmax(std::span<const double> values);

// softmax(z W^T / tau).
Prediction score(std::span<const double> z, const Tensor& weights, double tau);

// score against the (not renormalized) mean weights.
Prediction predict_mean(const WeightDistribution& dist, std::span<const double> z, double tau);

enum class McMode { Gaussian, Empirical };

std::string_view to_string(McMode m);
McMode mc_mode_from_string(std::string_view s);

// Averages softmax probabilities over a fixed set of drawn weight matrices,
// shared by every query. Gaussian draws from N(mu, Sigma); Empirical picks
// stored per-prompt weights uniformly with replacement.
class MonteCarloPredictor {
 public:
  MonteCarloPredictor(const WeightDistribution& dist, const WeightSamples* samples, double tau,
                      std::size_t draws, McMode mode, std::uint64_t seed);

  Prediction predict(std::span<const double> z) const;
  std::size_t draws() const { return draws_.size(); }

 private:
  Tensor mu_;
  std::vector<Tensor> draws_;
  double tau_;
};

Prediction predict_mc(const WeightDistribution& dist, std::span<const double> z, double tau,
                      std::size_t draws, McMode mode, std::uint64_t seed,
                      const WeightSamples* samples = nullptr);

// Class embeddings averaged over prompt sets, then L2-normalized per class.
Tensor ensemble_weights(std::span<const Tensor> weight_sets);

// score against ensemble_weights, or the mean of per-set softmax outputs when
// mean_of_softmax is set.
Prediction zero_shot_ensemble(std::span<const Tensor> weight_sets, std::span<const double> z,
                              double tau, bool mean_of_softmax = false);

using PredictFn = std::function<std::size_t(std::span<const double>)>;

// Accuracy, or the unweighted mean of per-class recalls.
double evaluate(const PredictFn& predict, const Tensor& test_z,
                std::span<const std::size_t> labels, MetricKind metric, std::size_t classes);

// Same metric from precomputed predictions.
double metric_value(std::span<const std::size_t> predicted, std::span<const std::size_t> labels,
                    MetricKind metric, std::size_t classes);

}  // namespace proda
