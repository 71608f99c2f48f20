#include <gtest/gtest.h>

#include <cmath>

#include "proda/inference.hpp"
#include "test_util.hpp"

using namespace proda;
using proda::testing::random_unit_rows;

namespace {

WeightSamples samples_of(Rng& rng, std::size_t B, std::size_t C, std::size_t d) {
  WeightSamples s;
  for (std::size_t b = 0; b < B; ++b) {
    s.per_prompt.push_back(random_unit_rows(rng, C, d));
    s.prompt_index.push_back(b);
  }
  return s;
}

WeightDistribution fit(const WeightSamples& s, CovMode mode) {
  LossConfig cfg;
  cfg.cov_mode = mode;
  return estimate_distribution(s, cfg);
}

}  // namespace

TEST(Score, SoftmaxOfScaledDots) {
  const Tensor w = Tensor::from_rows({{1, 0}, {0, 1}, {-1, 0}});
  const double z[] = {0.6, 0.8};
  const auto p = score(z, w, 0.5);
  const double a = std::exp(1.2), b = std::exp(1.6), c = std::exp(-1.2);
  EXPECT_NEAR(p.probs[0], a / (a + b + c), 1e-15);
  EXPECT_NEAR(p.probs[1], b / (a + b + c), 1e-15);
  EXPECT_NEAR(p.probs[2], c / (a + b + c), 1e-15);
  EXPECT_EQ(p.label, 1u);
  EXPECT_THROW(score(std::span<const double>(z, 1), w, 0.5), ShapeError);
  EXPECT_THROW(score(z, w, 0.0), InvalidArgument);
}

TEST(Score, TiesGoToTheLowestIndex) {
  const Tensor w = Tensor::from_rows({{0, 1}, {1, 0}, {1, 0}});
  const double z[] = {1, 0};
  EXPECT_EQ(score(z, w, 1.0).label, 1u);
  const double flat[] = {0.0, 0.0};
  EXPECT_EQ(score(flat, w, 1.0).label, 0u);
  const double v[] = {3, 3, 1};
  EXPECT_EQ(argmax(v), 0u);
}

TEST(Score, TinyTemperatureIsOneHot) {
  const Tensor w = Tensor::from_rows({{0.6, 0.8}, {0.8, 0.6}});
  const double z[] = {1, 0};
  const auto p = score(z, w, 1e-4);
  EXPECT_EQ(p.label, 1u);
  EXPECT_EQ(p.probs[1], 1.0);
  EXPECT_GE(p.probs[0], 0.0);
  EXPECT_LT(p.probs[0], 1e-300);
}

TEST(PredictMean, UsesMuAsIs) {
  Rng rng(1);
  auto s = samples_of(rng, 4, 3, 5);
  auto dist = fit(s, CovMode::DiagonalBlocks);
  const Tensor z = random_unit_rows(rng, 1, 5);
  const auto a = predict_mean(dist, z.data(), 0.1);
  const auto b = score(z.data(), dist.mu, 0.1);
  EXPECT_EQ(a.probs, b.probs);
}

TEST(PredictMc, ZeroCovarianceMatchesMean) {
  Rng rng(2);
  auto s = samples_of(rng, 1, 4, 6);
  const Tensor z = random_unit_rows(rng, 10, 6);
  for (auto mode : {CovMode::DiagonalBlocks, CovMode::FullBlocks}) {
    auto dist = fit(s, mode);
    MonteCarloPredictor gauss(dist, nullptr, 0.05, 50, McMode::Gaussian, 3);
    MonteCarloPredictor emp(dist, &s, 0.05, 50, McMode::Empirical, 3);
    for (std::size_t i = 0; i < 10; ++i) {
      const auto m = predict_mean(dist, z.row_span(i), 0.05);
      EXPECT_EQ(gauss.predict(z.row_span(i)).probs, m.probs);
      EXPECT_EQ(emp.predict(z.row_span(i)).probs, m.probs);
    }
  }
}

TEST(PredictMc, EmpiricalAveragesStoredSamples) {
  Rng rng(4);
  auto s = samples_of(rng, 3, 3, 4);
  auto dist = fit(s, CovMode::FullBlocks);
  const Tensor z = random_unit_rows(rng, 1, 4);
  const auto p = predict_mc(dist, z.data(), 0.2, 60000, McMode::Empirical, 5, &s);
  std::vector<double> ref(3, 0.0);
  for (auto& w : s.per_prompt) {
    auto q = score(z.data(), w, 0.2);
    for (int c = 0; c < 3; ++c) ref[c] += q.probs[c] / 3.0;
  }
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(p.probs[c], ref[c], 0.01);
  EXPECT_THROW(predict_mc(dist, z.data(), 0.2, 10, McMode::Empirical, 5), InvalidArgument);
}

TEST(PredictMc, ProbabilitiesSumToOneAndDeterministic) {
  Rng rng(6);
  auto s = samples_of(rng, 5, 4, 3);
  auto dist = fit(s, CovMode::DiagonalBlocks);
  const Tensor z = random_unit_rows(rng, 1, 3);
  const auto a = predict_mc(dist, z.data(), 0.1, 500, McMode::Gaussian, 9);
  const auto b = predict_mc(dist, z.data(), 0.1, 500, McMode::Gaussian, 9);
  EXPECT_EQ(a.probs, b.probs);
  double total = 0.0;
  for (double v : a.probs) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Ensemble, DuplicatesCollapseToOneSet) {
  Rng rng(7);
  const Tensor w = random_unit_rows(rng, 4, 5);
  const std::vector<Tensor> sets(3, w);
  const Tensor e = ensemble_weights(sets);
  EXPECT_LT(proda::testing::max_abs_diff(e, w), 1e-15);
  const Tensor z = random_unit_rows(rng, 1, 5);
  const auto a = zero_shot_ensemble(sets, z.data(), 0.1);
  const auto b = zero_shot_ensemble(sets, z.data(), 0.1, true);
  const auto c = score(z.data(), w, 0.1);
  for (int k = 0; k < 4; ++k) {
    EXPECT_NEAR(a.probs[k], c.probs[k], 1e-14);
    EXPECT_NEAR(b.probs[k], c.probs[k], 1e-14);
  }
}

TEST(Ensemble, NormalizesTheAverage) {
  const std::vector<Tensor> sets = {Tensor::from_rows({{1, 0}}), Tensor::from_rows({{0, 1}})};
  const Tensor e = ensemble_weights(sets);
  EXPECT_NEAR(e(0, 0), 1 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(e(0, 1), 1 / std::sqrt(2.0), 1e-15);
  const std::vector<Tensor> opposite = {Tensor::from_rows({{1, 0}}), Tensor::from_rows({{-1, 0}})};
  EXPECT_THROW(ensemble_weights(opposite), NumericError);
}

TEST(Metric, AccuracyVersusMeanPerClass) {
  // 90 examples of class 0 all right, 10 of class 1 all wrong.
  std::vector<std::size_t> labels(100, 0), predicted(100, 0);
  for (int i = 90; i < 100; ++i) labels[i] = 1;
  EXPECT_DOUBLE_EQ(metric_value(predicted, labels, MetricKind::Accuracy, 2), 0.9);
  EXPECT_DOUBLE_EQ(metric_value(predicted, labels, MetricKind::MeanPerClass, 2), 0.5);
  EXPECT_THROW(metric_value(predicted, labels, MetricKind::MeanPerClass, 3), InvalidArgument);
  EXPECT_NO_THROW(metric_value(predicted, labels, MetricKind::Accuracy, 3));
  EXPECT_EQ(metric_from_string("mean-per-class"), MetricKind::MeanPerClass);
  EXPECT_THROW(metric_from_string("top5"), InvalidArgument);
}

TEST(Metric, RandomPredictorNearChance) {
  Rng rng(8);
  const std::size_t C = 10, n = 20000;
  Tensor z(n, 1);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % C;
  Rng guess(9);
  const double acc = evaluate([&](std::span<const double>) { return guess.below(C); }, z, labels,
                              MetricKind::Accuracy, C);
  EXPECT_NEAR(acc, 0.1, 0.01);
}
