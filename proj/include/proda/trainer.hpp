#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "proda/dataio.hpp"
#include "proda/losses.hpp"

namespace proda {

enum class Ablation { None, NoUpper, NoPosDiv, NoSemOrth };

std::string_view to_string(Ablation a);
Ablation ablation_from_string(std::string_view s);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t image_batch = 20;
  std::size_t prompt_batch = 4;
  double base_lr = 0.001;
  // lr at step 0 is base_lr * image_batch / lr_batch_divisor.
  double lr_batch_divisor = 5.0;
  double momentum = 0.9;
  std::size_t prompts = 32;
  std::size_t prompt_length = 16;
  std::uint64_t seed = 0;
  LossConfig loss;
  bool no_upper = false;
  bool no_pos_div = false;
  bool no_sem_orth = false;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

void validate_config(const TrainConfig& config);

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double upper = 0.0;  // L_upper, or the ensemble/single cross-entropy
  double so = 0.0;     // L_so, logged even when excluded from the gradient
};

struct TrainHistory {
  std::vector<StepLog> steps;
  PromptCollection prompts;
  std::size_t steps_per_epoch = 0;
};

double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& config);

// v <- momentum * v + g; theta <- theta - lr * v.
void sgd_momentum_step(std::span<Tensor> params, std::span<const Tensor> grads,
                       std::span<Tensor> velocity, double lr, double momentum);

TrainHistory train_proda(const FewShotTask& task, const TextEncoder& encoder,
                         const TrainConfig& config);

// One prompt trained with plain cross-entropy under the same schedule.
TrainHistory train_coop_baseline(const FewShotTask& task, const TextEncoder& encoder,
                                 TrainConfig config);

TrainHistory run_ablation(const FewShotTask& task, const TextEncoder& encoder,
                          TrainConfig config, Ablation variant);

// Weight distribution of a trained collection over the task's classes.
WeightSamples collection_weights(const TextEncoder& encoder, const PromptCollection& prompts,
                                 const FewShotTask& task);

struct LinearProbeConfig {
  double l2 = 1e-3;
  double lr = 1.0;
  std::size_t iterations = 500;
};

struct LinearProbe {
  Tensor weights;  // C x d
  Tensor bias;     // 1 x C
  double train_accuracy = 0.0;
  double final_loss = 0.0;

  std::size_t predict(std::span<const double> z) const;
};

// Multinomial logistic regression on frozen features, full-batch gradient
// descent on mean cross-entropy + (l2 / 2) ||W||^2. The bias is not penalized.
LinearProbe train_linear_probe(const FewShotTask& task, const LinearProbeConfig& config);

}  // namespace proda
