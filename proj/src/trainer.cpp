#include "proda/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace proda {

std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::None: return "none";
    case Ablation::NoUpper: return "no_upper";
    case Ablation::NoPosDiv: return "no_pos_div";
    case Ablation::NoSemOrth: return "no_sem_orth";
  }
  return "none";
}

Ablation ablation_from_string(std::string_view s) {
  if (s == "no_upper") return Ablation::NoUpper;
  if (s == "no_pos_div") return Ablation::NoPosDiv;
  if (s == "no_sem_orth") return Ablation::NoSemOrth;
  throw InvalidArgument("unknown ablation '" + std::string(s) +
                        "' (use no_upper|no_pos_div|no_sem_orth)");
}

void validate_config(const TrainConfig& c) {
  if (c.epochs < 1) throw InvalidArgument("epochs must be >= 1");
  if (c.image_batch < 1) throw InvalidArgument("image batch must be >= 1");
  if (c.prompts < 1) throw InvalidArgument("prompt count must be >= 1");
  if (c.prompt_length < 1) throw InvalidArgument("prompt length must be >= 1");
  if (c.prompt_batch < 1 || c.prompt_batch > c.prompts) {
    throw InvalidArgument("prompt batch must be in [1, K]");
  }
  if (!(c.base_lr > 0.0) || !(c.lr_batch_divisor > 0.0)) throw InvalidArgument("lr must be > 0");
  if (c.momentum < 0.0 || c.momentum >= 1.0) throw InvalidArgument("momentum must be in [0, 1)");
  if (!(c.loss.tau > 0.0)) throw InvalidArgument("tau must be > 0");
  if (c.loss.lambda < 0.0) throw InvalidArgument("lambda must be >= 0");
  if (c.loss.estimator == Estimator::Unbiased && c.prompt_batch < 2 && !c.no_upper) {
    throw InvalidArgument("unbiased covariance needs a prompt batch of at least 2");
  }
  if (c.clip_norm < 0.0) throw InvalidArgument("clip norm must be >= 0");
}

double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& config) {
  if (total_steps == 0 || step >= total_steps) throw InvalidArgument("step outside the schedule");
  const double peak = config.base_lr * static_cast<double>(config.image_batch) / config.lr_batch_divisor;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void sgd_momentum_step(std::span<Tensor> params, std::span<const Tensor> grads,
                       std::span<Tensor> velocity, double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd: params, grads and velocity must align");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].same_shape(grads[i]) || !params[i].same_shape(velocity[i])) {
      throw ShapeError("sgd: shape mismatch at parameter " + std::to_string(i));
    }
    if (!grads[i].all_finite()) throw NumericError("sgd: non-finite gradient");
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      velocity[i][k] = momentum * velocity[i][k] + grads[i][k];
      params[i][k] -= lr * velocity[i][k];
    }
  }
}

namespace {

enum class Objective { Upper, EnsembleCE };

// Seed offset separating step sampling from prompt initialization.
constexpr std::uint64_t kSamplingStream = 0x5bd1e9955bd1e995ull;

TrainHistory train_prompts(const FewShotTask& task, const TextEncoder& encoder,
                           const TrainConfig& config, Objective objective) {
  validate_config(config);
  validate_task(task);
  if (!task.trainable()) throw DataError("task has no class-name tokens or encoder to train with");
  if (task.train_labels.empty()) throw DataError("task has no training examples");
  if (encoder.output_dim() != task.dim()) throw DataError("encoder output dim != feature dim");

  TrainHistory history;
  history.prompts = init_prompt_collection(config.prompts, config.prompt_length,
                                           encoder.input_dim(), config.seed);
  if (config.no_pos_div) set_all_positions(history.prompts, Position::End);
  std::vector<Tensor> velocity(config.prompts,
                               Tensor(config.prompt_length, encoder.input_dim()));

  const std::size_t M = task.train_labels.size();
  const std::size_t per_epoch = (M + config.image_batch - 1) / config.image_batch;
  const std::size_t total = per_epoch * config.epochs;
  history.steps_per_epoch = per_epoch;
  const double lambda = config.no_sem_orth ? 0.0 : config.loss.lambda;

  Rng rng(config.seed ^ kSamplingStream);
  std::vector<std::size_t> order(M);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t s = 0; s < per_epoch; ++s, ++step) {
      const std::size_t begin = s * config.image_batch;
      const std::size_t end = std::min(M, begin + config.image_batch);
      Batch batch{Tensor(end - begin, task.dim()), {}};
      for (std::size_t i = begin; i < end; ++i) {
        auto src = task.train_z.row_span(order[i]);
        std::copy(src.begin(), src.end(), batch.z.row_span(i - begin).begin());
        batch.labels.push_back(task.train_labels[order[i]]);
      }
      const auto chosen = rng.sample_without_replacement(config.prompts, config.prompt_batch);
      const double lr = lr_schedule(step, total, config);

      Tape tape;
      BoundEncoder bound = encoder.bind(tape);
      std::vector<Var> leaves;
      std::vector<Position> positions;
      for (std::size_t k : chosen) {
        leaves.push_back(tape.leaf(history.prompts.prompts[k].tokens));
        positions.push_back(history.prompts.prompts[k].position);
      }

      StepLog log{epoch, step, lr, 0.0, 0.0, 0.0};
      std::vector<Tensor> grads;
      try {
        const auto weights = generate_weights(bound, leaves, positions, task.name_tokens);
        Var upper;
        if (objective == Objective::EnsembleCE) {
          upper = ensemble_ce_loss(weights, batch, config.loss.tau);
        } else {
          const auto dist = estimate_distribution(tape, weights, config.loss.cov_mode,
                                                  config.loss.estimator);
          upper = surrogate_loss(dist, batch, config.loss.tau);
        }
        Var so = tape.constant(Tensor::scalar(0.0));
        if (leaves.size() >= 2) {
          std::vector<Var> emb;
          for (const Var& p : leaves) emb.push_back(encode_prompt_semantic(bound, p));
          so = semantic_orthogonality_loss(diff::concat_rows(emb));
        }
        Var loss = lambda == 0.0 ? upper : upper + so * lambda;
        log.loss = loss.value().item();
        log.upper = upper.value().item();
        log.so = so.value().item();
        if (!std::isfinite(log.loss)) throw NumericError("non-finite loss");
        grads = diff::grad(loss, leaves);
      } catch (const NumericError& e) {
        double largest = 0.0;
        for (const auto& p : history.prompts.prompts)
          for (double v : p.tokens.data()) largest = std::max(largest, std::abs(v));
        std::ostringstream msg;
        msg << e.what() << " (epoch " << epoch << ", step " << step << ", lr " << lr
            << ", tau " << config.loss.tau << ", max |prompt entry| " << largest << ")";
        throw NumericError(msg.str());
      }

      if (config.clip_norm > 0.0) {
        double sq = 0.0;
        for (const Tensor& g : grads)
          for (double v : g.data()) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > config.clip_norm) {
          for (Tensor& g : grads)
            for (double& v : g.data()) v *= config.clip_norm / norm;
        }
      }

      std::vector<Tensor> params, vel;
      for (std::size_t k : chosen) {
        params.push_back(std::move(history.prompts.prompts[k].tokens));
        vel.push_back(std::move(velocity[k]));
      }
      sgd_momentum_step(params, grads, vel, lr, config.momentum);
      for (std::size_t j = 0; j < chosen.size(); ++j) {
        history.prompts.prompts[chosen[j]].tokens = std::move(params[j]);
        velocity[chosen[j]] = std::move(vel[j]);
      }
      history.steps.push_back(log);
    }
  }
  return history;
}

}  // namespace

TrainHistory train_proda(const FewShotTask& task, const TextEncoder& encoder,
                         const TrainConfig& config) {
  return train_prompts(task, encoder, config,
                       config.no_upper ? Objective::EnsembleCE : Objective::Upper);
}

TrainHistory train_coop_baseline(const FewShotTask& task, const TextEncoder& encoder,
                                 TrainConfig config) {
  config.prompts = 1;
  config.prompt_batch = 1;
  config.loss.lambda = 0.0;
  return train_prompts(task, encoder, config, Objective::EnsembleCE);
}

TrainHistory run_ablation(const FewShotTask& task, const TextEncoder& encoder,
                          TrainConfig config, Ablation variant) {
  switch (variant) {
    case Ablation::None: break;
    case Ablation::NoUpper: config.no_upper = true; break;
    case Ablation::NoPosDiv: config.no_pos_div = true; break;
    case Ablation::NoSemOrth: config.no_sem_orth = true; break;
  }
  return train_proda(task, encoder, config);
}

WeightSamples collection_weights(const TextEncoder& encoder, const PromptCollection& prompts,
                                 const FewShotTask& task) {
  return generate_weights(encoder, prompts, task.name_tokens);
}

// ---------------------------------------------------------------------------

std::size_t LinearProbe::predict(std::span<const double> z) const {
  std::vector<double> logits(weights.rows());
  for (std::size_t c = 0; c < weights.rows(); ++c) {
    auto w = weights.row_span(c);
    double s = bias[c];
    for (std::size_t k = 0; k < z.size(); ++k) s += z[k] * w[k];
    logits[c] = s;
  }
  return argmax(logits);
}

LinearProbe train_linear_probe(const FewShotTask& task, const LinearProbeConfig& config) {
  validate_task(task);
  if (task.train_labels.empty()) throw DataError("task has no training examples");
  if (config.l2 < 0.0 || !(config.lr > 0.0)) throw InvalidArgument("bad linear-probe config");
  const std::size_t C = task.classes(), d = task.dim();
  LinearProbe probe{Tensor(C, d), Tensor(1, C), 0.0, 0.0};
  Tensor onehot(task.train_labels.size(), C);
  for (std::size_t i = 0; i < task.train_labels.size(); ++i) onehot(i, task.train_labels[i]) = 1.0;

  std::vector<Tensor> params{probe.weights, probe.bias};
  std::vector<Tensor> velocity{Tensor(C, d), Tensor(1, C)};
  for (std::size_t it = 0; it <= config.iterations; ++it) {
    Tape tape;
    Var w = tape.leaf(params[0]);
    Var b = tape.leaf(params[1]);
    Var logits = diff::matmul(tape.constant(task.train_z), diff::transpose(w)) + b;
    Var target = diff::sum(logits * tape.constant(onehot), diff::Axis::Cols);
    Var loss = diff::mean(diff::logsumexp(logits, diff::Axis::Cols) - target);
    if (config.l2 > 0.0) loss = loss + diff::sum(diff::square(w)) * (config.l2 / 2.0);
    probe.final_loss = loss.value().item();
    if (it == config.iterations) break;
    const Var vars[] = {w, b};
    const auto grads = diff::grad(loss, vars);
    sgd_momentum_step(params, grads, velocity, config.lr, 0.0);
  }
  probe.weights = params[0];
  probe.bias = params[1];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < task.train_labels.size(); ++i) {
    correct += probe.predict(task.train_z.row_span(i)) == task.train_labels[i];
  }
  probe.train_accuracy = static_cast<double>(correct) / static_cast<double>(task.train_labels.size());
  return probe;
}

}  // namespace proda
