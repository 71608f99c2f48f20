#include "proda/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "proda/trainer.hpp"

namespace proda {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

std::vector<unsigned long long> parse_index_list(const std::string& text) {
  std::vector<unsigned long long> out;
  std::stringstream ss(text);
  std::string part;
  auto number = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("bad list entry '" + s + "' in '" + text + "'");
    }
    return std::stoull(s);
  };
  while (std::getline(ss, part, ',')) {
    const auto dots = part.find("..");
    if (dots == std::string::npos) {
      out.push_back(number(part));
      continue;
    }
    const auto lo = number(part.substr(0, dots)), hi = number(part.substr(dots + 2));
    if (hi < lo) throw UsageError("empty range '" + part + "'");
    for (auto v = lo; v <= hi; ++v) out.push_back(v);
  }
  if (out.empty()) throw UsageError("empty list '" + text + "'");
  return out;
}

unsigned thread_count_from_env() {
  const char* v = std::getenv("PRODA_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError("PRODA_THREADS must be a positive integer");
  return static_cast<unsigned>(std::min<long>(n, 256));
}

namespace {

struct CommonTrain {
  std::size_t prompts = 32;
  std::size_t prompt_len = 16;
  std::size_t prompt_batch = 4;
  std::size_t epochs = 100;
  std::size_t image_batch = 20;
  double lr = 0.001;
  double momentum = 0.9;
  double lambda = 0.1;
  double tau = 0.01;
  std::string cov = "diag";
  std::string estimator = "ml";
  double clip = 0.0;
  double l2 = 1e-3;
  std::size_t probe_iters = 500;
  std::uint64_t seed = 0;

  void add_to(CLI::App& app) {
    app.add_option("--prompts", prompts, "Prompt collection size K")->capture_default_str();
    app.add_option("--prompt-len", prompt_len, "Prompt length p")->capture_default_str();
    app.add_option("--prompt-batch", prompt_batch, "Prompts sampled per step B_P")->capture_default_str();
    app.add_option("--epochs", epochs, "Training epochs")->capture_default_str();
    app.add_option("--image-batch", image_batch, "Image batch B_x")->capture_default_str();
    app.add_option("--lr", lr, "Base learning rate")->capture_default_str();
    app.add_option("--momentum", momentum, "SGD momentum")->capture_default_str();
    app.add_option("--lambda", lambda, "Weight of the orthogonality loss")->capture_default_str();
    app.add_option("--tau", tau, "Softmax temperature")->capture_default_str();
    app.add_option("--cov", cov, "Covariance mode")->check(CLI::IsMember({"diag", "full"}))->capture_default_str();
    app.add_option("--estimator", estimator, "Covariance estimator")
        ->check(CLI::IsMember({"ml", "unbiased"}))
        ->capture_default_str();
    app.add_option("--clip", clip, "Gradient norm clip (0 = off)")->capture_default_str();
    app.add_option("--l2", l2, "Linear-probe L2 strength")->capture_default_str();
    app.add_option("--probe-iters", probe_iters, "Linear-probe iterations")->capture_default_str();
  }

  TrainConfig config(std::uint64_t run_seed) const {
    TrainConfig c;
    c.prompts = prompts;
    c.prompt_length = prompt_len;
    c.prompt_batch = prompt_batch;
    c.epochs = epochs;
    c.image_batch = image_batch;
    c.base_lr = lr;
    c.momentum = momentum;
    c.loss.lambda = lambda;
    c.loss.tau = tau;
    c.loss.cov_mode = cov_mode_from_string(cov);
    c.loss.estimator = estimator_from_string(estimator);
    c.clip_norm = clip;
    c.seed = run_seed;
    return c;
  }
};

Json config_json(const TrainConfig& c) {
  return Json{{"prompts", c.prompts},
              {"prompt_len", c.prompt_length},
              {"prompt_batch", c.prompt_batch},
              {"epochs", c.epochs},
              {"image_batch", c.image_batch},
              {"base_lr", c.base_lr},
              {"lr_batch_divisor", c.lr_batch_divisor},
              {"momentum", c.momentum},
              {"lambda", c.loss.lambda},
              {"tau", c.loss.tau},
              {"cov", std::string(to_string(c.loss.cov_mode))},
              {"estimator", std::string(to_string(c.loss.estimator))},
              {"clip", c.clip_norm},
              {"seed", c.seed},
              {"no_upper", c.no_upper},
              {"no_pos_div", c.no_pos_div},
              {"no_sem_orth", c.no_sem_orth}};
}

struct Method {
  enum Kind { Proda, Coop, LinearProbe, Ablate, ZeroShot } kind = Proda;
  Ablation ablation = Ablation::None;
  std::string name;
};

Method parse_method(const std::string& s, bool allow_zeroshot) {
  Method m;
  m.name = s;
  if (s == "proda") m.kind = Method::Proda;
  else if (s == "coop") m.kind = Method::Coop;
  else if (s == "linear-probe") m.kind = Method::LinearProbe;
  else if (allow_zeroshot && s == "zeroshot") m.kind = Method::ZeroShot;
  else if (s.rfind("ablation:", 0) == 0) {
    m.kind = Method::Ablate;
    try {
      m.ablation = ablation_from_string(s.substr(9));
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
  } else {
    throw UsageError("unknown method '" + s + "'");
  }
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Json history_json(const TrainHistory& h) {
  Json steps = Json::array();
  for (const StepLog& s : h.steps) {
    steps.push_back(Json{{"epoch", s.epoch}, {"step", s.step}, {"lr", s.lr}, {"loss", s.loss},
                         {"upper", s.upper}, {"so", s.so}});
  }
  const auto hist = h.prompts.histogram();
  return Json{{"steps_per_epoch", h.steps_per_epoch},
              {"positions", {{"front", hist.front}, {"middle", hist.middle}, {"end", hist.end}}},
              {"trace", steps}};
}

Tensor mean_weights(const WeightSamples& samples) {
  return estimate_distribution(samples, LossConfig{}).mu;
}

double accuracy_of(const FewShotTask& task, const PredictFn& fn) {
  return evaluate(fn, task.test_z, task.test_labels, task.metric, task.classes());
}

double score_accuracy(const FewShotTask& task, const Tensor& weights, double tau) {
  return accuracy_of(task, [&](std::span<const double> z) { return score(z, weights, tau).label; });
}

TextEncoder task_encoder(const FewShotTask& task) {
  if (!task.encoder) throw DataError("task has no encoder description");
  return TextEncoder(*task.encoder);
}

WeightSamples empty_prompt_weights(const TextEncoder& enc, const FewShotTask& task,
                                   std::size_t prompt_len) {
  PromptCollection empty;
  empty.prompts.push_back(empty_prompt(prompt_len, enc.input_dim()));
  return generate_weights(enc, empty, task.name_tokens);
}

struct MethodResult {
  double metric = 0.0;
  std::optional<TrainHistory> history;
  std::optional<LinearProbe> probe;
};

// Trains (if needed) and evaluates with mean inference.
MethodResult run_method(const FewShotTask& task, const Method& method, const TrainConfig& cfg,
                        const LinearProbeConfig& probe_cfg) {
  MethodResult r;
  if (method.kind == Method::LinearProbe) {
    r.probe = train_linear_probe(task, probe_cfg);
    const LinearProbe& p = *r.probe;
    r.metric = accuracy_of(task, [&](std::span<const double> z) { return p.predict(z); });
    return r;
  }
  const TextEncoder enc = task_encoder(task);
  if (method.kind == Method::ZeroShot) {
    if (task.trainable()) {
      r.metric = score_accuracy(task, mean_weights(empty_prompt_weights(enc, task, cfg.prompt_length)),
                                cfg.loss.tau);
    } else if (!task.class_weights.empty()) {
      r.metric = score_accuracy(task, task.class_weights.front(), cfg.loss.tau);
    } else {
      throw DataError("zero-shot needs name tokens or class_weights");
    }
    return r;
  }
  switch (method.kind) {
    case Method::Coop: r.history = train_coop_baseline(task, enc, cfg); break;
    case Method::Ablate: r.history = run_ablation(task, enc, cfg, method.ablation); break;
    default: r.history = train_proda(task, enc, cfg); break;
  }
  const auto dist = estimate_distribution(collection_weights(enc, r.history->prompts, task), cfg.loss);
  r.metric = accuracy_of(task, [&](std::span<const double> z) {
    return predict_mean(dist, z, cfg.loss.tau).label;
  });
  return r;
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()));
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::ostringstream out;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    for (std::size_t i = 0; i < rows[k].size(); ++i) {
      out << (i ? "  " : "") << std::setw(static_cast<int>(width[i]))
          << (i == 0 ? std::left : std::right) << rows[k][i];
    }
    out << "\n";
    if (k == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out << std::string(total - 2, '-') << "\n";
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------

struct Context {
  fs::path workdir = ".";
  std::ostream* out = nullptr;
  bool timing = false;
  bool table = false;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : workdir / path;
  }
};

void emit(const Context& ctx, const Json& report, const std::string& table) {
  if (ctx.table && !table.empty()) {
    *ctx.out << table;
  } else {
    *ctx.out << report.dump(2) << "\n";
  }
}

Json artifacts_json(const std::vector<fs::path>& files, const fs::path& base) {
  Json a = Json::object();
  for (const auto& f : files) a[fs::relative(f, base).generic_string()] = sha256_file(f);
  return a;
}

// gen -----------------------------------------------------------------------

struct GenArgs {
  std::size_t classes = 10, shots = 1, dim = 32, test_per_class = 100;
  double noise = 0.6;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> encoder_seed;
  std::string out = "task";
  std::string encoder_kind = "mean-pool-mlp";
  std::size_t input_dim = 16, hidden_dim = 64;
  double gain = 14.0;
  std::string dtype = "f64";
  std::string metric = "accuracy";
};

FewShotTask make_synthetic(const GenArgs& g, std::uint64_t seed) {
  EncoderConfig ec;
  ec.kind = encoder_kind_from_string(g.encoder_kind);
  ec.input_dim = g.input_dim;
  ec.hidden_dim = g.hidden_dim;
  ec.output_dim = g.dim;
  ec.gain = g.gain;
  ec.weight_seed = g.encoder_seed.value_or(seed);
  const TextEncoder enc(ec);
  SyntheticSpec spec;
  spec.classes = g.classes;
  spec.shots = g.shots;
  spec.dim = g.dim;
  spec.noise_sigma = g.noise;
  spec.seed = seed;
  spec.test_per_class = g.test_per_class;
  FewShotTask task = gen_synthetic_task(spec, enc);
  task.metric = metric_from_string(g.metric);
  return task;
}

void add_gen_options(CLI::App& app, GenArgs& g) {
  app.add_option("--classes", g.classes, "Number of classes")->capture_default_str();
  app.add_option("--dim", g.dim, "Embedding dim d")->capture_default_str();
  app.add_option("--noise", g.noise, "Image noise sigma")->capture_default_str();
  app.add_option("--test-per-class", g.test_per_class, "Test images per class")->capture_default_str();
  app.add_option("--encoder", g.encoder_kind, "Encoder kind")
      ->check(CLI::IsMember({"mean-pool-mlp", "single-attention-block"}))
      ->capture_default_str();
  app.add_option("--token-dim", g.input_dim, "Token dim e")->capture_default_str();
  app.add_option("--hidden", g.hidden_dim, "Encoder hidden dim")->capture_default_str();
  app.add_option("--gain", g.gain, "Encoder first-layer gain")->capture_default_str();
  app.add_option("--metric", g.metric, "Task metric")
      ->check(CLI::IsMember({"accuracy", "mean-per-class"}))
      ->capture_default_str();
}

int cmd_gen(const Context& ctx, const GenArgs& g) {
  if (g.shots < 1) throw UsageError("--shots must be >= 1");
  if (g.classes < 2) throw UsageError("--classes must be >= 2");
  const FewShotTask task = make_synthetic(g, g.seed);
  const fs::path dir = ctx.resolve(g.out);
  const auto manifest = save_task(task, dir, g.dtype == "f32" ? DType::F32 : DType::F64);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Json report{{"command", "gen"},
              {"prng", std::string(Rng::kAlgorithm)},
              {"config",
               {{"classes", g.classes}, {"shots", g.shots}, {"dim", g.dim}, {"noise", g.noise},
                {"seed", g.seed}, {"task_seed", task.seed}, {"test_per_class", g.test_per_class}}},
              {"manifest", fs::relative(manifest, ctx.workdir).generic_string()},
              {"artifacts", artifacts_json(files, ctx.workdir)}};
  emit(ctx, report, "");
  return kExitOk;
}

// train ---------------------------------------------------------------------

struct TrainArgs {
  std::string task = "task/task.json";
  std::string method = "proda";
  std::string out = "run";
  std::optional<std::size_t> shots;
  CommonTrain common;
};

int cmd_train(const Context& ctx, const TrainArgs& a) {
  const Method method = parse_method(a.method, false);
  const FewShotTask task = load_task(ctx.resolve(a.task), a.shots);
  TrainConfig cfg = a.common.config(a.common.seed);
  if (method.kind == Method::Coop) {
    cfg.prompts = 1;
    cfg.prompt_batch = 1;
    cfg.loss.lambda = 0.0;
  }
  if (method.kind == Method::Ablate) {
    cfg.no_upper = method.ablation == Ablation::NoUpper;
    cfg.no_pos_div = method.ablation == Ablation::NoPosDiv;
    cfg.no_sem_orth = method.ablation == Ablation::NoSemOrth;
  }
  const LinearProbeConfig probe_cfg{a.common.l2, 1.0, a.common.probe_iters};
  const auto t0 = std::chrono::steady_clock::now();
  const MethodResult r = run_method(task, method, cfg, probe_cfg);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path dir = ctx.resolve(a.out);
  fs::create_directories(dir);
  std::vector<fs::path> files;
  Json report{{"command", "train"},
              {"method", method.name},
              {"task", a.task},
              {"prng", std::string(Rng::kAlgorithm)},
              {"config", config_json(cfg)},
              {"metric", std::string(to_string(task.metric))},
              {"test_metric", r.metric}};
  if (r.history) {
    std::vector<Tensor> tokens;
    std::vector<std::size_t> positions;
    for (const auto& p : r.history->prompts.prompts) {
      tokens.push_back(p.tokens);
      positions.push_back(static_cast<std::size_t>(p.position));
    }
    files.push_back(dir / "prompts.pdle");
    write_embedding(files.back(), make_stored(tokens, DType::F64));
    files.push_back(dir / "positions.pdle");
    write_embedding(files.back(), make_labels(positions));
    report["history"] = history_json(*r.history);
  }
  if (r.probe) {
    files.push_back(dir / "probe_weights.pdle");
    write_embedding(files.back(), r.probe->weights, DType::F64);
    files.push_back(dir / "probe_bias.pdle");
    write_embedding(files.back(), r.probe->bias, DType::F64);
    report["probe"] = {{"l2", probe_cfg.l2},
                       {"iterations", probe_cfg.iterations},
                       {"train_accuracy", r.probe->train_accuracy},
                       {"final_loss", r.probe->final_loss}};
  }
  report["artifacts"] = artifacts_json(files, ctx.workdir);
  if (ctx.timing) report["wall_clock_seconds"] = seconds;
  write_text(dir / "report.json", report.dump(2) + "\n");
  emit(ctx, report,
       render_table({{"method", "metric", "value"},
                     {method.name, std::string(to_string(task.metric)), fixed(r.metric, 4)}}));
  return kExitOk;
}

// eval ----------------------------------------------------------------------

struct EvalArgs {
  std::string task = "task/task.json";
  std::optional<std::string> run;
  std::string infer = "mean";
  std::size_t draws = 1000;
  std::string mode = "gaussian";
  std::optional<std::string> metric;
  std::optional<std::string> dump_weights;
  std::optional<double> tau;
  std::optional<std::string> cov;
  std::uint64_t seed = 0;
  bool mean_of_softmax = false;
  std::size_t prompt_len = 16;
};

PromptCollection load_prompts(const fs::path& run_dir) {
  const auto tokens = read_embedding(run_dir / "prompts.pdle").to_slices();
  const auto positions = read_embedding(run_dir / "positions.pdle").to_labels();
  if (tokens.size() != positions.size()) throw DataError("prompts and positions disagree in count");
  PromptCollection c;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (positions[k] > 2) throw DataError("bad position code");
    c.prompts.push_back(Prompt{tokens[k], static_cast<Position>(positions[k])});
  }
  return c;
}

int cmd_eval(const Context& ctx, const EvalArgs& a) {
  FewShotTask task = load_task(ctx.resolve(a.task));
  if (a.metric) task.metric = metric_from_string(*a.metric);
  LossConfig loss;
  Json run_config;
  if (a.run) {
    const auto bytes = read_file(ctx.resolve(*a.run) / "report.json");
    run_config = Json::parse(bytes.begin(), bytes.end()).at("config");
    loss.tau = run_config.at("tau").get<double>();
    loss.cov_mode = cov_mode_from_string(run_config.at("cov").get<std::string>());
    loss.estimator = estimator_from_string(run_config.at("estimator").get<std::string>());
  }
  if (a.tau) loss.tau = *a.tau;
  if (a.cov) loss.cov_mode = cov_mode_from_string(*a.cov);
  if (!(loss.tau > 0.0)) throw UsageError("--tau must be > 0");

  // Weight samples: trained prompts, exported prompt sets, or the empty prompt.
  WeightSamples samples;
  std::string source;
  if (a.run) {
    const TextEncoder enc = task_encoder(task);
    samples = collection_weights(enc, load_prompts(ctx.resolve(*a.run)), task);
    source = "prompts";
  } else if (!task.class_weights.empty()) {
    samples.per_prompt = task.class_weights;
    for (std::size_t i = 0; i < samples.per_prompt.size(); ++i) samples.prompt_index.push_back(i);
    source = "class_weights";
  } else if (task.trainable()) {
    samples = empty_prompt_weights(task_encoder(task), task, a.prompt_len);
    source = "empty_prompt";
  } else {
    throw DataError("nothing to evaluate: pass --run or use a task with class_weights");
  }
  if (loss.estimator == Estimator::Unbiased && samples.count() < 2) loss.estimator = Estimator::ML;

  double value = 0.0;
  Json detail;
  if (a.infer == "mean") {
    const auto dist = estimate_distribution(samples, loss);
    value = accuracy_of(task, [&](std::span<const double> z) { return predict_mean(dist, z, loss.tau).label; });
  } else if (a.infer == "mc") {
    if (a.draws < 1) throw UsageError("--draws must be >= 1");
    const auto dist = estimate_distribution(samples, loss);
    const McMode mode = mc_mode_from_string(a.mode);
    const MonteCarloPredictor mc(dist, &samples, loss.tau, a.draws, mode, a.seed);
    value = accuracy_of(task, [&](std::span<const double> z) { return mc.predict(z).label; });
    detail = {{"draws", a.draws}, {"mode", a.mode}, {"seed", a.seed}};
  } else if (a.infer == "ensemble") {
    if (a.mean_of_softmax) {
      value = accuracy_of(task, [&](std::span<const double> z) {
        return zero_shot_ensemble(samples.per_prompt, z, loss.tau, true).label;
      });
    } else {
      const Tensor w = ensemble_weights(samples.per_prompt);
      value = score_accuracy(task, w, loss.tau);
    }
    detail = {{"mean_of_softmax", a.mean_of_softmax}};
  } else {
    value = score_accuracy(task, samples.per_prompt.front(), loss.tau);
  }

  std::vector<fs::path> files;
  if (a.dump_weights) {
    files.push_back(ctx.resolve(*a.dump_weights));
    write_embedding(files.back(), make_stored(samples.per_prompt, DType::F32));
  }
  Json report{{"command", "eval"},
              {"task", a.task},
              {"infer", a.infer},
              {"source", source},
              {"weight_sets", samples.count()},
              {"prng", std::string(Rng::kAlgorithm)},
              {"config",
               {{"tau", loss.tau},
                {"cov", std::string(to_string(loss.cov_mode))},
                {"estimator", std::string(to_string(loss.estimator))}}},
              {"metric", std::string(to_string(task.metric))},
              {"accuracy", value}};
  if (!detail.is_null()) report["infer_options"] = detail;
  if (task.reference_json) {
    try {
      report["reference"] = Json::parse(*task.reference_json);
    } catch (const Json::exception&) {
      report["reference"] = *task.reference_json;
    }
  }
  if (!files.empty()) report["artifacts"] = artifacts_json(files, ctx.workdir);
  emit(ctx, report,
       render_table({{"infer", "metric", "value"},
                     {a.infer, std::string(to_string(task.metric)), fixed(value, 4)}}));
  return kExitOk;
}

// suite ---------------------------------------------------------------------

struct SuiteArgs {
  std::string seeds = "0..19";
  std::string shots = "1";
  std::string methods = "proda,coop,zeroshot";
  std::optional<std::string> k_sweep;
  std::optional<std::string> out;
  GenArgs gen;
  CommonTrain common;
};

struct Cell {
  std::string method;
  std::size_t shots = 0;
  std::optional<std::size_t> k;
  std::uint64_t seed = 0;
  std::optional<double> value;
  std::string error;
};

int cmd_suite(const Context& ctx, const SuiteArgs& a) {
  const auto seeds = parse_index_list(a.seeds);
  const auto shot_list = parse_index_list(a.shots);
  std::vector<Method> methods;
  {
    std::stringstream ss(a.methods);
    std::string m;
    while (std::getline(ss, m, ',')) methods.push_back(parse_method(m, true));
  }
  if (methods.empty() && !a.k_sweep) throw UsageError("--methods is empty");
  std::vector<std::size_t> sweep;
  if (a.k_sweep) {
    for (auto k : parse_index_list(*a.k_sweep)) sweep.push_back(static_cast<std::size_t>(k));
  }
  for (auto s : shot_list) {
    if (s < 1) throw UsageError("--shots entries must be >= 1");
  }

  // Row order: methods, then the sweep; cells are seed-major within a row.
  struct Row {
    Method method;
    std::size_t shots;
    std::optional<std::size_t> k;
    std::string label;
  };
  std::vector<Row> rows;
  for (auto s : shot_list) {
    for (const auto& m : methods) rows.push_back({m, s, std::nullopt, m.name});
    for (auto k : sweep) rows.push_back({parse_method("proda", false), s, k, "proda@K=" + std::to_string(k)});
  }
  std::vector<Cell> cells;
  for (const Row& r : rows)
    for (auto seed : seeds) cells.push_back({r.label, r.shots, r.k, seed, std::nullopt, ""});

  const auto t0 = std::chrono::steady_clock::now();
  const unsigned threads = std::min<unsigned>(thread_count_from_env(),
                                              static_cast<unsigned>(std::max<std::size_t>(1, seeds.size())));
  // One worker per seed stripe; each cell writes only its own slot.
  auto work = [&](unsigned worker) {
    for (std::size_t si = worker; si < seeds.size(); si += threads) {
      for (auto s : shot_list) {
        std::optional<FewShotTask> task;
        std::string task_error;
        try {
          GenArgs g = a.gen;
          g.shots = s;
          task = make_synthetic(g, seeds[si]);
        } catch (const std::exception& e) {
          task_error = e.what();
        }
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (rows[r].shots != s) continue;
          Cell& cell = cells[r * seeds.size() + si];
          if (!task) {
            cell.error = "task generation failed: " + task_error;
            continue;
          }
          try {
            TrainConfig cfg = a.common.config(seeds[si]);
            if (rows[r].k) {
              cfg.prompts = *rows[r].k;
              cfg.prompt_batch = std::min(cfg.prompt_batch, cfg.prompts);
            }
            const LinearProbeConfig probe{a.common.l2, 1.0, a.common.probe_iters};
            cell.value = run_method(*task, rows[r].method, cfg, probe).metric;
          } catch (const std::exception& e) {
            cell.error = e.what();
          }
        }
      }
    }
  };
  if (threads <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& t : pool) t.join();
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  Json aggregate = Json::array();
  Json failures = Json::array();
  std::vector<std::vector<std::string>> table{{"method", "shots", "mean", "std", "n"}};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    Json per_seed = Json::array();
    std::vector<double> vals;
    for (std::size_t si = 0; si < seeds.size(); ++si) {
      const Cell& c = cells[r * seeds.size() + si];
      if (c.value) {
        vals.push_back(*c.value);
        per_seed.push_back(Json{{"seed", c.seed}, {"value", *c.value}});
      } else {
        per_seed.push_back(Json{{"seed", c.seed}, {"value", nullptr}, {"error", c.error}});
        failures.push_back(Json{{"method", c.method}, {"shots", c.shots}, {"seed", c.seed}, {"error", c.error}});
      }
    }
    double mean = 0.0, sd = 0.0;
    for (double v : vals) mean += v;
    if (!vals.empty()) mean /= static_cast<double>(vals.size());
    if (vals.size() > 1) {
      for (double v : vals) sd += (v - mean) * (v - mean);
      sd = std::sqrt(sd / static_cast<double>(vals.size() - 1));
    }
    Json row{{"method", rows[r].label}, {"shots", rows[r].shots}};
    if (rows[r].k) row["prompts"] = *rows[r].k;
    row["n"] = vals.size();
    row["mean"] = vals.empty() ? Json(nullptr) : Json(mean);
    row["std"] = vals.empty() ? Json(nullptr) : Json(sd);
    row["per_seed"] = per_seed;
    aggregate.push_back(row);
    table.push_back({rows[r].label, std::to_string(rows[r].shots), vals.empty() ? "-" : fixed(mean, 4),
                     vals.empty() ? "-" : fixed(sd, 4), std::to_string(vals.size())});
  }

  std::vector<unsigned long long> seed_copy(seeds.begin(), seeds.end());
  Json report{{"command", "suite"},
              {"prng", std::string(Rng::kAlgorithm)},
              {"seeds", seed_copy},
              {"shots", shot_list},
              {"task",
               {{"classes", a.gen.classes}, {"dim", a.gen.dim}, {"noise", a.gen.noise},
                {"test_per_class", a.gen.test_per_class}, {"encoder", a.gen.encoder_kind},
                {"token_dim", a.gen.input_dim}, {"hidden", a.gen.hidden_dim}, {"gain", a.gen.gain},
                {"metric", a.gen.metric}}},
              {"config", config_json(a.common.config(0))},
              {"results", aggregate},
              {"failures", failures}};
  report["config"].erase("seed");
  if (ctx.timing) report["wall_clock_seconds"] = seconds;
  if (a.out) write_text(ctx.resolve(*a.out), report.dump(2) + "\n");
  emit(ctx, report, render_table(table));
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prompt distribution learning on few-shot embedding tasks", "proda"};
  app.require_subcommand(1);
  std::string workdir = ".";
  bool timing = false, table = false;
  app.add_option("--workdir", workdir, "Base directory for every relative path")->capture_default_str();
  app.add_flag("--timing", timing, "Include wall-clock time in reports");
  app.add_flag("--table", table, "Print an aligned text table instead of JSON");

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Write a synthetic few-shot task");
  add_gen_options(*g, gen);
  g->add_option("--shots", gen.shots, "Training examples per class")->capture_default_str();
  g->add_option("--seed", gen.seed, "Task seed")->capture_default_str();
  g->add_option("--encoder-seed", gen.encoder_seed, "Frozen encoder seed (default: task seed)");
  g->add_option("--dtype", gen.dtype, "Feature storage type")->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();
  g->add_option("--out", gen.out, "Output directory")->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train prompts or a baseline on a task");
  t->add_option("--task", train.task, "Task manifest")->capture_default_str();
  t->add_option("--method", train.method, "proda|coop|linear-probe|ablation:<variant>")->capture_default_str();
  t->add_option("--out", train.out, "Run directory")->capture_default_str();
  t->add_option("--shots", train.shots, "Subsample to this many shots per class");
  t->add_option("--seed", train.common.seed, "Training seed")->capture_default_str();
  train.common.add_to(*t);

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate trained prompts or exported weights");
  e->add_option("--task", eval.task, "Task manifest")->capture_default_str();
  e->add_option("--run", eval.run, "Run directory written by train");
  e->add_option("--infer", eval.infer, "Inference mode")
      ->check(CLI::IsMember({"mean", "mc", "ensemble", "zeroshot"}))
      ->capture_default_str();
  e->add_option("--draws", eval.draws, "Monte-Carlo draws")->capture_default_str();
  e->add_option("--mode", eval.mode, "Monte-Carlo mode")
      ->check(CLI::IsMember({"gaussian", "empirical"}))
      ->capture_default_str();
  e->add_option("--metric", eval.metric, "Override the task metric")
      ->check(CLI::IsMember({"accuracy", "mean-per-class"}));
  e->add_option("--dump-weights", eval.dump_weights, "Write per-prompt class weights [B, C, d]");
  e->add_option("--tau", eval.tau, "Softmax temperature");
  e->add_option("--cov", eval.cov, "Covariance mode")->check(CLI::IsMember({"diag", "full"}));
  e->add_option("--seed", eval.seed, "Monte-Carlo seed")->capture_default_str();
  e->add_flag("--mean-of-softmax", eval.mean_of_softmax, "Ensemble by averaging probabilities");
  e->add_option("--prompt-len", eval.prompt_len, "Empty-prompt length for zero-shot")->capture_default_str();

  SuiteArgs suite;
  auto* s = app.add_subcommand("suite", "Seed sweep over synthetic tasks");
  s->add_option("--seeds", suite.seeds, "Seeds, e.g. 0..19")->capture_default_str();
  s->add_option("--shots", suite.shots, "Shots list, e.g. 1,2,4")->capture_default_str();
  s->add_option("--methods", suite.methods, "Comma-separated methods")->capture_default_str();
  s->add_option("--k-sweep", suite.k_sweep, "Prompt counts for a ProDA sweep, e.g. 4,8,16,32");
  s->add_option("--out", suite.out, "Also write the report here");
  add_gen_options(*s, suite.gen);
  suite.common.add_to(*s);

  auto fail = [&](const char* kind, const std::string& message, int code) {
    err << Json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << "\n";
    return code;
  };

  try {
    std::vector<std::string> argv_store{"proda"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return kExitOk;
    } catch (const CLI::ParseError& pe) {
      return fail("usage", pe.what(), kExitUsage);
    }

    Context ctx;
    ctx.workdir = workdir;
    ctx.out = &out;
    ctx.timing = timing;
    ctx.table = table;
    if (!fs::is_directory(ctx.workdir)) throw UsageError("--workdir " + workdir + " is not a directory");
    if (g->parsed()) return cmd_gen(ctx, gen);
    if (t->parsed()) return cmd_train(ctx, train);
    if (e->parsed()) return cmd_eval(ctx, eval);
    return cmd_suite(ctx, suite);
  } catch (const UsageError& x) {
    return fail("usage", x.what(), kExitUsage);
  } catch (const InvalidArgument& x) {
    return fail("usage", x.what(), kExitUsage);
  } catch (const DataError& x) {
    return fail("data", x.what(), kExitData);
  } catch (const ShapeError& x) {
    return fail("data", x.what(), kExitData);
  } catch (const NumericError& x) {
    return fail("numeric", x.what(), kExitNumeric);
  } catch (const Json::exception& x) {
    return fail("data", x.what(), kExitData);
  } catch (const std::exception& x) {
    return fail("internal", x.what(), 1);
  }
}

}  // namespace proda
