// Acceptance checks. One PASS/FAIL line per criterion; nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "proda/cli.hpp"
#include "proda/dataio.hpp"
#include "proda/trainer.hpp"

using namespace proda;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void check(const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), s);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double n = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      t(r, c) = rng.normal();
      n += t(r, c) * t(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c) t(r, c) /= std::sqrt(n);
  }
  return t;
}

// K unit-norm weight samples scattered around a random centre.
WeightSamples scattered(Rng& rng, std::size_t K, std::size_t C, std::size_t d, double spread) {
  const Tensor centre = unit_rows(rng, C, d);
  WeightSamples s;
  for (std::size_t k = 0; k < K; ++k) {
    Tensor w = centre;
    for (double& v : w.data()) v += spread * rng.normal();
    for (std::size_t c = 0; c < C; ++c) {
      double n = 0.0;
      for (double v : w.row_span(c)) n += v * v;
      for (double& v : w.row_span(c)) v /= std::sqrt(n);
    }
    s.per_prompt.push_back(std::move(w));
    s.prompt_index.push_back(k);
  }
  return s;
}

Batch random_batch(Rng& rng, std::size_t n, std::size_t C, std::size_t d) {
  Batch b{unit_rows(rng, n, d), {}};
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(rng.below(C));
  return b;
}

LossConfig mode_config(CovMode m) {
  LossConfig c;
  c.cov_mode = m;
  return c;
}

Outcome bound_check() {
  Rng rng(2024);
  std::size_t total = 0, ok = 0;
  double worst = INFINITY;
  for (int rep = 0; rep < 2; ++rep)
    for (std::size_t C : {2, 3, 5})
      for (std::size_t d : {2, 4, 8})
        for (std::size_t K : {2, 4, 8})
          for (auto mode : {CovMode::DiagonalBlocks, CovMode::FullBlocks}) {
            const double spread = 0.1 + 0.4 * rng.uniform();
            const double tau = 0.2 + 0.8 * rng.uniform();
            const auto dist = estimate_distribution(scattered(rng, K, C, d, spread), mode_config(mode));
            const Batch b = random_batch(rng, 4, C, d);
            const double up = surrogate_loss(dist, b, tau);
            const auto mc = marginal_loss_mc(dist, b, tau, 200000, rng.next());
            const double margin = up - (mc.estimate - 3.0 * mc.std_error);
            worst = std::min(worst, margin);
            ++total;
            ok += margin >= 0.0;
          }
  return {ok == total && total >= 100,
          fmt("%zu/%zu instances hold, smallest margin %.3g", ok, total, worst)};
}

Outcome mgf_identity() {
  Rng rng(77);
  int ok = 0;
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const double mu = -1.0 + 2.0 * rng.uniform();
    const double sigma = 0.05 + 0.95 * rng.uniform();
    const double t = -1.5 + 3.0 * rng.uniform();
    const auto m = mgf_check(mu, sigma, t, 1000000, rng.next());
    const double z = std::abs(m.empirical - m.analytic) / m.std_error;
    worst = std::max(worst, z);
    ok += z <= 3.0;
  }
  return {ok == 20, fmt("%d/20 within 3 SE, largest |z| %.2f", ok, worst)};
}

Outcome gradient_check() {
  EncoderConfig ec;
  ec.input_dim = 16;
  ec.hidden_dim = 24;
  ec.output_dim = 8;
  ec.gain = 4.0;
  ec.weight_seed = 5;
  const TextEncoder enc(ec);
  Rng rng(31);
  ClassNameTokens names;
  for (int c = 0; c < 5; ++c) {
    Tensor t(2, 16);
    for (double& v : t.data()) v = rng.normal();
    names.per_class.push_back(t);
  }
  const Batch batch = random_batch(rng, 10, 5, 8);
  auto prompts = init_prompt_collection(8, 8, 16, 3);
  std::vector<Tensor> params;
  std::vector<Position> pos;
  for (auto& p : prompts.prompts) {
    for (double& v : p.tokens.data()) v = -0.5 + rng.uniform();
    params.push_back(p.tokens);
    pos.push_back(p.position);
  }
  std::string detail;
  bool pass = true;
  const char* labels[] = {"total", "upper", "so"};
  for (auto mode : {CovMode::DiagonalBlocks, CovMode::FullBlocks}) {
    for (int part = 0; part < 3; ++part) {
      if (part == 2 && mode == CovMode::FullBlocks) continue;
      const double err = diff::finite_diff_check(
          [&](Tape& tape, std::span<const Var> p) {
            BoundEncoder bound = enc.bind(tape);
            auto w = generate_weights(bound, p, pos, names);
            auto dist = estimate_distribution(tape, w, mode, Estimator::ML);
            std::vector<Var> emb;
            for (Var v : p) emb.push_back(encode_prompt_semantic(bound, v));
            LossConfig cfg;
            cfg.tau = 0.5;
            cfg.cov_mode = mode;
            auto t = total_loss(dist, batch, diff::concat_rows(emb), cfg);
            return part == 0 ? t.total : part == 1 ? t.upper : t.so;
          },
          params, 1e-5, 1000, 11 + part);
      pass &= err < 1e-4;
      detail += fmt("%s%s/%s %.2e", detail.empty() ? "" : ", ", labels[part],
                    std::string(to_string(mode)).c_str(), err);
    }
  }
  return {pass, "1000 coordinates each, max rel err " + detail};
}

double variance(const std::vector<double>& x) {
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size());
}

Outcome quadratic_oracle() {
  Rng rng(91);
  double worst_full = 0.0, worst_diag = 0.0;
  bool zero_ok = true;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t K = 2 + rng.below(8), C = 2 + rng.below(5), d = 1 + rng.below(8);
    const WeightSamples s = scattered(rng, K, C, d, 0.5);
    const Tensor z = unit_rows(rng, 1, d);
    const auto full = estimate_distribution(s, mode_config(CovMode::FullBlocks));
    const auto diag = estimate_distribution(s, mode_config(CovMode::DiagonalBlocks));
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < C; ++y) {
        std::vector<double> proj(K, 0.0);
        double coord = 0.0;
        for (std::size_t b = 0; b < K; ++b)
          for (std::size_t k = 0; k < d; ++k) proj[b] += z[k] * (s.per_prompt[b](c, k) - s.per_prompt[b](y, k));
        for (std::size_t k = 0; k < d; ++k) {
          std::vector<double> diff(K);
          for (std::size_t b = 0; b < K; ++b) diff[b] = s.per_prompt[b](c, k) - s.per_prompt[b](y, k);
          coord += z[k] * z[k] * variance(diff);
        }
        const double qf = quadratic_form(full, c, y, z.data());
        const double qd = quadratic_form(diag, c, y, z.data());
        const double vf = variance(proj);
        if (c == y) {
          zero_ok &= qf == 0.0 && qd == 0.0;
          continue;
        }
        worst_full = std::max(worst_full, std::abs(qf - vf) / std::max(vf, 1e-300));
        worst_diag = std::max(worst_diag, std::abs(qd - coord) / std::max(coord, 1e-300));
      }
  }
  return {worst_full < 1e-10 && worst_diag < 1e-10 && zero_ok,
          fmt("100 instances, max rel err full %.2e diag %.2e, A_yy exactly 0: %s", worst_full, worst_diag,
              zero_ok ? "yes" : "no")};
}

Outcome degeneracy() {
  EncoderConfig ec;
  const TextEncoder enc(ec);
  Rng rng(12);
  double worst = 0.0;
  bool exact = true;
  for (int inst = 0; inst < 10; ++inst) {
    ClassNameTokens names;
    for (int c = 0; c < 6; ++c) {
      Tensor t(2, 16);
      for (double& v : t.data()) v = 0.643 * rng.normal();
      names.per_class.push_back(t);
    }
    auto one = init_prompt_collection(1, 16, 16, rng.next());
    for (double& v : one.prompts[0].tokens.data()) v *= 10.0;
    const WeightSamples s = generate_weights(enc, one, names);
    const Batch b = random_batch(rng, 20, 6, 32);
    for (auto mode : {CovMode::DiagonalBlocks, CovMode::FullBlocks}) {
      const auto dist = estimate_distribution(s, mode_config(mode));
      const double tau = 0.01 + 0.2 * rng.uniform();
      const double up = surrogate_loss(dist, b, tau);
      const double ens = ensemble_ce_loss(s, b, tau);
      const double ce = cross_entropy_single(s.per_prompt[0], b, tau);
      worst = std::max({worst, std::abs(up - ens), std::abs(up - ce), std::abs(ens - ce)});
      const MonteCarloPredictor gauss(dist, &s, tau, 64, McMode::Gaussian, 1);
      const MonteCarloPredictor emp(dist, &s, tau, 64, McMode::Empirical, 1);
      for (std::size_t i = 0; i < b.size(); ++i) {
        const auto m = predict_mean(dist, b.z.row_span(i), tau);
        exact &= gauss.predict(b.z.row_span(i)).probs == m.probs;
        exact &= emp.predict(b.z.row_span(i)).probs == m.probs;
      }
    }
  }
  return {worst <= 1e-12 && exact,
          fmt("K=1, max loss disagreement %.2e, predict_mean == predict_mc: %s", worst, exact ? "yes" : "no")};
}

Outcome orthogonality_algebra() {
  const double orth = semantic_orthogonality_loss(Tensor::from_rows({{1, 0, 0}, {0, 2, 0}}));
  const double same = semantic_orthogonality_loss(Tensor::from_rows({{1, 2, 3}, {1, 2, 3}}));
  const double anti = semantic_orthogonality_loss(Tensor::from_rows({{1, 2, 3}, {-2, -4, -6}}));
  Rng rng(5);
  double lo = INFINITY, hi = -INFINITY;
  for (int i = 0; i < 200; ++i) {
    const std::size_t K = 2 + rng.below(31);
    Tensor g(K, 1 + rng.below(32));
    for (double& v : g.data()) v = rng.normal() + (i % 2 ? 3.0 : 0.0);
    const double v = semantic_orthogonality_loss(g);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return {orth == 0.0 && std::abs(same - 0.5) < 1e-15 && std::abs(anti - 0.5) < 1e-15 && lo >= 0.0 &&
              hi <= 0.5 + 1e-15,
          fmt("orthogonal %.3g, identical %.17g, antipodal %.17g, random range [%.4f, %.4f]", orth, same, anti,
              lo, hi)};
}

Outcome position_diversity() {
  const auto init = init_prompt_collection(32, 16, 16, 0).histogram();
  EncoderConfig ec;
  const TextEncoder enc(ec);
  SyntheticSpec spec;
  spec.test_per_class = 2;
  const auto task = gen_synthetic_task(spec, enc);
  TrainConfig cfg;
  cfg.epochs = 1;
  const auto trained = train_proda(task, enc, cfg).prompts.histogram();
  const auto ablated = run_ablation(task, enc, cfg, Ablation::NoPosDiv).prompts.histogram();
  const bool pass = init == PositionHistogram{8, 8, 16} && trained == init && ablated == PositionHistogram{0, 0, 32};
  return {pass, fmt("K=32 %zu/%zu/%zu, trained %zu/%zu/%zu, no_pos_div %zu/%zu/%zu", init.front, init.middle,
                    init.end, trained.front, trained.middle, trained.end, ablated.front, ablated.middle,
                    ablated.end)};
}

std::filesystem::path work_dir() {
  const char* base = std::getenv("PRODA_TEST_TMP");
  auto dir = std::filesystem::path(base ? base : std::filesystem::temp_directory_path().string()) / "acceptance";
  std::filesystem::create_directories(dir);
  return dir;
}

json run_suite(const std::vector<std::string>& extra) {
  std::vector<std::string> args = {"--workdir", work_dir().string(), "suite"};
  args.insert(args.end(), extra.begin(), extra.end());
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != kExitOk) throw Error("suite exited " + std::to_string(code) + ": " + err.str());
  return json::parse(out.str());
}

const json& row(const json& report, const std::string& method) {
  for (const auto& r : report.at("results")) {
    if (r.at("method") == method) return r;
  }
  throw Error("no row " + method);
}

json main_suite;

Outcome directional() {
  const auto t0 = std::chrono::steady_clock::now();
  main_suite = run_suite({"--seeds", "0..19", "--shots", "1", "--classes", "10", "--dim", "32", "--noise", "0.6",
                          "--methods", "proda,coop,zeroshot", "--k-sweep", "4,8,16"});
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto& p = row(main_suite, "proda");
  const auto& c = row(main_suite, "coop");
  const auto& z = row(main_suite, "zeroshot");
  if (p.at("n") != 20 || c.at("n") != 20 || z.at("n") != 20) return {false, "missing seeds in the suite"};
  int wins = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    wins += p.at("per_seed")[i].at("value").get<double>() >= c.at("per_seed")[i].at("value").get<double>();
  }
  const double mp = p.at("mean"), mc = c.at("mean"), mz = z.at("mean");
  return {mp > mc && mp > mz && wins >= 14 && seconds < 600,
          fmt("ProDA %.4f, single prompt %.4f, zero-shot %.4f, ProDA >= single on %d/20 seeds, suite %.0f s "
              "(includes the K sweep)",
              mp, mc, mz, wins, seconds)};
}

Outcome k_sweep() {
  if (main_suite.is_null()) return {false, "suite did not run"};
  const std::vector<std::pair<int, std::string>> ks = {
      {4, "proda@K=4"}, {8, "proda@K=8"}, {16, "proda@K=16"}, {32, "proda"}};
  std::string detail;
  bool pass = true;
  double prev = -INFINITY;
  for (const auto& [k, name] : ks) {
    const double m = row(main_suite, name).at("mean");
    if (m < prev - 0.005) pass = false;
    prev = m;
    detail += fmt("%sK=%d %.4f", detail.empty() ? "" : ", ", k, m);
  }
  return {pass, detail + " (0.5-point slack per step)"};
}

Outcome determinism() {
  const std::vector<std::string> args = {"--seeds", "0..3", "--shots", "1,2", "--classes", "5", "--epochs", "20",
                                         "--test-per-class", "20",
                                         "--methods", "proda,coop,zeroshot,linear-probe,ablation:no_upper",
                                         "--k-sweep", "4"};
  auto with_out = [&](const std::string& name) {
    auto a = args;
    a.insert(a.end(), {"--out", name});
    return a;
  };
  const json a = run_suite(with_out("det_a.json"));
  ::setenv("PRODA_THREADS", "3", 1);
  const json b = run_suite(with_out("det_b.json"));
  ::unsetenv("PRODA_THREADS");
  const auto fa = read_file(work_dir() / "det_a.json");
  const auto fb = read_file(work_dir() / "det_b.json");
  return {fa == fb && a == b && a.at("failures").empty(),
          fmt("two suite runs (1 and 3 threads): %zu bytes each, sha256 %s", fa.size(),
              fa == fb ? sha256_hex(fa).substr(0, 16).c_str() : "differs")};
}

Outcome file_format() {
  Rng rng(3);
  Tensor t(4, 7);
  for (double& v : t.data()) v = rng.normal();
  bool ok = true;
  const auto f64 = make_stored(t, DType::F64);
  ok &= decode_embedding(encode_embedding(f64)) == f64 && f64.to_matrix() == t;
  const auto f32 = make_stored(t, DType::F32);
  ok &= decode_embedding(encode_embedding(f32)) == f32;
  const std::vector<std::size_t> labels = {0, 1, 4294967295u};
  ok &= decode_embedding(encode_embedding(make_labels(labels))).to_labels() == labels;
  const std::vector<Tensor> slices = {t, t};
  ok &= decode_embedding(encode_embedding(make_stored(slices, DType::F64))).to_slices() == slices;
  const auto path = work_dir() / "format.pdle";
  write_embedding(path, f32);
  ok &= read_embedding(path) == f32;

  int rejected = 0;
  auto rejects = [&](std::vector<std::uint8_t> bytes) {
    try {
      decode_embedding(bytes);
    } catch (const DataError&) {
      ++rejected;
    }
  };
  auto bytes = encode_embedding(f64);
  auto bad = bytes;
  bad[1] = 'X';
  rejects(bad);
  bad = bytes;
  bad[4] = 7;
  rejects(bad);
  bad = bytes;
  bad[8] = 5;
  rejects(bad);
  bad = bytes;
  bad.resize(bad.size() - 3);
  rejects(bad);
  return {ok && rejected == 4,
          fmt("round trips f32/f64/u32/rank-3/disk %s, %d/4 corrupt headers rejected", ok ? "identical" : "differ",
              rejected)};
}

}  // namespace

int main() {
  check("bound", bound_check);
  check("mgf-identity", mgf_identity);
  check("gradients", gradient_check);
  check("quadratic-oracle", quadratic_oracle);
  check("degeneracy", degeneracy);
  check("orthogonality-algebra", orthogonality_algebra);
  check("position-diversity", position_diversity);
  check("directional-ordering", directional);
  check("k-sweep", k_sweep);
  check("determinism", determinism);
  check("file-format", file_format);
  std::printf("%d failure(s)\n", failures);
  return failures == 0 ? 0 : 1;
}
