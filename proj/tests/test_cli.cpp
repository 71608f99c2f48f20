#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include <nlohmann/json.hpp>

#include "proda/cli.hpp"
#include "proda/dataio.hpp"
#include "test_util.hpp"

using namespace proda;
using nlohmann::json;
using proda::testing::scratch_dir;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;

  json report() const { return json::parse(out); }
  json error() const { return json::parse(err).at("error"); }
};

Run cli(const std::filesystem::path& workdir, std::vector<std::string> args) {
  args.insert(args.begin(), {"--workdir", workdir.string()});
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

const std::vector<std::string> kSmallTask = {"--classes", "4",  "--dim",    "12", "--token-dim",
                                             "8",         "--hidden", "16", "--test-per-class",
                                             "10",        "--gain",   "6"};
const std::vector<std::string> kFastTrain = {"--epochs", "3", "--prompts", "8", "--prompt-len",
                                             "4",        "--image-batch", "4", "--tau", "0.1"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST(CliParsing, IndexLists) {
  EXPECT_EQ(parse_index_list("0..3"), (std::vector<unsigned long long>{0, 1, 2, 3}));
  EXPECT_EQ(parse_index_list("1,2,4"), (std::vector<unsigned long long>{1, 2, 4}));
  EXPECT_EQ(parse_index_list("0..1,7"), (std::vector<unsigned long long>{0, 1, 7}));
  EXPECT_THROW(parse_index_list("3..1"), Error);
  EXPECT_THROW(parse_index_list("a"), Error);
}

TEST(CliParsing, ThreadCount) {
  ::setenv("PRODA_THREADS", "3", 1);
  EXPECT_EQ(thread_count_from_env(), 3u);
  ::unsetenv("PRODA_THREADS");
  EXPECT_EQ(thread_count_from_env(), 1u);
}

TEST(CliGen, WritesManifestAndTensors) {
  const auto dir = scratch_dir("cli_gen");
  const auto r = cli(dir, {"gen", "--classes", "10", "--shots", "1", "--dim", "32", "--noise", "0.6",
                           "--seed", "7", "--out", "a"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto rep = r.report();
  EXPECT_EQ(rep.at("manifest"), "a/task.json");
  EXPECT_EQ(rep.at("artifacts").size(), 6u);
  std::size_t tensors = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "a")) tensors += e.path().extension() == ".pdle";
  EXPECT_EQ(tensors, 5u);
  const auto task = load_task(dir / "a" / "task.json");
  EXPECT_EQ(task.classes(), 10u);
  EXPECT_EQ(task.dim(), 32u);
  EXPECT_EQ(task.train_labels.size(), 10u);
  EXPECT_EQ(task.test_labels.size(), 1000u);

  ASSERT_EQ(cli(dir, {"gen", "--classes", "10", "--shots", "1", "--dim", "32", "--noise", "0.6",
                      "--seed", "7", "--out", "b"}).code, kExitOk);
  for (const char* f : {"task.json", "name_tokens.pdle", "train_features.pdle", "train_labels.pdle",
                        "test_features.pdle", "test_labels.pdle"}) {
    EXPECT_EQ(sha256_file(dir / "a" / f), sha256_file(dir / "b" / f)) << f;
  }
}

TEST(CliGen, RejectsBadArguments) {
  const auto dir = scratch_dir("cli_gen_bad");
  const auto r = cli(dir, {"gen", "--shots", "0"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_EQ(r.error().at("exit_code"), kExitUsage);
  EXPECT_EQ(cli(dir, {"gen", "--dim", "13", "--token-dim", "8"}).code, kExitOk);
  EXPECT_EQ(cli(dir, {"gen", "--encoder", "transformer"}).code, kExitUsage);
  EXPECT_EQ(cli(dir, {"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(cli(dir, {}).code, kExitUsage);
}

TEST(CliFlow, TrainThenEvaluate) {
  const auto dir = scratch_dir("cli_flow");
  ASSERT_EQ(cli(dir, concat({"gen", "--shots", "2", "--seed", "3"}, kSmallTask)).code, kExitOk);
  const auto t = cli(dir, concat({"train", "--method", "proda"}, kFastTrain));
  ASSERT_EQ(t.code, kExitOk) << t.err;
  const auto rep = t.report();
  EXPECT_EQ(rep.at("method"), "proda");
  EXPECT_FALSE(rep.contains("wall_clock_seconds"));
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "prompts.pdle"));
  EXPECT_EQ(read_embedding(dir / "run" / "prompts.pdle").dims, (std::vector<std::uint64_t>{8, 4, 8}));
  const double trained = rep.at("test_metric").get<double>();

  const auto mean = cli(dir, {"eval", "--run", "run", "--infer", "mean"});
  ASSERT_EQ(mean.code, kExitOk) << mean.err;
  EXPECT_EQ(mean.report().at("accuracy").get<double>(), trained);
  EXPECT_EQ(mean.report().at("source"), "prompts");
  EXPECT_EQ(mean.report().at("weight_sets"), 8);

  for (const char* mode : {"gaussian", "empirical"}) {
    const auto mc = cli(dir, {"eval", "--run", "run", "--infer", "mc", "--draws", "50", "--mode", mode});
    ASSERT_EQ(mc.code, kExitOk) << mc.err;
    EXPECT_GE(mc.report().at("accuracy").get<double>(), 0.0);
  }
  const auto dump = cli(dir, {"eval", "--run", "run", "--infer", "ensemble", "--dump-weights", "w.pdle"});
  ASSERT_EQ(dump.code, kExitOk) << dump.err;
  EXPECT_EQ(read_embedding(dir / "w.pdle").dims, (std::vector<std::uint64_t>{8, 4, 12}));

  const auto zs = cli(dir, {"eval", "--infer", "zeroshot", "--metric", "mean-per-class"});
  ASSERT_EQ(zs.code, kExitOk) << zs.err;
  EXPECT_EQ(zs.report().at("source"), "empty_prompt");
  EXPECT_EQ(zs.report().at("metric"), "mean-per-class");

  const auto timed = cli(dir, concat({"--timing", "train", "--method", "coop", "--out", "coop"}, kFastTrain));
  ASSERT_EQ(timed.code, kExitOk) << timed.err;
  EXPECT_TRUE(timed.report().contains("wall_clock_seconds"));

  const auto probe = cli(dir, {"train", "--method", "linear-probe", "--out", "lp", "--probe-iters", "50"});
  ASSERT_EQ(probe.code, kExitOk) << probe.err;
  EXPECT_TRUE(probe.report().contains("probe"));

  const auto table = cli(dir, {"--table", "eval", "--run", "run"});
  ASSERT_EQ(table.code, kExitOk);
  EXPECT_NE(table.out.find("accuracy"), std::string::npos);
  EXPECT_THROW(json::parse(table.out), json::exception);
}

TEST(CliFlow, ExitCodes) {
  const auto dir = scratch_dir("cli_codes");
  const auto missing = cli(dir, {"train", "--task", "nowhere/task.json"});
  EXPECT_EQ(missing.code, kExitData);
  EXPECT_EQ(missing.error().at("kind"), "data");
  ASSERT_EQ(cli(dir, concat({"gen", "--shots", "2"}, kSmallTask)).code, kExitOk);
  EXPECT_EQ(cli(dir, {"train", "--method", "sgd"}).code, kExitUsage);
  EXPECT_EQ(cli(dir, {"train", "--shots", "5"}).code, kExitData);
  EXPECT_EQ(cli(dir, {"train", "--prompt-batch", "40", "--prompts", "8"}).code, kExitUsage);
  const auto numeric = cli(dir, concat({"train", "--tau", "1e-160"}, {"--epochs", "1", "--prompts", "4"}));
  EXPECT_EQ(numeric.code, kExitNumeric);
  EXPECT_EQ(numeric.error().at("kind"), "numeric");
  EXPECT_EQ(cli(dir, {"eval", "--infer", "median"}).code, kExitUsage);
}

TEST(CliSuite, ByteDeterministicReport) {
  const auto dir = scratch_dir("cli_suite");
  const auto args = concat(concat({"suite", "--seeds", "0..1", "--shots", "1,2", "--methods",
                                   "proda,coop,zeroshot,linear-probe,ablation:no_sem_orth",
                                   "--k-sweep", "4,8", "--probe-iters", "20"},
                                  kSmallTask),
                           kFastTrain);
  const auto a = cli(dir, concat(args, {"--out", "a.json"}));
  ASSERT_EQ(a.code, kExitOk) << a.err;
  ::setenv("PRODA_THREADS", "2", 1);
  const auto b = cli(dir, concat(args, {"--out", "b.json"}));
  ::unsetenv("PRODA_THREADS");
  ASSERT_EQ(b.code, kExitOk) << b.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(sha256_file(dir / "a.json"), sha256_file(dir / "b.json"));
  const auto rep = a.report();
  EXPECT_EQ(rep.at("failures").size(), 0u);
  // 5 methods and 2 sweep rows, each at 2 shot counts.
  EXPECT_EQ(rep.at("results").size(), 14u);
  for (const auto& row : rep.at("results")) {
    EXPECT_EQ(row.at("n"), 2);
    EXPECT_EQ(row.at("per_seed").size(), 2u);
  }
}

TEST(CliSuite, RecordsFailuresAndContinues) {
  const auto dir = scratch_dir("cli_suite_fail");
  const auto r = cli(dir, concat(concat({"suite", "--seeds", "0", "--methods", "proda,zeroshot"}, kSmallTask),
                                 {"--epochs", "1", "--prompts", "4", "--prompt-len", "4", "--tau", "1e-160"}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto rep = r.report();
  EXPECT_GE(rep.at("failures").size(), 1u);
  EXPECT_EQ(rep.at("results")[0].at("n"), 0);
  EXPECT_TRUE(rep.at("results")[0].at("mean").is_null());
}
