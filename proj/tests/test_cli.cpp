#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "castnet/cli.hpp"

using namespace castnet;
namespace fs = std::filesystem;

namespace {

int run_cli(std::vector<std::string> args, std::string* err_out = nullptr) {
  args.insert(args.begin(), "castnet");
  args.push_back("--quiet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream err;
  const int rc = cli::run(static_cast<int>(argv.size()), argv.data(), err);
  if (err_out) *err_out = err.str();
  return rc;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("castnet_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() != "run_config.ini") {
      out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
    }
  }
  return out;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream f(p);
  std::size_t n = 0;
  for (std::string l; std::getline(f, l);) ++n;
  return n;
}

const std::vector<std::string> kTiny{"--n", "16", "--n-test", "8", "--image-size", "32", "--batch-size", "4"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST(Cli, SynthIsDeterministic) {
  const auto a = scratch("synth_a"), b = scratch("synth_b");
  const std::vector<std::string> args{"--n", "12", "--defect-fraction", "0.5", "--size", "32", "--seed", "7"};
  ASSERT_EQ(run_cli(with({"synth", "--out", a.string()}, args)), 0);
  ASSERT_EQ(run_cli(with({"synth", "--out", b.string()}, args)), 0);
  const auto ta = tree(a);
  EXPECT_EQ(ta, tree(b));
  EXPECT_EQ(ta.size(), 12u + 100u + 1u);  // images + manifest
  EXPECT_TRUE(fs::exists(a / "run_config.ini"));
}

TEST(Cli, BenchReferenceWritesRatioTables) {
  const auto out = scratch("bench_ref");
  ASSERT_EQ(run_cli({"bench", "--reference", "--out", out.string()}), 0);
  const auto md = slurp(out / "ratios.md");
  EXPECT_NE(md.find("| Resnet50 | 4022x | 1186x |"), std::string::npos);
  for (const char* f : {"latency_report.csv", "plot_data.csv", "ratios.csv", "ratios.json"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
}

TEST(Cli, UsageErrorsExitOne) {
  const auto out = scratch("usage");
  std::string err;
  EXPECT_EQ(run_cli({"train", "--bogus"}, &err), 1);
  EXPECT_NE(err.find("--bogus"), std::string::npos);
  EXPECT_EQ(run_cli({}), 1);
  EXPECT_EQ(run_cli({"bench", "--out", out.string()}, &err), 1);
  EXPECT_EQ(run_cli(with({"train", "--out", out.string(), "--optimizer", "rmsprop"}, kTiny), &err), 1);
  EXPECT_NE(err.find("optimizer"), std::string::npos);
  EXPECT_EQ(run_cli(with({"train", "--out", out.string(), "--plateau-factor", "1.5"}, kTiny), &err), 1);
  EXPECT_NE(err.find("plateau.factor"), std::string::npos);
  EXPECT_EQ(run_cli({"synth", "--out", out.string(), "--size", "8"}), 1);
}

TEST(Cli, DataErrorsExitTwo) {
  const auto out = scratch("data_err");
  std::string err;
  EXPECT_EQ(run_cli({"train", "--out", out.string(), "--data", (out / "nowhere").string()}, &err), 2);
  EXPECT_NE(err.find("nowhere"), std::string::npos);
  EXPECT_EQ(run_cli(with({"eval", "--out", out.string(), "--model", (out / "missing.cnet1").string()}, kTiny)), 2);
}

TEST(Cli, RefusesToWriteIntoInputDataset) {
  const auto data = scratch("readonly_data");
  ASSERT_EQ(run_cli({"synth", "--out", data.string(), "--n", "4", "--n-test", "2", "--size", "32"}), 0);
  const auto before = tree(data);
  EXPECT_EQ(run_cli({"train", "--data", data.string(), "--out", (data / "sub").string()}), 1);
  EXPECT_EQ(run_cli({"train", "--data", data.string(), "--out", data.string()}), 1);
  EXPECT_EQ(tree(data), before);
}

TEST(Cli, TrainEvalReportOnDirectoryDataset) {
  const auto data = scratch("ds"), out = scratch("run");
  ASSERT_EQ(run_cli({"synth", "--out", data.string(), "--n", "20", "--n-test", "6", "--size", "32", "--seed", "3"}), 0);
  const auto before = tree(data);
  const std::vector<std::string> common{"--data", data.string(), "--out", out.string(), "--image-size", "32",
                                        "--batch-size", "4"};
  ASSERT_EQ(run_cli(with({"train", "--epochs", "2"}, common)), 0);
  EXPECT_TRUE(fs::exists(out / "model.cnet1"));
  EXPECT_EQ(line_count(out / "training_log.csv"), 3u);
  ASSERT_EQ(run_cli(with({"eval", "--both-tests"}, common)), 0);
  const auto metrics = slurp(out / "metrics_report.csv");
  EXPECT_NE(metrics.find("castnet-tiny,standard,6,"), std::string::npos);
  EXPECT_NE(metrics.find("castnet-tiny,augmented,6,"), std::string::npos);
  ASSERT_EQ(run_cli(with({"bench", "--measured", "--sizes", "1,2,4"}, common)), 0);
  EXPECT_EQ(line_count(out / "latency_report.csv"), 4u);
  ASSERT_EQ(run_cli(with({"report"}, common)), 0);
  const auto report = slurp(out / "report.md");
  EXPECT_NE(report.find("| castnet-tiny (this build) | 3777 | 3713 | 64 |"), std::string::npos);
  EXPECT_NE(report.find("Inference benchmark (measured)"), std::string::npos);
  EXPECT_NE(report.find("Resnet50 | 9.02x"), std::string::npos);
  EXPECT_EQ(tree(data), before);
}

TEST(Cli, ConfigFileWithFlagOverride) {
  const auto out = scratch("config");
  fs::create_directories(out);
  {
    std::ofstream cfg(out / "my.ini");
    cfg << "n=16\nn-test=8\nimage-size=32\nbatch-size=4\nepochs=1\nseed=5\n";
  }
  ASSERT_EQ(run_cli({"train", "--config", (out / "my.ini").string(), "--out", out.string(), "--epochs", "2",
                     "--no-early-stop"}),
            0);
  EXPECT_EQ(line_count(out / "training_log.csv"), 3u);
  const auto persisted = slurp(out / "run_config.ini");
  EXPECT_NE(persisted.find("epochs=2"), std::string::npos);
  EXPECT_NE(persisted.find("seed=5"), std::string::npos);
}

TEST(Cli, PersistedConfigReproducesRun) {
  const auto a = scratch("repro_a"), b = scratch("repro_b");
  ASSERT_EQ(run_cli(with({"train", "--out", a.string(), "--epochs", "2", "--augment", "--seed", "9"}, kTiny)), 0);
  ASSERT_EQ(run_cli({"train", "--config", (a / "run_config.ini").string(), "--out", b.string()}), 0);
  EXPECT_EQ(slurp(a / "model.cnet1"), slurp(b / "model.cnet1"));
  ASSERT_EQ(run_cli({"eval", "--config", (a / "run_config.ini").string(), "--out", a.string()}), 0);
  ASSERT_EQ(run_cli({"eval", "--config", (a / "run_config.ini").string(), "--out", b.string()}), 0);
  EXPECT_EQ(slurp(a / "metrics_report.csv"), slurp(b / "metrics_report.csv"));
}

TEST(Cli, AugStudyProducesFourTaggedRows) {
  const auto out = scratch("aug_study");
  ASSERT_EQ(run_cli(with({"aug-study", "--out", out.string(), "--epochs", "1"}, kTiny)), 0);
  std::ifstream f(out / "aug_study.csv");
  std::string line;
  std::getline(f, line);
  std::vector<std::string> tags;
  while (std::getline(f, line)) tags.push_back(line.substr(0, line.find(',', line.find(',') + 1)));
  EXPECT_EQ(tags, (std::vector<std::string>{"normal,standard", "normal,augmented", "augmented-train,standard",
                                            "augmented-train,augmented"}));
  EXPECT_TRUE(fs::exists(out / "aug_study.md"));
}
