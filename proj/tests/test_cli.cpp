#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "blp/cli.hpp"
#include "common.hpp"

using namespace blp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "blp");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = blp::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string read(const fs::path& p) { return ingest::read_file(p); }

json read_json(const fs::path& p) { return json::parse(read(p)); }

fs::path write_config(const fs::path& dir, const std::string& name, const json& doc) {
  const auto path = dir / name;
  ingest::write_text_file(path, doc.dump());
  return path;
}

/// Model and optimizer settings small enough for a quick run.
json tiny_run(std::vector<int> s_values) {
  return {{"preprocess", {{"s_values", s_values}}},
          {"model", {{"d1", 8}, {"d2", 8}, {"intra_layers", 1}, {"inter_hidden", 8}}},
          {"optim", {{"epochs", 2}, {"batch_size", 8}, {"seeds", {0, 1, 2}}}},
          {"eval", {{"sweep_s", {50, 10}}}}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    ::unsetenv("BLP_SEED");
    dir_ = blp::testing::scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
  }
  void TearDown() override {
    ::unsetenv("BLP_SEED");
    fs::remove_all(dir_);
  }
  /// A 10-battery fleet written by the synth command.
  fs::path fleet(const std::string& name = "fleet", const std::string& seed = "3") {
    const auto r = run_cli({"--seed", seed, "-o", (dir_ / name).string(), "synth", "-n", "10"});
    EXPECT_EQ(r.code, 0) << r.err;
    return dir_ / name / "manifest.json";
  }
  fs::path dir_;
};

}  // namespace

TEST_F(Cli, SynthWritesFleetDeterministically) {
  const auto manifest = fleet("a");
  fleet("b");
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "a")) {
    ++files;
    EXPECT_EQ(read(e.path()), read(dir_ / "b" / e.path().filename())) << e.path();
  }
  EXPECT_EQ(files, 12u);  // 10 batteries, labels.csv, manifest.json
  EXPECT_EQ(ingest::load_manifest(manifest).entries.size(), 10u);
  fleet("c", "4");
  EXPECT_NE(read(dir_ / "a" / "labels.csv"), read(dir_ / "c" / "labels.csv"));
}

TEST_F(Cli, SynthRefusesNonEmptyDirectory) {
  fleet("a");
  const auto again = run_cli({"-o", (dir_ / "a").string(), "synth", "-n", "10"});
  EXPECT_EQ(again.code, 2);
  EXPECT_NE(again.err.find("not empty"), std::string::npos);
  EXPECT_EQ(run_cli({"-o", (dir_ / "a").string(), "--force", "synth", "-n", "10"}).code, 0);
  EXPECT_EQ(run_cli({"synth", "-n", "10"}).code, 2);
}

TEST_F(Cli, SynthCensoringIsConfigError) {
  const auto cfg = write_config(dir_, "c.json", {{"synth", {{"max_cycles", 300}}}});
  const auto r = run_cli({"-c", cfg.string(), "-o", (dir_ / "f").string(), "synth", "-n", "20"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("max_cycles"), std::string::npos);
}

TEST_F(Cli, PreprocessOneSamplePerBattery) {
  const auto manifest = fleet();
  const auto cfg = write_config(dir_, "c.json", {{"preprocess", {{"s_values", {100}}}}});
  const auto out = dir_ / "pre";
  const auto r = run_cli({"-c", cfg.string(), "-o", out.string(), "preprocess", "-m", manifest.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = read_json(out / "report.json");
  EXPECT_EQ(rep["samples"], 10);
  EXPECT_EQ(rep["samples_per_s"]["100"], 10);
  EXPECT_EQ(prep::load_cache(out / "samples.blpt").size(), 10u);
  EXPECT_FALSE(rep["config"].contains("out"));
  EXPECT_EQ(rep["inputs"].size(), 11u);
}

TEST_F(Cli, PreprocessLogsAboveBandExclusions) {
  const auto cfg = write_config(dir_, "c.json",
                                {{"synth", {{"truncate_fraction", 1.0}}}, {"preprocess", {{"s_values", {10}}}}});
  ASSERT_EQ(run_cli({"-c", cfg.string(), "-o", (dir_ / "f").string(), "synth", "-n", "20"}).code, 0);
  const auto r = run_cli({"-c", cfg.string(), "-o", (dir_ / "pre").string(), "preprocess", "-m",
                      (dir_ / "f" / "manifest.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("excluded_above_band"), std::string::npos) << r.err;
  const auto rep = read_json(dir_ / "pre" / "report.json");
  ASSERT_FALSE(rep["skipped"].empty());
  EXPECT_EQ(rep["samples"].get<int>() + rep["skipped"].size(), 20u);
}

TEST_F(Cli, TrainEvalSweepPipeline) {
  const auto manifest = fleet();
  const auto cfg = write_config(dir_, "c.json", tiny_run({10, 50}));
  const auto cache = (dir_ / "pre" / "samples.blpt").string();
  ASSERT_EQ(run_cli({"-c", cfg.string(), "-o", (dir_ / "pre").string(), "preprocess", "-m", manifest.string()}).code, 0);

  const auto train = run_cli({"-c", cfg.string(), "-o", (dir_ / "train").string(), "train", "--cache", cache});
  ASSERT_EQ(train.code, 0) << train.err;
  const auto rep = read_json(dir_ / "train" / "report.json");
  EXPECT_EQ(rep["summary"]["runs"], 3);
  EXPECT_TRUE(rep["summary"].contains("acc15_mean"));
  EXPECT_NE(train.out.find("+-"), std::string::npos);
  EXPECT_NE(train.out.find("acc15"), std::string::npos);
  for (int seed = 0; seed < 3; ++seed) {
    EXPECT_TRUE(fs::exists(dir_ / "train" / ("checkpoint_seed" + std::to_string(seed) + ".blpw")));
  }
  const auto ckpt = (dir_ / "train" / "checkpoint_seed0.blpw").string();

  const auto ev = run_cli({"-c", cfg.string(), "-o", (dir_ / "eval").string(), "eval", "--cache", cache, "--checkpoint",
                       ckpt, "--split-seed", "0"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  // the test split of run 0 is what training scored
  const auto er = read_json(dir_ / "eval" / "report.json");
  double trained = -1;
  for (const auto& row : rep["rows"]) {
    if (row["metric"] == "mape" && row["split"] == "test" && row["condition"] == "all" && row["S"].is_null() &&
        row["seed"] == 0) {
      trained = row["value"];
    }
  }
  EXPECT_DOUBLE_EQ(er["summary"]["mape_mean"].get<double>(), trained);

  const auto sw = run_cli({"-c", cfg.string(), "-o", (dir_ / "sweep").string(), "sweep", "--cache", cache,
                       "--checkpoint", ckpt});
  ASSERT_EQ(sw.code, 0) << sw.err;
  const auto csv = read(dir_ / "sweep" / "sweep.csv");
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "S,mape,acc15");
  std::vector<int> s;
  while (std::getline(in, line)) s.push_back(std::stoi(line.substr(0, line.find(','))));
  EXPECT_EQ(s, (std::vector<int>{10, 50}));
}

TEST_F(Cli, TrainIsByteIdenticalAcrossRuns) {
  const auto manifest = fleet();
  const auto cfg = write_config(dir_, "c.json", tiny_run({10}));
  std::vector<std::string> reports, checkpoints;
  for (int k = 0; k < 2; ++k) {
    fs::remove_all(dir_ / "train");
    const auto r = run_cli({"-c", cfg.string(), "-o", (dir_ / "train").string(), "train", "-m", manifest.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    reports.push_back(read(dir_ / "train" / "report.json"));
    checkpoints.push_back(read(dir_ / "train" / "checkpoint_seed1.blpw"));
  }
  EXPECT_EQ(reports[0], reports[1]);
  EXPECT_EQ(checkpoints[0], checkpoints[1]);
}

TEST_F(Cli, UnknownConfigKeyNamesPath) {
  const auto cfg = write_config(dir_, "c.json", {{"optim", {{"epoch", 3}}}});
  const auto r = run_cli({"-c", cfg.string(), "gradcheck"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("optim.epoch"), std::string::npos) << r.err;
}

TEST_F(Cli, SeedPrecedence) {
  const auto cfg = write_config(dir_, "c.json", {{"seed", 7}});
  ::setenv("BLP_SEED", "5", 1);
  ASSERT_EQ(run_cli({"-c", cfg.string(), "-o", (dir_ / "env").string(), "synth", "-n", "3"}).code, 0);
  ASSERT_EQ(run_cli({"-c", cfg.string(), "--seed", "6", "-o", (dir_ / "flag").string(), "synth", "-n", "3"}).code, 0);
  ::unsetenv("BLP_SEED");
  for (const char* s : {"5", "6", "7"}) {
    ASSERT_EQ(run_cli({"--seed", s, "-o", (dir_ / s).string(), "synth", "-n", "3"}).code, 0);
  }
  const auto labels = [&](const std::string& d) { return read(dir_ / d / "labels.csv"); };
  EXPECT_EQ(labels("env"), labels("5"));
  EXPECT_EQ(labels("flag"), labels("6"));
  EXPECT_NE(labels("5"), labels("7"));
  ::setenv("BLP_SEED", "x1", 1);
  EXPECT_EQ(run_cli({"-o", (dir_ / "bad").string(), "synth", "-n", "3"}).code, 2);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run_cli({"--help"}).code, 0);
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"train", "--bogus"}).code, 2);
  EXPECT_EQ(run_cli({"-o", (dir_ / "t").string(), "train"}).code, 2);
  ingest::write_text_file(dir_ / "bad.blpw", "not a checkpoint");
  const auto manifest = fleet();
  EXPECT_EQ(run_cli({"-o", (dir_ / "e").string(), "eval", "-m", manifest.string(), "--checkpoint",
                 (dir_ / "bad.blpw").string()})
                .code,
            3);
  EXPECT_EQ(run_cli({"-o", (dir_ / "e").string(), "eval", "-m", (dir_ / "missing.json").string(), "--checkpoint",
                 (dir_ / "bad.blpw").string()})
                .code,
            3);
}

TEST_F(Cli, GradcheckPasses) {
  const auto r = run_cli({"-o", (dir_ / "g").string(), "gradcheck"});
  EXPECT_EQ(r.code, 0) << r.out;
  const auto rep = read_json(dir_ / "g" / "report.json");
  EXPECT_EQ(rep["failed"], 0);
  EXPECT_GE(rep["rows"].size(), 50u);
}
