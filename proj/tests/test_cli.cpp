#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "siban/cli.hpp"

using namespace siban;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

// A tiny benchmark and run settings that train in well under a second.
class CliRuns : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fs::temp_directory_path() / ("siban_cli_" + std::to_string(::getpid())));
    fs::remove_all(*root_);
    fs::create_directories(*root_);
    write(*root_ / "c.json", R"({
  "scene": {"height": 32, "width": 32},
  "data": {"source": 8, "target_train": 8, "target_val": 6},
  "train": {"max_iter": 6, "batch_size": 2, "crop_size": 32, "eval_interval": 3},
  "eval": {"images_per_domain": 6, "probe_iters": 5, "max_pixels": 20}
})");
    const auto r = run({"gen-data", "--config", config(), "--out", data()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }
  static std::string config() { return (*root_ / "c.json").string(); }
  static std::string data() { return (*root_ / "data").string(); }
  static fs::path* root_;
};
fs::path* CliRuns::root_ = nullptr;

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  auto r = run({});
  EXPECT_EQ(r.code, 1);
  r = run({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("frobnicate"), std::string::npos) << r.err;
  r = run({"gen-data", "--out", "/tmp/x", "--bogus-flag"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--bogus-flag"), std::string::npos) << r.err;
  r = run({"gen-data"});
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, UnknownConfigKeysAreNamed) {
  const fs::path cfg = fs::temp_directory_path() / ("siban_cli_bad_" + std::to_string(::getpid()) + ".json");
  write(cfg, R"({"train": {"lr_gg": 0.1}})");
  auto r = run({"gen-data", "--config", cfg.string(), "--out", "/tmp/never"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("lr_gg"), std::string::npos) << r.err;
  write(cfg, R"({"trian": {}})");
  r = run({"gen-data", "--config", cfg.string(), "--out", "/tmp/never"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("trian"), std::string::npos) << r.err;
  fs::remove(cfg);
  r = run({"gen-data", "--set", "scene.heigth=32", "--out", "/tmp/never"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("heigth"), std::string::npos) << r.err;
  r = run({"gen-data", "--set", "noequals", "--out", "/tmp/never"});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists("/tmp/never"));
}

TEST(Cli, NegativeConstraintSettingsRejected) {
  for (const char* key : {"train.alpha=-1", "train.beta_init=-0.1", "train.I_c=-3", "train.lambda_adv=-1e-3"}) {
    const auto r = run({"train", "--data", "/nonexistent", "--out", "/tmp/never", "--set", key});
    EXPECT_EQ(r.code, 1) << key;
  }
}

TEST(Cli, OverrideParsing) {
  nlohmann::json doc = nlohmann::json::object();
  apply_override(doc, "train.lr_g=0.5");
  apply_override(doc, "train.mode=iban");
  apply_override(doc, "scene.class_names=[\"a\",\"b\"]");
  EXPECT_EQ(doc["train"]["lr_g"], 0.5);
  EXPECT_EQ(doc["train"]["mode"], "iban");
  EXPECT_EQ(doc["scene"]["class_names"].size(), 2u);
  EXPECT_THROW(apply_override(doc, ".x=1"), ConfigError);
  EXPECT_THROW(apply_override(doc, "a.=1"), ConfigError);
  const auto c = parse_config({{"train", {{"lr_g", 0.5}, {"mode", "iban"}}}});
  EXPECT_EQ(c.train.lr_g, 0.5);
  EXPECT_EQ(c.train.mode, Mode::kIban);
}

TEST(Cli, GradCheckBinaryExitsZero) {
  const std::string cmd = std::string(SIBAN_CLI_PATH) + " grad-check --trials 100 > /dev/null";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
}

TEST(Cli, BinaryReportsUsageError) {
  const std::string cmd = std::string(SIBAN_CLI_PATH) + " train --nope 2> /dev/null";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 1);
}

TEST_F(CliRuns, SeedFlagOverridesSceneSeed) {
  const auto a = *root_ / "seed_a", b = *root_ / "seed_b";
  ASSERT_EQ(run({"gen-data", "--config", config(), "--seed", "3", "--out", a.string()}).code, 0);
  ASSERT_EQ(run({"gen-data", "--config", config(), "--set", "scene.seed=3", "--out", b.string()}).code, 0);
  EXPECT_EQ(slurp(a / "source.bin"), slurp(b / "source.bin"));
  EXPECT_NE(slurp(a / "source.bin"), slurp(fs::path(data()) / "source.bin"));
}

TEST_F(CliRuns, TrainTwiceGivesIdenticalRunDirectories) {
  const auto a = *root_ / "run_a", b = *root_ / "run_b";
  for (const auto& dir : {a, b}) {
    const auto r = run({"train", "--config", config(), "--data", data(), "--out", dir.string(), "--mode", "siban",
                        "--seed", "7"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  std::size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    const auto name = entry.path().filename();
    if (name == "run_info.json") continue;
    EXPECT_EQ(slurp(entry.path()), slurp(b / name)) << name;
    ++compared;
  }
  EXPECT_GE(compared, 5u);
  EXPECT_TRUE(fs::exists(a / "ckpt_final"));
  EXPECT_TRUE(fs::exists(a / "ckpt_000003"));
}

TEST_F(CliRuns, UnknownModeIsValidationError) {
  const auto r = run({"train", "--config", config(), "--data", data(), "--out", (*root_ / "m").string(), "--mode",
                      "fancy"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("fancy"), std::string::npos) << r.err;
}

TEST_F(CliRuns, EvalMetricsMatchRecomputationFromPredictions) {
  const auto run_dir = *root_ / "run_eval";
  ASSERT_EQ(run({"train", "--config", config(), "--data", data(), "--out", run_dir.string(), "--mode", "iban"}).code, 0);
  const auto r = run({"eval", "--config", config(), "--checkpoint", (run_dir / "ckpt_final").string(), "--data", data(),
                      "--split", "target-val"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto metrics = nlohmann::json::parse(slurp(run_dir / "metrics.json"));
  const std::string pred = slurp(run_dir / "metrics_predictions.bin");

  // Ground truth straight from the data file: 18-byte header, then
  // image (3*H*W) and label (H*W) records.
  const std::string raw = slurp(fs::path(data()) / "target-val.bin");
  const std::size_t HW = 32 * 32, n = 6, K = 5;
  ASSERT_EQ(pred.size(), n * HW);
  std::vector<double> inter(K, 0), uni(K, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lab = 18 + i * 4 * HW + 3 * HW;
    for (std::size_t p = 0; p < HW; ++p) {
      const auto y = static_cast<unsigned char>(raw[lab + p]), q = static_cast<unsigned char>(pred[i * HW + p]);
      for (std::size_t k = 0; k < K; ++k) {
        inter[k] += (y == k && q == k);
        uni[k] += (y == k || q == k);
      }
    }
  }
  double miou = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < K; ++k) {
    if (uni[k] == 0) continue;
    miou += inter[k] / uni[k];
    ++present;
  }
  miou /= static_cast<double>(present);
  EXPECT_NEAR(metrics["miou"].get<double>(), miou, 1e-12);
  EXPECT_EQ(metrics["checkpoint_iter"], 6);
  EXPECT_TRUE(metrics["d_A"].is_number());

  const auto hidden = run({"eval", "--checkpoint", (run_dir / "ckpt_final").string(), "--data", data(), "--split",
                           "target-train", "--no-a-distance"});
  EXPECT_EQ(hidden.code, 1);
  const auto missing = run({"eval", "--checkpoint", (run_dir / "nope").string(), "--data", data()});
  EXPECT_EQ(missing.code, 2);
}

TEST_F(CliRuns, CurvesFeaturesAndADistance) {
  const auto run_dir = *root_ / "run_misc";
  ASSERT_EQ(run({"train", "--config", config(), "--data", data(), "--out", run_dir.string(), "--mode", "source-only"})
                .code,
            0);
  auto r = run({"export-curves", "--run", run_dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream csv(run_dir / "curves.csv");
  std::size_t rows = 0;
  for (std::string l; std::getline(csv, l);) ++rows;
  EXPECT_EQ(rows, 1u + 6u);

  const auto feats = run_dir / "f.csv";
  r = run({"dump-features", "--config", config(), "--checkpoint", (run_dir / "ckpt_final").string(), "--data", data(),
           "--split", "source", "--out", feats.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream fin(feats);
  rows = 0;
  for (std::string l; std::getline(fin, l);) ++rows;
  EXPECT_EQ(rows, 1u + 20u);

  r = run({"a-distance", "--config", config(), "--checkpoint", (run_dir / "ckpt_final").string(), "--data", data()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j["probe"].get<bool>());
  EXPECT_EQ(j["mode"], "source_only");
}
