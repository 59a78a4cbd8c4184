#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace {

namespace fs = std::filesystem;

int run(const std::string& args) {
  const std::string cmd =
      std::string(ICL_LAB_BINARY) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1 || !WIFEXITED(status)) return -1;
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTinyConfig =
    "d_x = 32\n"
    "d_y = 32\n"
    "K1 = 2\n"
    "K2 = 4\n"
    "u_norm = 4\n"
    "q_norm = 4\n"
    "kappa_x = 0.5\n"
    "kappa_y = 0.5\n"
    "L = 4\n"
    "sigma_xi = 0.01\n"
    "m = 8\n"
    "sigma0 = 0.1\n"
    "sigma1 = 0.05\n"
    "B = 8\n"
    "lambda = 0.01\n"
    "gamma = 100\n"
    "T = 40\n"
    "eval_every = 20\n"
    "n_test = 100\n"
    "seed = 7\n"
    "noise_draws = 16\n"
    "ood1.variant = length_shift\n"
    "ood1.name = longer\n"
    "ood1.L_star = 6\n"
    "ood2.variant = z_shift\n"
    "ood2.name = multi_concept\n";

class CliTest : public ::testing::Test {
 protected:
  fs::path dir;
  fs::path cfg_path;

  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("icl_cli_test_" + std::to_string(::getpid()) + "_" +
           ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir);
    cfg_path = dir / "tiny.cfg";
    std::ofstream(cfg_path) << kTinyConfig;
  }
  void TearDown() override {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
  std::string out(const char* sub) const { return (dir / sub).string(); }
};

TEST_F(CliTest, TrainProducesArtifacts) {
  ASSERT_EQ(run("train --config " + cfg_path.string() + " --out " + out("a")),
            0);
  const std::string csv = slurp(dir / "a" / "metrics.csv");
  ASSERT_FALSE(csv.empty());
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "step,train_loss,test_loss,zero_one_error,tie_count,"
            "correct_attention,alphaQK_max,betaQK_max,complement_max,"
            "noise_qk_max,alphaO_max,betaO_absmax,rhoO_max,noise_o_max");
  // step 0 plus records at 20 and 40.
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_TRUE(fs::exists(dir / "a" / "checkpoint.bin"));
  std::ifstream min(dir / "a" / "manifest.json");
  nlohmann::json manifest = nlohmann::json::parse(min);
  EXPECT_EQ(manifest.at("steps").get<long>(), 40);
  EXPECT_EQ(manifest.at("master_seed").get<std::uint64_t>(), 7u);

  // Same config, same seed: byte-identical metrics.
  ASSERT_EQ(run("train --config " + cfg_path.string() + " --out " + out("b")),
            0);
  EXPECT_EQ(csv, slurp(dir / "b" / "metrics.csv"));

  // Seed override changes the trajectory and is recorded in the checkpoint.
  ASSERT_EQ(run("train --config " + cfg_path.string() + " --out " + out("c") +
                " --seed 8"),
            0);
  EXPECT_NE(csv, slurp(dir / "c" / "metrics.csv"));
}

TEST_F(CliTest, ExitCodesForBadInput) {
  // Unknown field -> config error (2).
  std::ofstream(dir / "bad.cfg") << kTinyConfig << "frobnicate = 1\n";
  EXPECT_EQ(run("train --config " + (dir / "bad.cfg").string() + " --out " +
                out("x")),
            2);
  // Missing config file -> config error (2).
  EXPECT_EQ(run("train --config " + (dir / "nope.cfg").string() + " --out " +
                out("x")),
            2);
  // Missing required flag -> usage error (2).
  EXPECT_EQ(run("train --out " + out("x")), 2);
  // Not a checkpoint -> domain error (3).
  EXPECT_EQ(run("eval-ood --checkpoint " + cfg_path.string() + " --config " +
                cfg_path.string() + " --out " + out("x")),
            3);
}

TEST_F(CliTest, EvalOodWritesMetricsAndChecksGeometry) {
  ASSERT_EQ(run("train --config " + cfg_path.string() + " --out " + out("a")),
            0);
  const std::string ck = (dir / "a" / "checkpoint.bin").string();
  ASSERT_EQ(run("eval-ood --checkpoint " + ck + " --config " +
                cfg_path.string() + " --out " + out("ood")),
            0);
  const std::string csv = slurp(dir / "ood" / "ood_metrics.csv");
  ASSERT_FALSE(csv.empty());
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "name,variant,L,n,zero_one_error,tie_count,test_loss,"
            "correct_attention,attention_excluded");
  EXPECT_NE(csv.find("longer,length_shift,6,100,"), std::string::npos);
  EXPECT_NE(csv.find("multi_concept,z_shift,4,100,"), std::string::npos);

  // A config whose geometry disagrees with the checkpoint is rejected (3).
  std::string shifted = kTinyConfig;
  shifted.replace(shifted.find("u_norm = 4"), 10, "u_norm = 5");
  std::ofstream(dir / "shifted.cfg") << shifted;
  EXPECT_EQ(run("eval-ood --checkpoint " + ck + " --config " +
                (dir / "shifted.cfg").string() + " --out " + out("ood2")),
            3);
}

TEST_F(CliTest, TheoryReportAndCurves) {
  ASSERT_EQ(
      run("theory --config " + cfg_path.string() + " --out " + out("th")), 0);
  std::ifstream in(dir / "th" / "theory_report.json");
  nlohmann::json j = nlohmann::json::parse(in);
  for (const char* key :
       {"sigma_s_star", "sigma_s_star_excess", "w_star", "nu", "kappa_bound",
        "T_hat", "T_eps", "expected_attention_at_init", "condition_warnings"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_GE(j.at("sigma_s_star").get<double>(), 0.5);
  EXPECT_GT(j.at("nu").get<double>(), 0.0);
  for (const char* f :
       {"ode_mlp_sandwich.csv", "ode_system1.csv", "ode_system2.csv"})
    EXPECT_TRUE(fs::exists(dir / "th" / f)) << f;
  const std::string s2 = slurp(dir / "th" / "ode_system2.csv");
  EXPECT_EQ(s2.substr(0, s2.find('\n')),
            "t,lower,upper,discrete,z_lower,z_upper,z_discrete");
}

TEST_F(CliTest, SelfcheckPasses) {
  EXPECT_EQ(run("selfcheck"), 0);
}

}  // namespace
