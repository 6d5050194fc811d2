#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "dcn/checkpoint.hpp"
#include "run_config.hpp"

namespace dcn::cli {
namespace {

namespace fs = std::filesystem;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("dcn_cli_test_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  struct Result {
    int status;
    std::string out;
    std::string log;
  };
  Result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "dcn");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, log;
    const int status = main_entry(static_cast<int>(argv.size()), argv.data(), out, log);
    return {status, out.str(), log.str()};
  }
  std::optional<RunConfig> parse(std::vector<std::string> args) {
    args.insert(args.begin(), "dcn");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out;
    return parse_command_line(static_cast<int>(argv.size()), argv.data(), out);
  }
  fs::path write_file(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
    return dir_ / name;
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<fs::path> tree(const fs::path& root) {
  std::vector<fs::path> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root)) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

TEST(ConfigText, ParsesKeyValueLines) {
  const auto raw = parse_config_text("# comment\nk = 4\n\nlambda=0.25  # trailing\n", "f");
  EXPECT_EQ(raw.at("k"), "4");
  EXPECT_EQ(raw.at("lambda"), "0.25");
  EXPECT_EQ(raw.size(), 2u);
}

TEST(ConfigText, UnknownKeyIsNamed) {
  try {
    parse_config_text("kk = 3\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'kk'"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("run.cfg:1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config_text("k 3\n", "f"), ConfigError);
  EXPECT_THROW(parse_config_text("k=3\nk=4\n", "f"), ConfigError);
}

TEST(ResolveConfig, DefaultsFromEmptyConfig) {
  const RunConfig c = resolve_config(Command::bench, {});
  EXPECT_EQ(c.preset, "cmnist");
  EXPECT_EQ(c.k, 8u);
  EXPECT_EQ(c.input.height, 100u);
  EXPECT_EQ(c.dcn.context_px, family_config("cmnist").context_px);
  const RunConfig s = resolve_config(Command::bench, {{"preset", "seqdesk"}});
  EXPECT_EQ(s.scales, (std::vector<double>{1.0, 0.75, 0.5}));
  EXPECT_TRUE(s.sequence_family());
}

TEST(ResolveConfig, ErrorsNameTheKey) {
  auto message = [](const RawConfig& raw, Command cmd = Command::bench) {
    try {
      resolve_config(cmd, raw);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message({{"k", "abc"}}).find("'k'"), std::string::npos);
  EXPECT_NE(message({{"lambda", "1.5"}}).find("'lambda'"), std::string::npos);
  EXPECT_NE(message({{"scales", "1,-1"}}).find("'scales'"), std::string::npos);
  EXPECT_NE(message({{"preset", "medium"}}).find("'preset'"), std::string::npos);
  EXPECT_NE(message({{"mode", "both"}}).find("'mode'"), std::string::npos);
  EXPECT_NE(message({{"optimizer", "rmsprop"}}).find("'optimizer'"), std::string::npos);
  EXPECT_NE(message({}, Command::eval).find("'data'"), std::string::npos);
  EXPECT_NE(message({{"height", "10"}}, Command::synth).find("canvas"), std::string::npos);
  EXPECT_NE(message({{"kind", "fancy"}}, Command::synth).find("'kind'"), std::string::npos);
  EXPECT_NE(message({{"input", "100by100"}}).find("100by100"), std::string::npos);
}

TEST_F(CliTest, FlagOverridesFile) {
  const auto cfg = write_file("run.cfg", "k = 4\nlambda = 0.2\n");
  const auto c = parse({"bench", "--config", cfg.string(), "--k", "8"});
  ASSERT_TRUE(c);
  EXPECT_EQ(c->k, 8u);
  EXPECT_EQ(c->lambda, 0.2);
  const auto file_only = parse({"bench", "--config", cfg.string()});
  EXPECT_EQ(file_only->k, 4u);
}

TEST_F(CliTest, EchoedConfigReproducesRun) {
  const auto c = parse({"bench", "--preset", "seqdesk", "--k", "5", "--scales", "1,0.5", "--seed", "3",
                        "--lambda", "0.125", "--out", path("x")});
  std::ostringstream echo;
  echo_config(echo, *c);
  const auto again = resolve_config(Command::bench, parse_config_text(echo.str(), "echo"));
  std::ostringstream echo2;
  echo_config(echo2, again);
  EXPECT_EQ(echo.str(), echo2.str());
  EXPECT_EQ(again.scales, (std::vector<double>{1.0, 0.5}));
  EXPECT_EQ(again.seed, 3u);
}

TEST_F(CliTest, UnknownFlagAndCommand) {
  auto r = run_cli({"bench", "--kk", "3"});
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.log.find("kk"), std::string::npos);
  r = run_cli({"frobnicate"});
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.log.find("frobnicate"), std::string::npos);
  // one diagnostic line
  EXPECT_EQ(std::count(r.log.begin(), r.log.end(), '\n'), 1);
}

TEST_F(CliTest, SynthIsDeterministic) {
  for (const char* sub : {"a", "b"}) {
    const auto r = run_cli({"synth", "--kind", "cluttered", "--n", "100", "--seed", "7", "--samples", "2",
                            "--out", path(sub)});
    ASSERT_EQ(r.status, 0) << r.log;
  }
  EXPECT_EQ(slurp(dir_ / "a/data.dcn"), slurp(dir_ / "b/data.dcn"));
  EXPECT_EQ(tree(dir_ / "a"), tree(dir_ / "b"));
  EXPECT_EQ(tree(dir_ / "a"),
            (std::vector<fs::path>{"data.dcn", "samples", "samples/00000.pgm", "samples/00001.pgm"}));
  const auto data = read_container(dir_ / "a/data.dcn");
  EXPECT_EQ(data.size(), 100u);
  EXPECT_EQ(data.height, 40u);
}

TEST_F(CliTest, BenchReportsDeskCounts) {
  const auto r = run_cli({"bench", "--preset", "cmnist", "--input", "100x100", "--k", "8", "--out", path("bench")});
  ASSERT_EQ(r.status, 0) << r.log;
  EXPECT_NE(r.out.find("dcn,100,100,8,26667756"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("fine,100,100,0,82951584"), std::string::npos) << r.out;
  const std::string csv = slurp(dir_ / "bench/bench.csv");
  EXPECT_EQ(csv, r.out);
  std::istringstream rows(csv);
  std::string line;
  std::getline(rows, line);
  EXPECT_EQ(line, "plan,input_h,input_w,k,total_mults");
  while (std::getline(rows, line))
    if (line.rfind("dcn,", 0) == 0) {
      const double total = std::stod(line.substr(line.rfind(',') + 1));
      EXPECT_NEAR(total, 27.7e6, 2.77e6);
    }
  EXPECT_FALSE(slurp(dir_ / "bench/layers.csv").empty());
  EXPECT_NE(slurp(dir_ / "bench/sweep.csv").find("dcn,400,400,8,"), std::string::npos);
  // echoed configuration
  EXPECT_NE(r.log.find("k=8\n"), std::string::npos);
}

TEST_F(CliTest, EvalWithKZeroEqualsCoarse) {
  ASSERT_EQ(run_cli({"synth", "--n", "40", "--seed", "3", "--out", path("data")}).status, 0);
  auto stacks = build_family<double>("cmnist", 5);
  save_checkpoint(dir_ / "model.ckpt", stacks.named_state());
  const auto dcn = run_cli({"eval", "--data", path("data/data.dcn"), "--checkpoint", path("model.ckpt"),
                            "--model", "dcn", "--k", "0", "--out", path("e1")});
  const auto coarse = run_cli({"eval", "--data", path("data/data.dcn"), "--checkpoint",
                               path("model.ckpt"), "--model", "coarse", "--out", path("e2")});
  ASSERT_EQ(dcn.status, 0) << dcn.log;
  ASSERT_EQ(coarse.status, 0) << coarse.log;
  EXPECT_EQ(dcn.out, coarse.out);
  EXPECT_EQ(dcn.out.rfind("error ", 0), 0u);
}

TEST_F(CliTest, TrainWritesLogAndCheckpoint) {
  ASSERT_EQ(run_cli({"synth", "--n", "24", "--seed", "4", "--out", path("data")}).status, 0);
  const auto r = run_cli({"train", "--data", path("data/data.dcn"), "--preset", "cmnist", "--epochs", "2",
                          "--k", "2", "--batch", "8", "--checkpoint-every", "1", "--out", path("t")});
  ASSERT_EQ(r.status, 0) << r.log;
  EXPECT_EQ(tree(dir_ / "t"),
            (std::vector<fs::path>{"checkpoints", "checkpoints/epoch_1.ckpt", "checkpoints/epoch_2.ckpt",
                                   "model.ckpt", "train_log.csv"}));
  EXPECT_EQ(slurp(dir_ / "t/train_log.csv").rfind("epoch,train_loss,test_error,hint_distance\n", 0), 0u);
  const auto e = run_cli({"eval", "--data", path("data/data.dcn"), "--checkpoint", path("t/model.ckpt"),
                          "--out", path("e")});
  EXPECT_EQ(e.status, 0) << e.log;
}

TEST_F(CliTest, FailedRunRemovesPartialOutputs) {
  // Multi-digit labels cannot train a single-digit classifier; the failure
  // comes after the output directory and checkpoint folder exist.
  ASSERT_EQ(run_cli({"synth", "--kind", "centred", "--n", "20", "--min-digits", "2", "--out", path("seq")})
                .status,
            0);
  const auto r = run_cli({"train", "--data", path("seq/data.dcn"), "--preset", "toy", "--epochs", "1",
                          "--checkpoint-every", "1", "--out", path("t")});
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.log.find("error: "), std::string::npos);
  EXPECT_TRUE(tree(dir_ / "t").empty()) << r.log;
}

TEST_F(CliTest, ConfigErrorsBeforeAnyWork) {
  const auto r = run_cli({"synth", "--n", "10", "--lambda", "3", "--out", path("never")});
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.log.find("'lambda'"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "never"));
}

TEST_F(CliTest, OutputsRollBack) {
  const fs::path root = dir_ / "o";
  {
    Outputs outputs(root);
    std::ofstream(outputs.file("a/b/c.txt")) << "x";
    std::ofstream(outputs.file("d.txt")) << "y";
  }
  EXPECT_FALSE(fs::exists(root));
  fs::create_directories(root);
  std::ofstream(root / "keep.txt") << "z";
  {
    Outputs outputs(root);
    std::ofstream(outputs.file("new.txt")) << "x";
    std::ofstream(outputs.directory("dir") / "inner.txt") << "x";
  }
  EXPECT_EQ(tree(root), (std::vector<fs::path>{"keep.txt"}));
  {
    Outputs outputs(root);
    std::ofstream(outputs.file("new.txt")) << "x";
    outputs.commit();
  }
  EXPECT_TRUE(fs::exists(root / "new.txt"));
}

TEST_F(CliTest, SaliencyExports) {
  ASSERT_EQ(run_cli({"synth", "--n", "3", "--seed", "1", "--out", path("data")}).status, 0);
  auto stacks = build_family<double>("cmnist", 2);
  save_checkpoint(dir_ / "m.ckpt", stacks.named_state());
  const auto r = run_cli({"saliency", "--data", path("data/data.dcn"), "--checkpoint", path("m.ckpt"),
                          "--index", "1", "--count", "2", "--k", "3", "--out", path("s")});
  ASSERT_EQ(r.status, 0) << r.log;
  EXPECT_EQ(tree(dir_ / "s"),
            (std::vector<fs::path>{"input_00001.pgm", "input_00002.pgm", "patches_00001.txt",
                                   "patches_00002.txt", "saliency_00001.pgm", "saliency_00002.pgm"}));
  std::istringstream boxes(slurp(dir_ / "s/patches_00001.txt"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(boxes, line)) ++lines;
  EXPECT_EQ(lines, 3u);
  const auto bad = run_cli({"saliency", "--data", path("data/data.dcn"), "--checkpoint", path("m.ckpt"),
                            "--index", "2", "--count", "2", "--out", path("s2")});
  EXPECT_NE(bad.status, 0);
  EXPECT_NE(bad.log.find("'index'"), std::string::npos);
}

}  // namespace
}  // namespace dcn::cli
