#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mixlab/cli.hpp"

using namespace mixlab;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "mixlab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines_with(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) n += line.find(needle) != std::string::npos;
  return n;
}

std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  return out;
}

class CliRun : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("mixlab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream corpus(path("corpus.txt"));
    for (int i = 0; i < 60; ++i) corpus << "the quick brown fox " << i << " jumps over the lazy dog. ";
    Rng rng(3);
    std::ofstream(path("pairs.tsv")) << format_pairs(synthetic_pairs(80, rng));
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::vector<std::string> small_clm(const std::string& out, const std::string& seed = "1") const {
    return {"--seed", seed, "--out", path(out), "train-clm", "--corpus", path("corpus.txt"), "--d-model", "16", "--n-ctx", "16",
            "--steps", "10", "--batch-size", "4"};
  }

  fs::path dir_;
};

}  // namespace

TEST(CliJl, PrintsTheMinimumDimension) {
  const struct {
    const char* m;
    const char* n_min;
    const char* rounded;
  } cases[] = {{"1e10", "185", "184"}, {"1.5e13", "243", "240"}, {"1.5e19", "354", "352"}};
  for (const auto& c : cases) {
    const Result r = invoke({"jl-dim", "--m", c.m});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream is(r.out);
    std::string header, row;
    std::getline(is, header);
    std::getline(is, row);
    EXPECT_EQ(header, "m,eps,bound,n_min,lnm_rounded");
    const auto f = csv_fields(row);
    ASSERT_EQ(f.size(), 5u);
    EXPECT_EQ(f[3], c.n_min) << c.m;
    EXPECT_EQ(f[4], c.rounded) << c.m;
  }
}

TEST(CliJl, BadArgumentsAreUsageErrors) {
  EXPECT_EQ(invoke({"jl-dim", "--m", "1"}).code, 2);
  EXPECT_EQ(invoke({"jl-dim", "--m", "100", "--eps", "1.5"}).code, 2);
}

TEST(CliUsage, UnknownOrMissingSubcommandExitsTwo) {
  EXPECT_EQ(invoke({"frobnicate"}).code, 2);
  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"train-clm", "--steps", "ten"}).code, 2);
  EXPECT_EQ(invoke({"--help"}).code, 0);
}

TEST_F(CliRun, MissingCheckpointIsARuntimeError) {
  const Result r = invoke({"--out", path("o"), "invert", "--checkpoint", path("nope.ckpt")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("nope.ckpt"), std::string::npos) << r.err;
}

TEST_F(CliRun, TrainClmWritesMetricsEchoAndCheckpoint) {
  const Result r = invoke(small_clm("run"));
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string metrics = slurp(path("run/metrics.csv"));
  EXPECT_EQ(count_lines_with(metrics, ",train,"), 10u);
  EXPECT_GE(count_lines_with(metrics, ",eval,"), 1u);
  const std::string echo = slurp(path("run/config.txt"));
  for (const char* key : {"command=train-clm", "seed=1", "family=masked_mixer", "d_model=16", "steps=10", "batch_size=4", "lr="})
    EXPECT_NE(echo.find(key), std::string::npos) << key;
  EXPECT_NO_THROW(load_checkpoint<float>(path("run/final.ckpt")));
  EXPECT_TRUE(fs::exists(path("run/chunks.bin")));
}

TEST_F(CliRun, SameSeedSameMetrics) {
  ASSERT_EQ(invoke(small_clm("a")).code, 0);
  ASSERT_EQ(invoke(small_clm("b")).code, 0);
  ASSERT_EQ(invoke(small_clm("c", "2")).code, 0);
  EXPECT_EQ(slurp(path("a/metrics.csv")), slurp(path("b/metrics.csv")));
  EXPECT_NE(slurp(path("a/metrics.csv")), slurp(path("c/metrics.csv")));
}

TEST_F(CliRun, ConfigFileAppliesAndFlagsWin) {
  std::ofstream(path("cfg.txt")) << "d_model=16\nn_ctx=16\nsteps=3\nbatch_size=2\n";
  const Result r = invoke({"--config", path("cfg.txt"), "--out", path("o"), "train-clm", "--corpus", path("corpus.txt"), "--steps", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string echo = slurp(path("o/config.txt"));
  EXPECT_NE(echo.find("steps=4"), std::string::npos);
  EXPECT_NE(echo.find("batch_size=2"), std::string::npos);
  std::ofstream(path("bad.txt")) << "colour=blue\n";
  EXPECT_EQ(invoke({"--config", path("bad.txt"), "--out", path("o"), "train-clm", "--corpus", path("corpus.txt")}).code, 2);
}

TEST_F(CliRun, InvalidModelSettingsAreUsageErrors) {
  EXPECT_EQ(invoke({"--out", path("o"), "train-clm", "--corpus", path("corpus.txt"), "--family", "nonsense"}).code, 2);
  EXPECT_EQ(invoke({"--out", path("o"), "train-clm", "--corpus", path("corpus.txt"), "--n-ctx", "4", "--kernel-k", "9"}).code, 2);
}

TEST_F(CliRun, GenerateAndInvertFromATrainedCheckpoint) {
  ASSERT_EQ(invoke(small_clm("run")).code, 0);
  const Result g = invoke({"--out", path("gen"), "generate", "--checkpoint", path("run/final.ckpt"), "--prompt", "the", "--n-new", "5"});
  ASSERT_EQ(g.code, 0) << g.err;
  EXPECT_EQ(g.out.substr(0, 3), "the");

  const Result inv = invoke({"--out", path("inv"), "invert", "--checkpoint", path("run/final.ckpt"), "--samples", "2", "--iters", "5"});
  ASSERT_EQ(inv.code, 0) << inv.err;
  const std::string csv = slurp(path("inv/inversion.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(slurp(path("inv/config.txt")).find("eta=0.1\n"), std::string::npos);
}

TEST_F(CliRun, RetrievalPipeline) {
  ASSERT_EQ(invoke(small_clm("lm")).code, 0);
  const std::string ckpt = path("lm/final.ckpt");

  const Result e = invoke({"--out", path("emb"), "embed", "--checkpoint", ckpt, "--pairs", path("pairs.tsv")});
  ASSERT_EQ(e.code, 0) << e.err;
  ASSERT_TRUE(fs::exists(path("emb/embeddings.bin")));

  const Result ind = invoke({"--out", path("ind"), "train-retrieval-indirect", "--embeddings", path("emb/embeddings.bin"), "--c", "8",
                          "--batch-size", "4", "--steps", "3", "--eval-fraction", "0.25"});
  ASSERT_EQ(ind.code, 0) << ind.err;
  EXPECT_EQ(count_lines_with(slurp(path("ind/metrics.csv")), ",train,"), 3u);

  const Result nce = invoke({"--out", path("nce"), "train-retrieval-infonce", "--checkpoint", ckpt, "--pairs", path("pairs.tsv"), "--steps",
                          "2", "--negatives", "4", "--accumulate", "2", "--sizes", "8", "--trials", "20", "--eval-fraction", "0.25"});
  ASSERT_EQ(nce.code, 0) << nce.err;
  EXPECT_NE(slurp(path("nce/accuracy.csv")).find("n,trials,top1_accuracy\n8,20,"), std::string::npos);

  const Result ev = invoke({"--out", path("ev"), "retrieve-eval", "--checkpoint", ckpt, "--pairs", path("pairs.tsv"), "--sizes", "8,1000",
                         "--trials", "20"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(std::count(ev.out.begin(), ev.out.end(), '\n'), 2);
}

TEST_F(CliRun, DoublePrecisionRuns) {
  auto args = small_clm("d");
  args.insert(args.begin(), {"--precision", "check64"});
  ASSERT_EQ(invoke(args).code, 0);
  EXPECT_EQ(decode_container(read_file_bytes(path("d/final.ckpt"))).tensors.front().dtype, "f64");
  EXPECT_EQ(invoke({"--precision", "f16", "jl-dim", "--m", "10"}).code, 2);
}

TEST(CliBinary, ExitCodesFromTheExecutable) {
  const char* exe = std::getenv("MIXLAB_CLI");
  if (!exe) GTEST_SKIP() << "MIXLAB_CLI not set";
  auto status = [&](const std::string& args) {
    const int raw = std::system((std::string(exe) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  EXPECT_EQ(status("jl-dim --m 1e10"), 0);
  EXPECT_EQ(status("frobnicate"), 2);
  EXPECT_EQ(status("--out /tmp/mixlab_cli_bin invert --checkpoint /nonexistent/x.ckpt"), 1);
}
