// SPDX-License-Identifier: Apache-2.0
//
// Drives the raed binary end to end on a tiny corpus.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "raed/checkpoint.hpp"
#include "raed/config.hpp"
#include "raed/data.hpp"
#include "raed/decode.hpp"
#include "raed/tokens.hpp"

namespace raed {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome raed(const std::string& args) {
  const std::string cmd = std::string(RAED_BINARY) + " " + args + " 2>&1";
  Outcome r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, pipe)) > 0;) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

constexpr const char* kConfig = R"([model]
vocab = 6

[frontend]
input_dim = 8
channels = 2,2,2,2

[transformer]
encoder_blocks = 1
decoder_blocks = 1
width = 16
heads = 2

[train]
epochs = 2
batch_size = 4
peak_lr = 0.003

[lm]
embedding_dim = 8
hidden = 16
epochs = 2
batch_size = 8

[data]
tokens = 4
feature_dim = 8
frames_per_token = 4
min_length = 2
max_length = 4
min_prototype_distance = 2
grammar_successors = 2
train_size = 24
dev_size = 6
test_size = 8
)";

class Cli : public ::testing::Test {
 protected:
  // Each case gets its own directory so they run independently.
  void SetUp() override {
    dir_ = fs::temp_directory_path() / "raed_cli_test" /
           ::testing::UnitTest::GetInstance()->current_test_info()->name();
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "tiny.ini") << kConfig;
  }
  static std::string q(const std::string& rel) { return "'" + (dir_ / rel).string() + "'"; }
  static const Outcome& must(const Outcome& r) {
    EXPECT_EQ(r.code, 0) << r.output;
    return r;
  }
  static fs::path dir_;
};

fs::path Cli::dir_;

TEST_F(Cli, FullPipeline) {
  must(raed("gen-data " + q("tiny.ini") + " --out " + q("data")));
  for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl", "vocab.txt", "data.ini",
                        "generation.json", "test.ref.txt"})
    EXPECT_TRUE(fs::exists(dir_ / "data" / f)) << f;
  const auto gen = nlohmann::json::parse(slurp(dir_ / "data/generation.json"));
  EXPECT_EQ(gen["splits"]["test"], 8);

  must(raed("lm-train " + q("data/train.jsonl") + " --config " + q("tiny.ini") +
            " --held-out " + q("data/dev.jsonl") + " --out " + q("lm.raed")));
  EXPECT_TRUE(fs::exists(dir_ / "lm.raed.metrics.jsonl"));

  must(raed("train " + q("tiny.ini") + " --data " + q("data") + " --out " + q("a")));
  must(raed("train " + q("tiny.ini") + " --data " + q("data") + " --out " + q("b")));
  must(raed("train " + q("tiny.ini") + " --data " + q("data") + " --out " + q("g0") +
            " --relax-gamma 0.0"));
  const std::string metrics = slurp(dir_ / "a/metrics.jsonl");
  EXPECT_FALSE(metrics.empty());
  EXPECT_EQ(slurp(dir_ / "b/metrics.jsonl"), metrics);
  EXPECT_EQ(slurp(dir_ / "g0/metrics.jsonl"), metrics);
  EXPECT_EQ(slurp(dir_ / "b/best.raed"), slurp(dir_ / "a/best.raed"));

  const std::string ckpt = q("a/best.raed"), test = q("data/test.jsonl");
  must(raed("decode " + ckpt + " " + test + " --lm " + q("lm.raed") + " --out " + q("lm1") +
            " --dump-attention " + q("attn.raed")));
  must(raed("decode " + ckpt + " " + test + " --lm " + q("lm.raed") + " --out " + q("lm4") +
            " --threads 4 --nbest 3"));
  must(raed("decode " + ckpt + " " + test + " --lm " + q("lm.raed") + " --out " + q("lm2")));
  EXPECT_EQ(slurp(dir_ / "lm2.jsonl"), slurp(dir_ / "lm1.jsonl"));
  EXPECT_EQ(slurp(dir_ / "lm4.txt"), slurp(dir_ / "lm1.txt"));

  // Unit beam without the LM reproduces greedy decoding from the library.
  must(raed("decode " + ckpt + " " + test + " --no-lm --beam 1 --out " + q("greedy")));
  const ExperimentConfig config = read_config(dir_ / "a/config.ini");
  auto model = make_model(config.model, 0);
  assign_parameters(model->parameters(), read_tensor_file(dir_ / "a/best.raed"));
  const auto set = load_examples(dir_ / "data/test.jsonl");
  std::ifstream lines(dir_ / "greedy.jsonl");
  std::size_t count = 0;
  for (std::string line; std::getline(lines, line); ++count) {
    const auto j = nlohmann::json::parse(line);
    ASSERT_LT(count, set.size());
    EXPECT_EQ(j["id"], set[count].id);
    NoGradGuard guard;
    const Encoded enc = model->encode(set[count].features, {});
    std::size_t frames = 0;
    for (auto v : enc.validity) frames += v;
    std::vector<int> g = greedy_decode(ModelScorer(*model, enc),
                                       output_length_cap(config.decode, frames));
    if (!g.empty() && g.back() == kEosId) g.pop_back();
    EXPECT_EQ(j["tokens"].get<std::vector<int>>(), g) << set[count].id;
  }
  EXPECT_EQ(count, set.size());

  const Outcome score = must(raed("score " + q("data/test.ref.txt") + " " + q("lm1.txt") +
                                  " --json " + q("score.json")));
  EXPECT_NE(score.output.find("TOTAL"), std::string::npos);
  const auto s = nlohmann::json::parse(slurp(dir_ / "score.json"));
  EXPECT_GE(s["wer"].get<double>(), 0.0);
  const Outcome entropy = must(raed("analyze-attention " + q("attn.raed") + " " + q("attn.raed")));
  EXPECT_NE(entropy.output.find("+0.00%"), std::string::npos) << entropy.output;
}

TEST_F(Cli, ErrorsUseCategoryLinesAndExitCodes) {
  std::ofstream(dir_ / "dup.txt") << "u1 a\nu1 b\n";
  const Outcome dup = raed("score " + q("dup.txt") + " " + q("dup.txt"));
  EXPECT_EQ(dup.code, 1);
  EXPECT_EQ(dup.output.rfind("raed: error[format]: ", 0), 0u) << dup.output;
  EXPECT_EQ(dup.output.find('\n'), dup.output.size() - 1);

  const Outcome missing = raed("score " + q("nope.txt") + " " + q("nope.txt"));
  EXPECT_EQ(missing.code, 2);
  EXPECT_EQ(missing.output.rfind("raed: error[usage]: ", 0), 0u) << missing.output;

  fs::create_directories(dir_ / "data");
  std::ofstream(dir_ / "bad.ini") << "[train]\nepochs = many\n";
  const Outcome bad = raed("train " + q("bad.ini") + " --data " + q("data") + " --out " + q("x"));
  EXPECT_EQ(bad.code, 1);
  EXPECT_EQ(bad.output.rfind("raed: error[config]: ", 0), 0u) << bad.output;

  const Outcome usage = raed("train " + q("tiny.ini") + " --relax-gamma 1.5 --data x --out y");
  EXPECT_EQ(usage.code, 2);
  EXPECT_EQ(usage.output.rfind("raed: error[usage]: ", 0), 0u) << usage.output;
  EXPECT_EQ(raed("no-such-command").code, 2);
  EXPECT_EQ(raed("").code, 2);
}

}  // namespace
}  // namespace raed
