// SPDX-License-Identifier: Apache-2.0

#include "raed/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "raed/checkpoint.hpp"
#include "raed/decode.hpp"
#include "raed/error.hpp"

namespace raed {
namespace {

namespace fs = std::filesystem;

Tensor ones(std::size_t t, std::size_t f) { return Tensor::full({t, f}, 1.0); }

std::size_t zeros_in(const Tensor& x) {
  std::size_t n = 0;
  for (double v : x.data()) n += v == 0.0;
  return n;
}

TEST(SpecAugment, ZeroMasksAreIdentity) {
  Rng rng(1);
  Tensor x = ones(30, 8);
  const Tensor y = spec_augment(x, 0, 25, 0, 7, rng);
  EXPECT_EQ(zeros_in(y), 0u);
  // Unused axes skip the width check.
  EXPECT_NO_THROW(spec_augment(ones(4, 4), 0, 100, 0, 100, rng));
}

TEST(SpecAugment, ZeroWidthIsIdentity) {
  Rng rng(2);
  const Tensor y = spec_augment(ones(30, 8), 3, 0, 2, 0, rng);
  EXPECT_EQ(zeros_in(y), 0u);
}

TEST(SpecAugment, MaskedCellsMatchCountingOracle) {
  Rng rng(3);
  std::size_t disjoint_cases = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t t = 20 + rng.below(30), f = 6 + rng.below(10);
    std::vector<MaskStripe> stripes;
    const Tensor y = spec_augment(ones(t, f), 2, 8, 1, 4, rng, &stripes);
    ASSERT_EQ(stripes.size(), 3u);
    // Union of stripes computed cell by cell.
    std::set<std::pair<std::size_t, std::size_t>> cells;
    std::size_t time_total = 0, freq_total = 0;
    for (const auto& s : stripes) {
      ASSERT_LE(s.start + s.width, s.time ? t : f);
      for (std::size_t k = s.start; k < s.start + s.width; ++k) {
        for (std::size_t o = 0; o < (s.time ? f : t); ++o)
          cells.emplace(s.time ? k : o, s.time ? o : k);
      }
      (s.time ? time_total : freq_total) += s.width;
    }
    EXPECT_EQ(zeros_in(y), cells.size());
    const bool time_disjoint = stripes[0].start + stripes[0].width <= stripes[1].start ||
                               stripes[1].start + stripes[1].width <= stripes[0].start;
    if (time_disjoint && freq_total == 0) {
      ++disjoint_cases;
      EXPECT_EQ(zeros_in(y), time_total * f);
    }
  }
  EXPECT_GT(disjoint_cases, 0u);
}

TEST(SpecAugment, RejectsWidthReachingAxis) {
  Rng rng(4);
  EXPECT_THROW(spec_augment(ones(10, 8), 1, 10, 0, 0, rng), ValueError);
  EXPECT_THROW(spec_augment(ones(10, 8), 0, 0, 1, 8, rng), ValueError);
}

// ---------------------------------------------------------------------------

std::vector<Example> to_examples(const Split& split) {
  std::vector<Example> out;
  for (const auto& u : split.utterances) out.push_back({u.id, u.tokens, u.features});
  return out;
}

struct TinyData {
  std::vector<Example> train, dev;
};

const TinyData& tiny_data() {
  static const TinyData data = [] {
    ToyTaskSpec s;
    s.tokens = 4;
    s.feature_dim = 8;
    s.frames_per_token = 4;
    s.min_length = 2;
    s.max_length = 4;
    s.train_size = 24;
    s.dev_size = 6;
    s.test_size = 1;
    s.min_prototype_distance = 2.0;
    s.grammar_successors = 2;
    const GeneratedData g = generate_dataset(s);
    return TinyData{to_examples(g.splits[0]), to_examples(g.splits[1])};
  }();
  return data;
}

ModelConfig tiny_model(double gamma = 0.0,
                       RelaxationMode mode = RelaxationMode::kFixed) {
  ModelConfig c;
  auto& t = c.transformer;
  t.frontend.input_dim = 8;
  t.frontend.channels = {2, 2, 2, 2};
  t.encoder_blocks = 1;
  t.decoder_blocks = 1;
  t.width = 16;
  t.heads = 2;
  t.vocab = 6;
  t.relaxation.gamma = gamma;
  t.relaxation.mode = mode;
  return c;
}

TrainConfig tiny_train(std::size_t epochs = 3) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.schedule.peak = 3e-3;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("raed_train_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(Train, LossDecreasesAndFilesAppear) {
  const auto& d = tiny_data();
  auto model = make_model(tiny_model(), 1);
  TrainOptions o;
  o.out_dir = scratch("files");
  const TrainResult r = train(*model, d.train, d.dev, tiny_train(5), o);
  ASSERT_EQ(r.epochs.size(), 5u);
  EXPECT_LT(r.epochs[4].train_loss, r.epochs[0].train_loss);
  EXPECT_EQ(r.steps, 5u * 6u);
  for (const char* f : {"metrics.jsonl", "last.raed", "best.raed", "train_state.raed",
                        "checkpoint-epoch001.raed", "checkpoint-epoch005.raed"})
    EXPECT_TRUE(fs::exists(o.out_dir / f)) << f;
  std::ifstream in(o.out_dir / "metrics.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    for (const char* key : {"\"epoch\"", "\"step\"", "\"lr\"", "\"train_loss\"",
                            "\"val_loss\"", "\"val_ter\"", "\"mean_attn_entropy\"",
                            "\"gamma\""})
      EXPECT_NE(line.find(key), std::string::npos) << key;
  }
  EXPECT_EQ(lines, 5u);
  std::size_t flagged = 0;
  for (const auto& e : r.epochs) flagged += e.best;
  EXPECT_GE(flagged, 1u);
  EXPECT_TRUE(r.epochs[r.best_epoch - 1].best);
}

TEST(Train, SameSeedGivesIdenticalLogsAndWeights) {
  const auto& d = tiny_data();
  TrainOptions a, b;
  a.out_dir = scratch("det_a");
  b.out_dir = scratch("det_b");
  auto m1 = make_model(tiny_model(0.2), 1);
  auto m2 = make_model(tiny_model(0.2), 1);
  train(*m1, d.train, d.dev, tiny_train(2), a);
  train(*m2, d.train, d.dev, tiny_train(2), b);
  EXPECT_EQ(slurp(a.out_dir / "metrics.jsonl"), slurp(b.out_dir / "metrics.jsonl"));
  EXPECT_EQ(slurp(a.out_dir / "last.raed"), slurp(b.out_dir / "last.raed"));
}

TEST(Train, GammaZeroMatchesBaseline) {
  const auto& d = tiny_data();
  TrainOptions a, b;
  a.out_dir = scratch("g0_a");
  b.out_dir = scratch("g0_b");
  ModelConfig plain = tiny_model();
  plain.transformer.relaxation = RelaxationConfig{};
  auto m1 = make_model(plain, 1);
  auto m2 = make_model(tiny_model(0.0), 1);
  train(*m1, d.train, d.dev, tiny_train(1), a);
  train(*m2, d.train, d.dev, tiny_train(1), b);
  EXPECT_EQ(slurp(a.out_dir / "metrics.jsonl"), slurp(b.out_dir / "metrics.jsonl"));
}

TEST(Train, ResumeReproducesUninterruptedRun) {
  const auto& d = tiny_data();
  TrainOptions full, part;
  full.out_dir = scratch("full");
  part.out_dir = scratch("part");
  auto m1 = make_model(tiny_model(0.2), 1);
  train(*m1, d.train, d.dev, tiny_train(3), full);

  auto m2 = make_model(tiny_model(0.2), 1);
  part.stop_after = 1;
  EXPECT_EQ(train(*m2, d.train, d.dev, tiny_train(3), part).epochs.size(), 1u);
  // A stale record past the saved epoch is dropped on resume.
  std::ofstream(part.out_dir / "metrics.jsonl", std::ios::app) << "{\"epoch\":2}\n";

  auto m3 = make_model(tiny_model(0.2), 7);  // resume overwrites the weights
  part.stop_after = 0;
  part.resume = true;
  const TrainResult r = train(*m3, d.train, d.dev, tiny_train(3), part);
  EXPECT_EQ(r.epochs.size(), 3u);
  EXPECT_EQ(slurp(part.out_dir / "metrics.jsonl"), slurp(full.out_dir / "metrics.jsonl"));
  EXPECT_EQ(slurp(part.out_dir / "last.raed"), slurp(full.out_dir / "last.raed"));
  EXPECT_EQ(slurp(part.out_dir / "train_state.raed"),
            slurp(full.out_dir / "train_state.raed"));
}

TEST(Train, NonFiniteLossAbortsWithDump) {
  auto d = tiny_data();
  const Tensor& src = d.train[3].features;
  std::vector<double> values(src.data().begin(), src.data().end());
  values[0] = std::numeric_limits<double>::infinity();
  d.train[3].features = Tensor(src.shape(), std::move(values));
  auto model = make_model(tiny_model(), 1);
  TrainOptions o;
  o.out_dir = scratch("nan");
  TrainConfig c = tiny_train(1);
  EXPECT_THROW(train(*model, d.train, d.dev, c, o), NumericError);
  bool dumped = false;
  for (const auto& e : fs::directory_iterator(o.out_dir))
    dumped |= e.path().filename().string().rfind("nonfinite-step", 0) == 0;
  EXPECT_TRUE(dumped);
}

TEST(Train, LearnedGammaStaysInUnitInterval) {
  const auto& d = tiny_data();
  auto model = make_model(tiny_model(0.1, RelaxationMode::kLearned), 1);
  const TrainResult r = train(*model, d.train, d.dev, tiny_train(3));
  for (const auto& e : r.epochs) {
    ASSERT_EQ(e.gamma.size(), 1u);
    EXPECT_GE(e.gamma_min[0], 0.0);
    EXPECT_LE(e.gamma_max[0], 1.0);
    EXPECT_GE(e.gamma[0], e.gamma_min[0]);
    EXPECT_LE(e.gamma[0], e.gamma_max[0]);
  }
  EXPECT_NE(r.epochs.back().gamma[0], 0.1);
}

TEST(Train, RelaxationRaisesTrainingAttentionEntropy) {
  const auto& d = tiny_data();
  auto base = make_model(tiny_model(0.0), 1);
  auto relaxed = make_model(tiny_model(0.2), 1);
  const auto rb = train(*base, d.train, d.dev, tiny_train(1));
  const auto rr = train(*relaxed, d.train, d.dev, tiny_train(1));
  EXPECT_GT(rr.epochs[0].mean_attn_entropy, rb.epochs[0].mean_attn_entropy);
}

TEST(Decode, WiderBeamNeverLowersBestNormalizedScore) {
  const auto& d = tiny_data();
  auto model = make_model(tiny_model(), 3);
  train(*model, d.train, d.dev, tiny_train(5));
  std::size_t checked = 0;
  for (const auto* set : {&d.train, &d.dev}) {
    for (const Example& ex : *set) {
      NoGradGuard guard;
      const Encoded enc = model->encode(ex.features, {});
      const ModelScorer am(*model, enc);
      double prev = -std::numeric_limits<double>::infinity();
      for (std::size_t beam : {1, 2, 3, 4, 6, 8}) {
        FusionConfig c;
        c.beam = beam;
        const double best =
            beam_search(am, nullptr, c, ex.tokens.size() + 4).ranked.front().normalized_score();
        EXPECT_GE(best, prev - 1e-12) << ex.id << " beam " << beam;
        prev = best;
      }
      ++checked;
    }
  }
  EXPECT_EQ(checked, 30u);
}

TEST(Validation, HelpersOnUntrainedModel) {
  const auto& d = tiny_data();
  auto model = make_model(tiny_model(), 1);
  const double loss = validation_loss(*model, d.dev);
  EXPECT_GT(loss, 0.0);
  EXPECT_LT(loss, 10.0);
  const double ter = greedy_token_error_rate(*model, d.dev);
  EXPECT_GE(ter, 0.0);
  std::vector<std::vector<int>> tokens;
  for (const auto& e : d.dev) tokens.push_back(e.tokens);
  const NamedTensors dump = attention_dump(*model, d.dev, tokens);
  EXPECT_EQ(dump.size(), d.dev.size() * 2);  // one layer, two heads
  for (const auto& [name, t] : dump) {
    EXPECT_EQ(name.rfind("attn/0/", 0), 0u);
    EXPECT_EQ(t.rank(), 2u);
  }
}

}  // namespace
}  // namespace raed
