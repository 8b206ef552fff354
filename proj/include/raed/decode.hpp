// SPDX-License-Identifier: Apache-2.0
//
// Beam search with shallow language-model fusion, greedy decoding, and a
// small recurrent token-level LM.

#ifndef RAED_DECODE_HPP
#define RAED_DECODE_HPP

#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "raed/model.hpp"
#include "raed/optim.hpp"

namespace raed {

// log P + lambda log P_lm, elementwise and unnormalised. ValueError on NaN.
Tensor fuse(const Tensor& log_p, const Tensor& log_p_lm, double lambda);
std::vector<double> fuse(std::span<const double> log_p,
                         std::span<const double> log_p_lm, double lambda);

// Anything that emits next-token log-probabilities from a recurrent state.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::unique_ptr<DecoderState> start() const = 0;
  // Consumes prev (the begin token on the first call) and returns log-probs.
  virtual std::vector<double> score(DecoderState& state, int prev) const = 0;
};

// Inference-mode decoder steps over one encoded utterance.
class ModelScorer final : public StepScorer {
 public:
  ModelScorer(const Seq2SeqModel& model, const Encoded& enc)
      : model_(model), enc_(enc) {}
  std::size_t vocab_size() const override { return model_.vocab_size(); }
  std::unique_ptr<DecoderState> start() const override;
  std::vector<double> score(DecoderState& state, int prev) const override;

 private:
  const Seq2SeqModel& model_;
  const Encoded& enc_;
};

enum class EosRule {
  kNone,       // every EOS expansion enters the finished pool
  kThreshold,  // EOS only when its score >= threshold * best non-EOS score
};

struct FusionConfig {
  double lm_weight = 0.9;
  std::size_t beam = 8;
  EosRule eos_rule = EosRule::kNone;
  double eos_threshold = 1.5;
  bool length_normalization = true;  // rank finished hypotheses by score/length
  double max_length_ratio = 1.0;     // output length cap relative to T
  std::size_t max_length = 0;        // absolute cap; 0 uses the ratio
  std::size_t nbest = 1;
  // Per-step candidate budget: beam * D may not exceed it.
  std::size_t max_expansions = std::size_t{1} << 20;

  void validate() const;
};

struct Hypothesis {
  std::vector<int> tokens;  // emitted tokens, EOS included when finished
  double score = 0.0;       // sum of fused step scores
  double am_score = 0.0;
  double lm_score = 0.0;
  bool finished = false;
  std::shared_ptr<const DecoderState> am_state, lm_state;

  double normalized_score() const;
};

struct BeamResult {
  std::vector<Hypothesis> ranked;  // best first
};

// lm may be null (lm_weight is then ignored). Pad is never emitted.
BeamResult beam_search(const StepScorer& am, const StepScorer* lm,
                       const FusionConfig& config, std::size_t max_length);

// Argmax decoding without an LM, stopping at EOS or max_length.
std::vector<int> greedy_decode(const StepScorer& am, std::size_t max_length);

// Output cap for an utterance with `frames` valid encoder frames.
std::size_t output_length_cap(const FusionConfig& config, std::size_t frames);

// ---------------------------------------------------------------------------
// Toy LM.

struct LmConfig {
  std::size_t vocab = 22;
  std::size_t embedding_dim = 16;
  std::size_t hidden = 64;
  std::size_t layers = 1;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  double grad_clip = 5.0;
  std::uint64_t seed = 1;

  void validate() const;
};

class ToyLm {
 public:
  ToyLm(const LmConfig& config, std::uint64_t seed);

  const LmConfig& config() const { return config_; }
  ParameterTable& parameters() { return params_; }
  const ParameterTable& parameters() const { return params_; }
  std::size_t vocab_size() const { return config_.vocab; }

  // Teacher-forced log-probs for inputs [EOS, c_1, ..., c_{L-1}]: [L x D].
  Tensor log_probs(std::span<const int> inputs) const;
  std::unique_ptr<DecoderState> start() const;
  Tensor step(DecoderState& state, int prev) const;

  void save(const std::filesystem::path& path) const;
  static ToyLm load(const std::filesystem::path& path);

 private:
  LmConfig config_;
  ParameterTable params_;
  Tensor embedding_;
  std::vector<LstmParams> cells_;
  LinearParams output_;
};

class LmScorer final : public StepScorer {
 public:
  explicit LmScorer(const ToyLm& lm) : lm_(lm) {}
  std::size_t vocab_size() const override { return lm_.vocab_size(); }
  std::unique_ptr<DecoderState> start() const override { return lm_.start(); }
  std::vector<double> score(DecoderState& state, int prev) const override;

 private:
  const ToyLm& lm_;
};

// Perplexity over content tokens plus the closing EOS.
double perplexity(const ToyLm& lm, const std::vector<std::vector<int>>& sequences);
// Add-one smoothed unigram perplexity estimated on `train`.
double unigram_perplexity(const std::vector<std::vector<int>>& train,
                          const std::vector<std::vector<int>>& held_out,
                          std::size_t vocab);

struct LmTrainReport {
  std::vector<double> train_loss;            // per epoch, nats per token
  std::vector<double> held_out_perplexity;   // per epoch, empty without data
};

// sequences hold content tokens without EOS. ValueError when the corpus is
// smaller than one batch.
ToyLm train_toy_lm(const std::vector<std::vector<int>>& sequences,
                   const LmConfig& config,
                   const std::vector<std::vector<int>>& held_out = {},
                   LmTrainReport* report = nullptr);

}  // namespace raed

#endif  // RAED_DECODE_HPP
