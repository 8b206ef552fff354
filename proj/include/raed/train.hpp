// SPDX-License-Identifier: Apache-2.0
//
// Teacher-forced training with label smoothing, Adam, the tri-stage
// schedule, optional spectral augmentation, per-epoch validation and
// resumable checkpoints.
//
// Output directory layout:
//   metrics.jsonl           one record per epoch
//   last.raed               parameters after the latest epoch
//   checkpoint-epochNNN.raed  per-epoch copies (keep_epoch_checkpoints)
//   best.raed               parameters with the best validation metric
//   train_state.raed        optimizer moments and loop counters for resume

#ifndef RAED_TRAIN_HPP
#define RAED_TRAIN_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "raed/data.hpp"
#include "raed/decode.hpp"
#include "raed/model.hpp"
#include "raed/optim.hpp"

namespace raed {

struct SpecAugmentConfig {
  bool enabled = false;
  std::size_t time_masks = 2;
  std::size_t time_width = 20;  // maximum stripe width, frames
  std::size_t freq_masks = 2;
  std::size_t freq_width = 10;  // maximum stripe width, bins
};

struct MaskStripe {
  bool time = true;  // false: frequency stripe
  std::size_t start = 0, width = 0;
};

// Zeroes time_masks stripes of width U[0, time_width] and freq_masks stripes
// of width U[0, freq_width] at uniform positions. ValueError when a maximum
// width reaches the axis length.
Tensor spec_augment(const Tensor& x, std::size_t time_masks, std::size_t time_width,
                    std::size_t freq_masks, std::size_t freq_width, Rng& rng,
                    std::vector<MaskStripe>* stripes = nullptr);

enum class Selection { kTokenErrorRate, kLmWordErrorRate };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  TriStageSchedule schedule;  // total_steps is derived from the data
  double label_smoothing = 0.1;
  AdamConfig adam;
  double grad_clip = 5.0;  // global norm; <= 0 disables
  SpecAugmentConfig spec_augment;
  std::uint64_t seed = 1;
  bool keep_epoch_checkpoints = true;
  Selection selection = Selection::kTokenErrorRate;
  // Cap on dev utterances used for validation; 0 uses all.
  std::size_t max_validation = 0;

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_ter = 0.0;
  std::optional<double> val_wer_lm;
  double mean_attn_entropy = 0.0;  // training forward passes
  double val_attn_entropy = 0.0;   // teacher-forced, inference mode
  std::vector<double> gamma;       // per attention layer, end of epoch
  std::vector<double> gamma_min, gamma_max;  // over every step so far
  bool best = false;
};

std::string metrics_json(const EpochMetrics& m);

struct TrainOptions {
  std::filesystem::path out_dir;  // empty keeps everything in memory
  bool resume = false;
  // Used for Selection::kLmWordErrorRate.
  const ToyLm* selection_lm = nullptr;
  FusionConfig selection_fusion;
  std::vector<std::string> words;  // for word-level selection
  bool log_progress = false;
  // Return after this many completed epochs of the schedule (0: run all).
  std::size_t stop_after = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  std::size_t steps = 0;
};

// Non-finite losses abort with NumericError after writing
// nonfinite-stepN.json into out_dir.
TrainResult train(Seq2SeqModel& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& dev_set, const TrainConfig& config,
                  const TrainOptions& options = {});

// Teacher-forced mean NLL per token (including EOS) in inference mode.
double validation_loss(const Seq2SeqModel& model, const std::vector<Example>& set);
// Greedy token error rate over content tokens.
double greedy_token_error_rate(const Seq2SeqModel& model,
                               const std::vector<Example>& set,
                               const FusionConfig& limits = {});

// Teacher-forced inference-mode attention on the given token sequences,
// dumped as attn/<layer>/<head>/<utt>.
NamedTensors attention_dump(const Seq2SeqModel& model,
                            const std::vector<Example>& set,
                            const std::vector<std::vector<int>>& tokens);

}  // namespace raed

#endif  // RAED_TRAIN_HPP
