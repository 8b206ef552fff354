// SPDX-License-Identifier: Apache-2.0
//
// File-level steps behind the command-line tool: corpus generation, LM
// training, model training, decoding, scoring and entropy comparison.

#ifndef RAED_PIPELINE_HPP
#define RAED_PIPELINE_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "raed/config.hpp"
#include "raed/eval.hpp"

namespace raed {

namespace fs = std::filesystem;

struct GenDataSummary {
  double nearest_prototype_accuracy = 0.0;
  std::size_t utterances = 0;
};
// Writes the corpus plus data.ini and generation.json into out_dir.
GenDataSummary run_gen_data(const ToyTaskSpec& spec, const fs::path& out_dir);

struct LmTrainRequest {
  fs::path manifest;
  std::optional<fs::path> held_out;
  LmConfig config;
  fs::path out;  // LM file; <out>.metrics.jsonl holds per-epoch records
};
LmTrainReport run_lm_train(const LmTrainRequest& request);

struct TrainRequest {
  ExperimentConfig config;
  fs::path data_dir;  // holds train.jsonl, dev.jsonl, vocab.txt
  fs::path out_dir;
  bool resume = false;
  std::optional<fs::path> selection_lm;
  bool log_progress = false;
};
// Saves the effective configuration as out_dir/config.ini.
TrainResult run_train(const TrainRequest& request);

struct DecodeRequest {
  fs::path checkpoint;
  std::optional<fs::path> config;  // default: config.ini beside the checkpoint
  fs::path manifest;
  std::optional<fs::path> vocab;   // default: vocab.txt beside the manifest
  std::optional<fs::path> lm;
  bool use_lm = true;
  FusionConfig fusion;
  fs::path out_prefix;             // writes <prefix>.jsonl and <prefix>.txt
  std::optional<fs::path> attention_dump;
  std::size_t threads = 1;
};

struct DecodedUtterance {
  std::string id;
  std::vector<Hypothesis> nbest;
};
std::vector<DecodedUtterance> run_decode(const DecodeRequest& request);

struct ScoredUtterance {
  std::string id;
  EditCounts words, chars;
};
struct ScoreReport {
  std::vector<ScoredUtterance> utterances;
  EditCounts words, chars;
  double wer() const { return error_rate(words); }
  double cer() const { return error_rate(chars); }
};

// Both files hold "id text" lines; every reference id needs a hypothesis.
ScoreReport score_transcripts(const fs::path& ref, const fs::path& hyp);
std::string format_score_table(const ScoreReport& report);
std::string score_json(const ScoreReport& report);

std::string format_entropy_table(const EntropyReport& report);
std::string entropy_json(const EntropyReport& report);

}  // namespace raed

#endif  // RAED_PIPELINE_HPP
