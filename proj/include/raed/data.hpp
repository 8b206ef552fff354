// SPDX-License-Identifier: Apache-2.0
//
// Synthetic sequence-transduction corpus: tokens drawn from a bigram grammar,
// each rendered as a run of noisy frames around a per-token prototype.
//
// Feature container ("RAFX"), little-endian:
//   "RAFX" | u32 version (1) | u32 feature dim | u32 utterance count
//   then each utterance's frames as contiguous float32 rows.
// Utterance offsets and frame counts live in the JSONL manifest.

#ifndef RAED_DATA_HPP
#define RAED_DATA_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "raed/tensor.hpp"

namespace raed {

struct ToyTaskSpec {
  std::size_t tokens = 20;  // content tokens; vocabulary adds pad and EOS
  std::size_t frames_per_token = 6;
  std::size_t jitter = 1;  // per-token frame count drawn from mu +- jitter
  std::size_t feature_dim = 16;
  double noise = 0.3;
  double min_prototype_distance = 3.0;
  std::size_t prototype_retries = 100;
  // Each grammar row puts `grammar_peak` of its mass on `grammar_successors`
  // preferred successors and spreads the rest over all tokens.
  std::size_t grammar_successors = 3;
  double grammar_peak = 0.85;
  std::size_t min_length = 4;
  std::size_t max_length = 12;
  std::size_t train_size = 2000;
  std::size_t dev_size = 200;
  std::size_t test_size = 200;
  std::uint64_t seed = 1;

  std::size_t vocab() const;
  void validate() const;
};

struct ToyTask {
  std::vector<std::vector<double>> prototypes;  // [tokens][F]
  // Row 0 is the sentence start; row k is content token k-1.
  std::vector<std::vector<double>> grammar;
  std::vector<std::string> words;  // surface form per vocabulary id
};

struct Utterance {
  std::string id;
  std::vector<int> tokens;  // content tokens, no EOS
  Tensor features;          // [frames x F]
  std::vector<int> frame_labels;  // source token per frame
};

struct Split {
  std::string name;
  std::vector<Utterance> utterances;
};

struct GeneratedData {
  ToyTask task;
  std::vector<Split> splits;  // train, dev, test
  double nearest_prototype_accuracy = 0.0;  // frame level, all splits
};

ToyTask make_toy_task(const ToyTaskSpec& spec);
GeneratedData generate_dataset(const ToyTaskSpec& spec);

// Fraction of frames whose nearest prototype is their source token.
double nearest_prototype_accuracy(const ToyTask& task,
                                  const std::vector<Utterance>& utterances);

// ---------------------------------------------------------------------------
// Files.

inline constexpr std::uint32_t kFeatureFileVersion = 1;
inline constexpr std::uint32_t kManifestVersion = 1;

struct ManifestRecord {
  std::string id;
  std::uint64_t offset = 0;  // byte offset of the first frame
  std::size_t frames = 0;
  std::vector<int> tokens;

  bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
  std::uint32_t version = kManifestVersion;
  std::string features;  // container path, relative to the manifest
  std::size_t feature_dim = 0;
  std::size_t vocab = 0;
  std::vector<ManifestRecord> records;

  bool operator==(const Manifest&) const = default;
};

// Writes the container and returns the manifest records pointing into it.
Manifest write_feature_file(const std::filesystem::path& path,
                            const std::vector<Utterance>& utterances,
                            std::size_t feature_dim, std::size_t vocab);
// Sequential read of every utterance; frame counts come from the manifest.
std::vector<Tensor> read_feature_file(const std::filesystem::path& path,
                                      const Manifest& manifest);
Tensor read_utterance_features(const std::filesystem::path& path,
                               const ManifestRecord& record,
                               std::size_t feature_dim);

void write_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);

// An utterance loaded back from disk.
struct Example {
  std::string id;
  std::vector<int> tokens;
  Tensor features;
};
std::vector<Example> load_examples(const std::filesystem::path& manifest_path);

void write_vocabulary(const std::filesystem::path& path,
                      const std::vector<std::string>& words);
std::vector<std::string> read_vocabulary(const std::filesystem::path& path);

// "id word word ..." per line.
std::string render_transcript(const std::vector<int>& tokens,
                              const std::vector<std::string>& words);
void write_transcripts(const std::filesystem::path& path,
                       const std::vector<std::string>& ids,
                       const std::vector<std::vector<int>>& tokens,
                       const std::vector<std::string>& words);

// Writes <split>.rafx, <split>.jsonl and <split>.ref.txt per split plus
// vocab.txt into dir.
void write_dataset(const std::filesystem::path& dir, const GeneratedData& data,
                   const ToyTaskSpec& spec);

}  // namespace raed

#endif  // RAED_DATA_HPP
