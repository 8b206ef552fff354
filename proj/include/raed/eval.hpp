// SPDX-License-Identifier: Apache-2.0
//
// Error-rate scoring and attention-entropy statistics.

#ifndef RAED_EVAL_HPP
#define RAED_EVAL_HPP

#include <map>
#include <span>
#include <string>
#include <vector>

#include "raed/attention.hpp"
#include "raed/checkpoint.hpp"

namespace raed {

struct EditCounts {
  std::size_t n = 0;  // reference units
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t substitutions = 0;

  std::size_t errors() const { return deletions + insertions + substitutions; }
  EditCounts& operator+=(const EditCounts& o);
  bool operator==(const EditCounts&) const = default;
};

// Minimal Levenshtein alignment. Among optimal scripts the backtrace prefers
// substitution, then deletion, then insertion.
template <typename T>
EditCounts edit_distance_counts(std::span<const T> ref, std::span<const T> hyp);

EditCounts edit_distance_counts(const std::vector<int>& ref,
                                const std::vector<int>& hyp);
EditCounts edit_distance_counts(const std::vector<std::string>& ref,
                                const std::vector<std::string>& hyp);

// (D + I + S) / N; ValueError when N is zero. May exceed 1.
double error_rate(const EditCounts& c);

std::vector<std::string> split_words(const std::string& text);
// Characters with whitespace removed.
std::vector<char> split_chars(const std::string& text);
EditCounts word_counts(const std::string& ref, const std::string& hyp);
EditCounts char_counts(const std::string& ref, const std::string& hyp);

// ---------------------------------------------------------------------------
// Entropy (nats).

struct RowEntropy {
  std::vector<double> rows;
  double mean = 0.0;
};

// Rows must sum to one over valid frames and be zero elsewhere (1e-6).
RowEntropy attention_entropy(const AttentionWeights& weights);
RowEntropy attention_entropy(const AttentionCapture::Matrix& m);

// Dump naming: attn/<layer>/<head>/<utt>, each [rows x valid frames].
std::string attention_dump_name(std::size_t layer, std::size_t head,
                                const std::string& utt);
NamedTensors capture_to_dump(const AttentionCapture& capture,
                             const std::string& utt);

struct EntropyStats {
  std::map<std::string, double> per_utterance;  // mean over all rows
  std::map<std::pair<std::size_t, std::size_t>, double> per_head;
  double mean = 0.0;  // pooled over every row
  std::size_t rows = 0;
};
EntropyStats entropy_stats(const NamedTensors& dump);

struct EntropyReport {
  EntropyStats baseline, relaxed;
  double ratio = 0.0;  // relaxed.mean / baseline.mean - 1
};

// ValueError when the dumps cover different (layer, head, utt) sets.
EntropyReport compare_entropy(const NamedTensors& baseline,
                              const NamedTensors& relaxed);

}  // namespace raed

#endif  // RAED_EVAL_HPP
