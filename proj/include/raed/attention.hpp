// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder attention mechanisms and their relaxed training variants.
//
// Relaxation mixes attention weights with a uniform distribution over the
// valid encoder frames:
//
//   G~ = (1 - gamma) * G + gamma * 1 / T_valid
//
// It is a training-time transform only; inference always uses plain G.

#ifndef RAED_ATTENTION_HPP
#define RAED_ATTENTION_HPP

#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "raed/tensor.hpp"

namespace raed {

enum class RelaxationMode { kFixed, kLearned };

struct RelaxationConfig {
  double gamma = 0.0;
  RelaxationMode mode = RelaxationMode::kFixed;
  // Relaxation never runs at inference; kept as a constant for reporting.
  static constexpr bool kTrainingOnly = true;

  void validate() const;
};

// Coefficient handed to one forward pass: a fixed value, or a differentiable
// scalar tensor (already squashed into [0, 1]) for the learned variant.
struct Relaxation {
  double gamma = 0.0;
  Tensor learned;

  bool is_learned() const { return learned.defined(); }
  double value() const { return is_learned() ? learned.item() : gamma; }
};

// Row-stochastic weights over encoder frames. values is [..., T]; the mask
// has one entry per frame (1 = valid). An empty mask means all valid.
struct AttentionWeights {
  Tensor values;
  std::vector<std::uint8_t> frame_validity;

  std::size_t frames() const { return values.dim(-1); }
  std::size_t valid_count() const;
};

std::vector<std::uint8_t> all_valid(std::size_t frames);

// Mixes weights with the uniform distribution over valid frames. Invalid
// frames stay at zero. Throws ValueError for gamma outside [0, 1] or when no
// frame is valid.
Tensor relax_weights(const Tensor& weights, double gamma,
                     std::span<const std::uint8_t> frame_validity);
// Learned variant: gamma is a [1] tensor in [0, 1] and receives gradients.
Tensor relax_weights(const Tensor& weights, const Tensor& gamma,
                     std::span<const std::uint8_t> frame_validity);
AttentionWeights relax_weights(const AttentionWeights& weights, double gamma);

// Records attention rows during forward passes, restricted to valid frames.
// Rows recorded for the same (layer, head) are appended, so step-by-step
// decoding builds up the same [L x T_valid] matrix as a parallel pass.
class AttentionCapture {
 public:
  struct Matrix {
    std::size_t cols = 0;
    std::vector<double> values;  // row-major, cols entries per row
    std::size_t rows() const { return cols ? values.size() / cols : 0; }
  };
  using Key = std::pair<std::size_t, std::size_t>;  // (layer, head)

  // weights: [heads x rows x T] or [rows x T].
  void record(std::size_t layer, const Tensor& weights,
              std::span<const std::uint8_t> frame_validity);
  const std::map<Key, Matrix>& matrices() const { return matrices_; }
  bool empty() const { return matrices_.empty(); }
  void clear() { matrices_.clear(); }

 private:
  std::map<Key, Matrix> matrices_;
};

struct AttentionOptions {
  std::span<const std::uint8_t> frame_validity;  // keys; empty = all valid
  bool causal = false;  // query row l may only see keys 0..l
  // Non-null enables relaxation, applied only when training is set.
  const Relaxation* relax = nullptr;
  bool training = false;
  double attention_dropout = 0.0;
  // Default order is softmax, relaxation, dropout.
  bool dropout_before_relaxation = false;
  Rng* rng = nullptr;
  AttentionCapture* capture = nullptr;
  std::size_t capture_layer = 0;
};

// Per-head projections are packed as column blocks: head i owns columns
// [i * d/heads, (i + 1) * d/heads) of w_q, w_k and w_v.
struct MhaParams {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v;  // [d x d], [d]
  Tensor w_o, b_o;                      // output projection
  std::size_t heads = 1;
  std::size_t width = 0;

  std::size_t head_dim() const { return width / heads; }
  void validate() const;
};

struct MhaOutput {
  Tensor z;        // [L x d]
  Tensor weights;  // [heads x L x T] after relaxation, before dropout
  std::vector<std::uint8_t> frame_validity;

  std::vector<AttentionWeights> per_head() const;
};

// x W + b for a [rows x in] input.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Scaled dot-product multi-head attention; scores are divided by sqrt(d).
MhaOutput mha_forward(const Tensor& query, const Tensor& key,
                      const Tensor& value, const MhaParams& params,
                      const AttentionOptions& options);

// Same as mha_forward but takes already projected keys and values
// ([T x d] each), as kept in decoder caches.
MhaOutput mha_attend_projected(const Tensor& query, const Tensor& key_proj,
                               const Tensor& value_proj,
                               const MhaParams& params,
                               const AttentionOptions& options);

struct BahdanauParams {
  Tensor w_q;  // [d_d x d_a]
  Tensor w_v;  // [d_e x d_a]
  Tensor v;    // [1 x d_a]
  Tensor b;    // [1 x d_a]
  std::size_t encoder_dim = 0, attention_dim = 0, decoder_dim = 0;

  void validate() const;
};

struct BahdanauOutput {
  Tensor context;  // [1 x d_e]
  Tensor weights;  // [1 x T] after relaxation, before dropout
};

// V W^(V), reusable across decoding steps of one utterance.
Tensor bahdanau_value_projection(const Tensor& values,
                                 const BahdanauParams& params);

// Additive attention: g = softmax(v . tanh(Q W^(Q) + b + V W^(V))^T),
// z = sum_t g_t h_t.
BahdanauOutput bahdanau_forward(const Tensor& query, const Tensor& values,
                                const BahdanauParams& params,
                                const AttentionOptions& options);
BahdanauOutput bahdanau_attend(const Tensor& query, const Tensor& values,
                               const Tensor& value_proj,
                               const BahdanauParams& params,
                               const AttentionOptions& options);

}  // namespace raed

#endif  // RAED_ATTENTION_HPP
