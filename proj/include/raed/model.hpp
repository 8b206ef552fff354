// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder models: a pre-norm transformer and a listen-attend-spell
// recurrent model, both behind one interface used by training and decoding.
// Decoders return log-probabilities over the vocabulary.

#ifndef RAED_MODEL_HPP
#define RAED_MODEL_HPP

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "raed/attention.hpp"
#include "raed/nn.hpp"
#include "raed/tensor.hpp"
#include "raed/tokens.hpp"

namespace raed {

enum class Architecture { kTransformer, kLas };
std::string architecture_name(Architecture a);
Architecture parse_architecture(const std::string& name);

struct TransformerConfig {
  FrontendConfig frontend;  // output_dim is forced to width
  std::size_t encoder_blocks = 4;
  std::size_t decoder_blocks = 2;
  std::size_t width = 64;
  std::size_t heads = 4;
  double dropout = 0.1;
  double attention_dropout = 0.1;
  std::size_t vocab = 22;
  std::size_t max_positions = 2048;
  RelaxationConfig relaxation;

  std::size_t ffn_width() const { return 4 * width; }
  void validate() const;
};

struct LasConfig {
  FrontendConfig frontend;  // output_dim is forced to 0
  std::size_t encoder_dim = 64;
  std::size_t attention_dim = 32;
  std::size_t decoder_dim = 32;
  std::size_t embedding_dim = 16;
  std::size_t encoder_blocks = 3;
  std::size_t decoder_blocks = 3;
  double dropout = 0.1;
  std::size_t vocab = 22;
  // Ablation switch: false runs both encoder directions left to right.
  bool bidirectional = true;
  RelaxationConfig relaxation;

  void validate() const;
};

struct ModelConfig {
  Architecture architecture = Architecture::kTransformer;
  TransformerConfig transformer;
  LasConfig las;

  std::size_t vocab() const;
  const RelaxationConfig& relaxation() const;
  RelaxationConfig& relaxation();
  void validate() const;
};

// Closed-form trainable scalar counts.
std::size_t transformer_parameter_count(const TransformerConfig& c);
std::size_t las_parameter_count(const LasConfig& c);
std::size_t parameter_count(const ModelConfig& c);

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout
  AttentionCapture* capture = nullptr;
};

struct Encoded {
  Tensor h;                            // [T x width]
  std::vector<std::uint8_t> validity;  // per encoder frame
};

class DecoderState {
 public:
  virtual ~DecoderState() = default;
  virtual std::unique_ptr<DecoderState> clone() const = 0;
};

class Seq2SeqModel {
 public:
  virtual ~Seq2SeqModel() = default;

  virtual Architecture architecture() const = 0;
  virtual std::size_t vocab_size() const = 0;
  // Encoder-decoder attention layers, one relaxation coefficient each.
  virtual std::size_t attention_layers() const = 0;
  const ModelConfig& config() const { return config_; }

  ParameterTable& parameters() { return params_; }
  const ParameterTable& parameters() const { return params_; }

  // features: [frames x F]; rows at or past valid_frames are padding.
  virtual Encoded encode(const Tensor& features, std::size_t valid_frames,
                         const ForwardOptions& options) const = 0;
  Encoded encode(const Tensor& features, const ForwardOptions& options) const {
    return encode(features, features.dim(0), options);
  }
  // inputs = begin token followed by c_1..c_{L-1}; returns [L x D].
  virtual Tensor decode_all(const Encoded& enc, std::span<const int> inputs,
                            const ForwardOptions& options) const = 0;
  virtual std::unique_ptr<DecoderState> initial_state(
      const Encoded& enc) const = 0;
  // Consumes the previous token and returns [1 x D] for the next one.
  virtual Tensor decode_step(const Encoded& enc, int prev_token,
                             DecoderState& state,
                             const ForwardOptions& options) const = 0;

  // Relaxation coefficient per attention layer (0 when disabled).
  std::vector<double> relaxation_gammas() const;

 protected:
  explicit Seq2SeqModel(ModelConfig config) : config_(std::move(config)) {}
  void init_relaxation(std::size_t blocks);
  // Relaxation handed to the encoder-decoder attention of one block.
  Relaxation block_relaxation(std::size_t block) const;
  bool relaxation_enabled() const;
  void check_tokens(std::span<const int> tokens) const;

  ModelConfig config_;
  ParameterTable params_;
  std::vector<Tensor> gamma_logits_;
};

std::unique_ptr<Seq2SeqModel> make_model(const ModelConfig& config,
                                         std::uint64_t seed);

// Teacher-forcing inputs for a target sequence ending with EOS:
// [EOS, c_1, ..., c_{L-1}].
std::vector<int> shift_right(std::span<const int> targets);

// Logistic logit giving the initial learned coefficient of 0.1.
inline constexpr double kInitialGammaLogit = -2.1972245773362196;

}  // namespace raed

#endif  // RAED_MODEL_HPP
