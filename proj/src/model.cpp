// SPDX-License-Identifier: Apache-2.0

#include "raed/model.hpp"

#include "model_impl.hpp"
#include "raed/error.hpp"

namespace raed {

std::string architecture_name(Architecture a) {
  return a == Architecture::kTransformer ? "transformer" : "las";
}

Architecture parse_architecture(const std::string& name) {
  if (name == "transformer") return Architecture::kTransformer;
  if (name == "las") return Architecture::kLas;
  throw ConfigError("unknown architecture '" + name + "'");
}

namespace {

void check_dropout(double p, const char* what) {
  if (!(p >= 0.0 && p < 1.0))
    throw ConfigError(std::string(what) + " must lie in [0, 1)");
}

void check_vocab(std::size_t vocab) {
  if (vocab < kReservedTokens + 1)
    throw ConfigError("vocabulary needs at least 3 entries (pad, eos, token)");
}

}  // namespace

void TransformerConfig::validate() const {
  frontend.validate();
  if (encoder_blocks == 0 && decoder_blocks == 0)
    throw ConfigError("transformer: no blocks");
  if (decoder_blocks == 0) throw ConfigError("transformer: decoder_blocks >= 1");
  if (width == 0 || heads == 0) throw ConfigError("transformer: zero width/heads");
  if (width % heads != 0)
    throw ConfigError("transformer: width " + std::to_string(width) +
                      " not divisible by " + std::to_string(heads) + " heads");
  check_dropout(dropout, "transformer dropout");
  check_dropout(attention_dropout, "transformer attention_dropout");
  check_vocab(vocab);
  if (max_positions == 0) throw ConfigError("transformer: max_positions >= 1");
  relaxation.validate();
}

void LasConfig::validate() const {
  frontend.validate();
  if (encoder_dim == 0 || encoder_dim % 2 != 0)
    throw ConfigError("las: encoder_dim must be positive and even");
  if (attention_dim == 0 || decoder_dim == 0 || embedding_dim == 0)
    throw ConfigError("las: zero dimension");
  if (encoder_blocks == 0 || decoder_blocks == 0)
    throw ConfigError("las: block counts must be >= 1");
  check_dropout(dropout, "las dropout");
  check_vocab(vocab);
  relaxation.validate();
}

std::size_t ModelConfig::vocab() const {
  return architecture == Architecture::kTransformer ? transformer.vocab
                                                    : las.vocab;
}

const RelaxationConfig& ModelConfig::relaxation() const {
  return architecture == Architecture::kTransformer ? transformer.relaxation
                                                    : las.relaxation;
}

RelaxationConfig& ModelConfig::relaxation() {
  return architecture == Architecture::kTransformer ? transformer.relaxation
                                                    : las.relaxation;
}

void ModelConfig::validate() const {
  if (architecture == Architecture::kTransformer) {
    transformer.validate();
  } else {
    las.validate();
  }
}

std::size_t transformer_parameter_count(const TransformerConfig& c) {
  const std::size_t d = c.width, ff = c.ffn_width(), D = c.vocab;
  FrontendConfig fe = c.frontend;
  fe.output_dim = d;
  const std::size_t mha = 4 * (d * d + d);
  const std::size_t ln = 2 * d;
  const std::size_t ffn = d * ff + ff + ff * d + d;
  std::size_t n = fe.parameter_count();
  n += c.encoder_blocks * (mha + ffn + 2 * ln);
  n += c.decoder_blocks * (2 * mha + ffn + 3 * ln);
  n += D * d;          // token embedding
  n += ln;             // final decoder layer norm
  n += d * D + D;      // output projection
  if (c.relaxation.mode == RelaxationMode::kLearned) n += c.decoder_blocks;
  return n;
}

std::size_t las_parameter_count(const LasConfig& c) {
  FrontendConfig fe = c.frontend;
  fe.output_dim = 0;
  const std::size_t half = c.encoder_dim / 2;
  std::size_t n = fe.parameter_count();
  std::size_t in = fe.flat_dim();
  for (std::size_t b = 0; b < c.encoder_blocks; ++b) {
    n += 2 * lstm_parameter_count(in, half);
    in = c.encoder_dim;
  }
  n += lstm_parameter_count(c.embedding_dim + c.encoder_dim, c.decoder_dim);
  n += (c.decoder_blocks - 1) *
       lstm_parameter_count(c.decoder_dim + c.encoder_dim, c.decoder_dim);
  n += c.decoder_dim * c.attention_dim + c.encoder_dim * c.attention_dim +
       2 * c.attention_dim;
  n += c.vocab * c.embedding_dim;
  n += (c.decoder_dim + c.encoder_dim) * c.vocab + c.vocab;
  if (c.relaxation.mode == RelaxationMode::kLearned) n += 1;
  return n;
}

std::size_t parameter_count(const ModelConfig& c) {
  return c.architecture == Architecture::kTransformer
             ? transformer_parameter_count(c.transformer)
             : las_parameter_count(c.las);
}

std::vector<double> Seq2SeqModel::relaxation_gammas() const {
  std::vector<double> out;
  for (std::size_t b = 0; b < attention_layers(); ++b)
    out.push_back(block_relaxation(b).value());
  return out;
}

void Seq2SeqModel::init_relaxation(std::size_t blocks) {
  if (config_.relaxation().mode != RelaxationMode::kLearned) return;
  for (std::size_t b = 0; b < blocks; ++b) {
    gamma_logits_.push_back(
        params_.add("decoder." + std::to_string(b) + ".relax_logit",
                    Tensor({1}, {kInitialGammaLogit}, true)));
  }
}

bool Seq2SeqModel::relaxation_enabled() const {
  const RelaxationConfig& r = config_.relaxation();
  return r.mode == RelaxationMode::kLearned || r.gamma > 0.0;
}

Relaxation Seq2SeqModel::block_relaxation(std::size_t block) const {
  const RelaxationConfig& r = config_.relaxation();
  if (r.mode == RelaxationMode::kLearned)
    return Relaxation{0.0, sigmoid(gamma_logits_.at(block))};
  return Relaxation{r.gamma, {}};
}

void Seq2SeqModel::check_tokens(std::span<const int> tokens) const {
  const int vocab = static_cast<int>(vocab_size());
  for (int t : tokens) {
    if (t < 0 || t >= vocab) {
      throw ValueError("token id " + std::to_string(t) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
  }
}

std::vector<int> shift_right(std::span<const int> targets) {
  std::vector<int> inputs;
  inputs.reserve(targets.size());
  inputs.push_back(kEosId);
  for (std::size_t i = 0; i + 1 < targets.size(); ++i)
    inputs.push_back(targets[i]);
  return inputs;
}

std::unique_ptr<Seq2SeqModel> make_model(const ModelConfig& config,
                                         std::uint64_t seed) {
  config.validate();
  if (config.architecture == Architecture::kTransformer)
    return detail::make_transformer(config, seed);
  return detail::make_las(config, seed);
}

}  // namespace raed
