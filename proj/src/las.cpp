// SPDX-License-Identifier: Apache-2.0

#include "model_impl.hpp"
#include "raed/error.hpp"

namespace raed::detail {

namespace {

struct LasState final : DecoderState {
  std::vector<LstmState> blocks;
  Tensor context;     // z_{l-1}, [1 x d_e]
  Tensor value_proj;  // h W^(V), fixed per utterance
  std::unique_ptr<DecoderState> clone() const override {
    return std::make_unique<LasState>(*this);
  }
};

class Las final : public Seq2SeqModel {
 public:
  Las(const ModelConfig& config, std::uint64_t seed)
      : Seq2SeqModel(config), cfg_(config_.las) {
    cfg_.frontend.output_dim = 0;
    Rng rng(seed);
    frontend_ = make_frontend(params_, "frontend", cfg_.frontend, rng);
    const std::size_t half = cfg_.encoder_dim / 2;
    std::size_t in = cfg_.frontend.flat_dim();
    for (std::size_t b = 0; b < cfg_.encoder_blocks; ++b) {
      const std::string n = "encoder." + std::to_string(b);
      LstmParams fw = make_lstm(params_, n + ".forward", in, half, rng);
      LstmParams bw = make_lstm(params_, n + ".backward", in, half, rng);
      encoder_.push_back({fw, bw});
      in = cfg_.encoder_dim;
    }
    embedding_ = params_.add(
        "decoder.embedding",
        uniform_init({cfg_.vocab, cfg_.embedding_dim}, 1.0, rng));
    const std::size_t de = cfg_.encoder_dim, dd = cfg_.decoder_dim;
    for (std::size_t b = 0; b < cfg_.decoder_blocks; ++b) {
      const std::size_t input = b == 0 ? cfg_.embedding_dim + de : dd + de;
      decoder_.push_back(make_lstm(
          params_, "decoder." + std::to_string(b) + ".lstm", input, dd, rng));
    }
    const std::size_t da = cfg_.attention_dim;
    attention_.encoder_dim = de;
    attention_.attention_dim = da;
    attention_.decoder_dim = dd;
    attention_.w_q = params_.add("attention.w_q", xavier_uniform(dd, da, rng));
    attention_.w_v = params_.add("attention.w_v", xavier_uniform(de, da, rng));
    attention_.v = params_.add("attention.v", xavier_uniform(1, da, rng));
    attention_.b = params_.add("attention.b", Tensor::zeros({1, da}, true));
    output_ = make_linear(params_, "decoder.output", dd + de, cfg_.vocab, rng);
    init_relaxation(1);
  }

  Architecture architecture() const override { return Architecture::kLas; }
  std::size_t vocab_size() const override { return cfg_.vocab; }
  std::size_t attention_layers() const override { return 1; }

  Encoded encode(const Tensor& features, std::size_t valid_frames,
                 const ForwardOptions& options) const override {
    Tensor x = frontend_forward(features, valid_frames, frontend_);
    const std::size_t frames = x.dim(0);
    const std::size_t valid = std::min(
        frames, (valid_frames + kFrontendSubsampling - 1) / kFrontendSubsampling);
    Tensor h = valid < frames ? slice(x, 0, 0, valid) : x;
    for (const auto& [fw, bw] : encoder_) {
      Tensor in = drop(h, options);
      h = concat({lstm_sequence(in, fw, false),
                  lstm_sequence(in, bw, cfg_.bidirectional)},
                 1);
    }
    if (valid < frames)
      h = concat({h, Tensor::zeros({frames - valid, cfg_.encoder_dim})}, 0);
    std::vector<std::uint8_t> validity(frames, 0);
    for (std::size_t t = 0; t < valid; ++t) validity[t] = 1;
    return {h, std::move(validity)};
  }

  Tensor decode_all(const Encoded& enc, std::span<const int> inputs,
                    const ForwardOptions& options) const override {
    check_tokens(inputs);
    if (inputs.empty()) throw ValueError("las: empty decoder input");
    auto state = initial_state(enc);
    std::vector<Tensor> rows;
    rows.reserve(inputs.size());
    for (int token : inputs)
      rows.push_back(decode_step(enc, token, *state, options));
    return concat(rows, 0);
  }

  std::unique_ptr<DecoderState> initial_state(
      const Encoded& enc) const override {
    check_encoded(enc);
    auto state = std::make_unique<LasState>();
    for (const auto& p : decoder_) state->blocks.push_back(lstm_zero_state(p));
    state->context = Tensor::zeros({1, cfg_.encoder_dim});
    state->value_proj = bahdanau_value_projection(enc.h, attention_);
    return state;
  }

  Tensor decode_step(const Encoded& enc, int prev_token, DecoderState& base,
                     const ForwardOptions& options) const override {
    auto* state = dynamic_cast<LasState*>(&base);
    if (!state) throw ValueError("las: foreign decoder state");
    if (state->blocks.size() != decoder_.size() ||
        state->value_proj.dim(0) != enc.h.dim(0)) {
      throw ShapeError("las: stale decoder state");
    }
    const int token[1] = {prev_token};
    check_tokens(token);
    Tensor emb = embedding_lookup(embedding_, token);
    Tensor in = drop(concat({emb, state->context}, 1), options);
    state->blocks[0] = lstm_cell(in, state->blocks[0], decoder_[0]);
    Tensor query = state->blocks[0].h;

    AttentionOptions att;
    att.frame_validity = enc.validity;
    att.training = options.training;
    att.rng = options.rng;
    att.capture = options.capture;
    att.capture_layer = 0;
    Relaxation relax;
    if (relaxation_enabled()) {
      relax = block_relaxation(0);
      att.relax = &relax;
    }
    Tensor z = bahdanau_attend(query, enc.h, state->value_proj, attention_, att)
                   .context;
    state->context = z;

    Tensor prev = query;
    for (std::size_t b = 1; b < decoder_.size(); ++b) {
      Tensor block_in = drop(concat({prev, z}, 1), options);
      state->blocks[b] = lstm_cell(block_in, state->blocks[b], decoder_[b]);
      prev = add(state->blocks[b].h, prev);
    }
    return log_softmax(apply(output_, concat({prev, z}, 1)));
  }

 private:
  Tensor drop(const Tensor& x, const ForwardOptions& options) const {
    return dropout(x, cfg_.dropout, options.training, options.rng);
  }

  void check_encoded(const Encoded& enc) const {
    if (!enc.h.defined() || enc.h.rank() != 2 ||
        enc.h.dim(1) != cfg_.encoder_dim || enc.h.dim(0) == 0 ||
        enc.validity.size() != enc.h.dim(0)) {
      throw ShapeError("las: malformed encoder output");
    }
  }

  LasConfig cfg_;
  FrontendParams frontend_;
  std::vector<std::pair<LstmParams, LstmParams>> encoder_;
  Tensor embedding_;
  std::vector<LstmParams> decoder_;
  BahdanauParams attention_;
  LinearParams output_;
};

}  // namespace

std::unique_ptr<Seq2SeqModel> make_las(const ModelConfig& config,
                                       std::uint64_t seed) {
  return std::make_unique<Las>(config, seed);
}

}  // namespace raed::detail
