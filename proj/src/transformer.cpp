// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "model_impl.hpp"
#include "raed/error.hpp"

namespace raed::detail {

namespace {

MhaParams make_mha(ParameterTable& table, const std::string& name,
                   std::size_t d, std::size_t heads, Rng& rng) {
  MhaParams p;
  p.width = d;
  p.heads = heads;
  auto proj = [&](const char* tag, Tensor& w, Tensor& b) {
    LinearParams l = make_linear(table, name + "." + tag, d, d, rng);
    w = l.w;
    b = l.b;
  };
  proj("q", p.w_q, p.b_q);
  proj("k", p.w_k, p.b_k);
  proj("v", p.w_v, p.b_v);
  proj("out", p.w_o, p.b_o);
  return p;
}

struct EncoderBlock {
  LayerNormParams ln_attn, ln_ffn;
  MhaParams self_attn;
  LinearParams ff1, ff2;
};

struct DecoderBlock {
  LayerNormParams ln_self, ln_cross, ln_ffn;
  MhaParams self_attn, cross_attn;
  LinearParams ff1, ff2;
};

struct TransformerState final : DecoderState {
  std::size_t position = 0;
  std::vector<Tensor> self_k, self_v;    // projected rows seen so far
  std::vector<Tensor> cross_k, cross_v;  // projected encoder output
  std::unique_ptr<DecoderState> clone() const override {
    return std::make_unique<TransformerState>(*this);
  }
};

class Transformer final : public Seq2SeqModel {
 public:
  Transformer(const ModelConfig& config, std::uint64_t seed)
      : Seq2SeqModel(config), cfg_(config_.transformer) {
    cfg_.frontend.output_dim = cfg_.width;
    Rng rng(seed);
    const std::size_t d = cfg_.width, ff = cfg_.ffn_width();
    frontend_ = make_frontend(params_, "frontend", cfg_.frontend, rng);
    for (std::size_t b = 0; b < cfg_.encoder_blocks; ++b) {
      const std::string n = "encoder." + std::to_string(b);
      EncoderBlock blk;
      blk.ln_attn = make_layer_norm(params_, n + ".ln_attn", d);
      blk.self_attn = make_mha(params_, n + ".self_attn", d, cfg_.heads, rng);
      blk.ln_ffn = make_layer_norm(params_, n + ".ln_ffn", d);
      blk.ff1 = make_linear(params_, n + ".ff1", d, ff, rng);
      blk.ff2 = make_linear(params_, n + ".ff2", ff, d, rng);
      encoder_.push_back(blk);
    }
    embedding_ = params_.add(
        "decoder.embedding",
        uniform_init({cfg_.vocab, d}, std::sqrt(3.0 / static_cast<double>(d)),
                     rng));
    for (std::size_t b = 0; b < cfg_.decoder_blocks; ++b) {
      const std::string n = "decoder." + std::to_string(b);
      DecoderBlock blk;
      blk.ln_self = make_layer_norm(params_, n + ".ln_self", d);
      blk.self_attn = make_mha(params_, n + ".self_attn", d, cfg_.heads, rng);
      blk.ln_cross = make_layer_norm(params_, n + ".ln_cross", d);
      blk.cross_attn = make_mha(params_, n + ".cross_attn", d, cfg_.heads, rng);
      blk.ln_ffn = make_layer_norm(params_, n + ".ln_ffn", d);
      blk.ff1 = make_linear(params_, n + ".ff1", d, ff, rng);
      blk.ff2 = make_linear(params_, n + ".ff2", ff, d, rng);
      decoder_.push_back(blk);
    }
    final_ln_ = make_layer_norm(params_, "decoder.final_ln", d);
    output_ = make_linear(params_, "decoder.output", d, cfg_.vocab, rng);
    init_relaxation(cfg_.decoder_blocks);
  }

  Architecture architecture() const override {
    return Architecture::kTransformer;
  }
  std::size_t vocab_size() const override { return cfg_.vocab; }
  std::size_t attention_layers() const override {
    return cfg_.decoder_blocks;
  }

  Encoded encode(const Tensor& features, std::size_t valid_frames,
                 const ForwardOptions& options) const override {
    const std::size_t frames = frontend_output_length(features.dim(0));
    if (frames > cfg_.max_positions) {
      throw ValueError("transformer: " + std::to_string(frames) +
                       " encoder positions exceed max_positions " +
                       std::to_string(cfg_.max_positions));
    }
    Tensor x = frontend_forward(features, valid_frames, frontend_);
    x = add(x, sinusoidal_positions(frames, cfg_.width));
    std::vector<std::uint8_t> validity(frames, 0);
    const std::size_t valid =
        (valid_frames + kFrontendSubsampling - 1) / kFrontendSubsampling;
    for (std::size_t t = 0; t < valid && t < frames; ++t) validity[t] = 1;
    for (const auto& blk : encoder_) {
      AttentionOptions att = base_options(options);
      att.frame_validity = validity;
      Tensor a = apply(blk.ln_attn, x);
      x = add(x, drop(mha_forward(a, a, a, blk.self_attn, att).z, options));
      x = add(x, feed_forward(blk.ff1, blk.ff2, apply(blk.ln_ffn, x), options));
    }
    return {x, std::move(validity)};
  }

  Tensor decode_all(const Encoded& enc, std::span<const int> inputs,
                    const ForwardOptions& options) const override {
    check_tokens(inputs);
    check_encoded(enc);
    const std::size_t len = inputs.size();
    if (len == 0) throw ValueError("transformer: empty decoder input");
    if (len > cfg_.max_positions)
      throw ValueError("transformer: decoder input exceeds max_positions");
    Tensor y = embed(inputs, 0);
    for (std::size_t b = 0; b < decoder_.size(); ++b) {
      const DecoderBlock& blk = decoder_[b];
      AttentionOptions self = base_options(options);
      self.causal = true;
      Tensor a = apply(blk.ln_self, y);
      y = add(y, drop(mha_forward(a, a, a, blk.self_attn, self).z, options));
      Relaxation relax;
      AttentionOptions cross = cross_options(enc, b, options, relax);
      Tensor c = apply(blk.ln_cross, y);
      y = add(y, mha_forward(c, enc.h, enc.h, blk.cross_attn, cross).z);
      y = add(y, feed_forward(blk.ff1, blk.ff2, apply(blk.ln_ffn, y), options));
    }
    return log_softmax(apply(output_, apply(final_ln_, y)));
  }

  std::unique_ptr<DecoderState> initial_state(
      const Encoded& enc) const override {
    check_encoded(enc);
    auto state = std::make_unique<TransformerState>();
    for (const auto& blk : decoder_) {
      const MhaParams& p = blk.cross_attn;
      state->cross_k.push_back(linear(enc.h, p.w_k, p.b_k));
      state->cross_v.push_back(linear(enc.h, p.w_v, p.b_v));
      state->self_k.emplace_back();
      state->self_v.emplace_back();
    }
    return state;
  }

  Tensor decode_step(const Encoded& enc, int prev_token, DecoderState& base,
                     const ForwardOptions& options) const override {
    auto* state = dynamic_cast<TransformerState*>(&base);
    if (!state) throw ValueError("transformer: foreign decoder state");
    if (state->cross_k.size() != decoder_.size() ||
        state->cross_k[0].dim(0) != enc.h.dim(0) ||
        (state->position > 0 && state->self_k[0].dim(0) != state->position)) {
      throw ShapeError("transformer: stale decoder cache");
    }
    const int token[1] = {prev_token};
    check_tokens(token);
    if (state->position >= cfg_.max_positions)
      throw ValueError("transformer: decoder position exceeds max_positions");
    Tensor y = embed(token, state->position);
    for (std::size_t b = 0; b < decoder_.size(); ++b) {
      const DecoderBlock& blk = decoder_[b];
      const MhaParams& sp = blk.self_attn;
      Tensor a = apply(blk.ln_self, y);
      Tensor k = linear(a, sp.w_k, sp.b_k), v = linear(a, sp.w_v, sp.b_v);
      if (state->position == 0) {
        state->self_k[b] = k;
        state->self_v[b] = v;
      } else {
        state->self_k[b] = concat({state->self_k[b], k}, 0);
        state->self_v[b] = concat({state->self_v[b], v}, 0);
      }
      AttentionOptions self = base_options(options);
      y = add(y, drop(mha_attend_projected(a, state->self_k[b],
                                           state->self_v[b], sp, self)
                          .z,
                      options));
      Relaxation relax;
      AttentionOptions cross = cross_options(enc, b, options, relax);
      Tensor c = apply(blk.ln_cross, y);
      y = add(y, mha_attend_projected(c, state->cross_k[b], state->cross_v[b],
                                      blk.cross_attn, cross)
                     .z);
      y = add(y, feed_forward(blk.ff1, blk.ff2, apply(blk.ln_ffn, y), options));
    }
    ++state->position;
    return log_softmax(apply(output_, apply(final_ln_, y)));
  }

 private:
  AttentionOptions base_options(const ForwardOptions& options) const {
    AttentionOptions att;
    att.training = options.training;
    att.attention_dropout = cfg_.attention_dropout;
    att.rng = options.rng;
    return att;
  }

  AttentionOptions cross_options(const Encoded& enc, std::size_t block,
                                 const ForwardOptions& options,
                                 Relaxation& relax) const {
    AttentionOptions att = base_options(options);
    att.frame_validity = enc.validity;
    if (relaxation_enabled()) {
      relax = block_relaxation(block);
      att.relax = &relax;
    }
    att.capture = options.capture;
    att.capture_layer = block;
    return att;
  }

  Tensor drop(const Tensor& x, const ForwardOptions& options) const {
    return dropout(x, cfg_.dropout, options.training, options.rng);
  }

  Tensor feed_forward(const LinearParams& ff1, const LinearParams& ff2,
                      const Tensor& x, const ForwardOptions& options) const {
    Tensor hidden = drop(relu(apply(ff1, x)), options);
    return drop(apply(ff2, hidden), options);
  }

  Tensor embed(std::span<const int> tokens, std::size_t offset) const {
    const double s = std::sqrt(static_cast<double>(cfg_.width));
    return add(scale(embedding_lookup(embedding_, tokens), s),
               sinusoidal_positions(tokens.size(), cfg_.width, offset));
  }

  void check_encoded(const Encoded& enc) const {
    if (!enc.h.defined() || enc.h.rank() != 2 || enc.h.dim(1) != cfg_.width ||
        enc.h.dim(0) == 0 || enc.validity.size() != enc.h.dim(0)) {
      throw ShapeError("transformer: malformed encoder output");
    }
  }

  TransformerConfig cfg_;
  FrontendParams frontend_;
  std::vector<EncoderBlock> encoder_;
  Tensor embedding_;
  std::vector<DecoderBlock> decoder_;
  LayerNormParams final_ln_;
  LinearParams output_;
};

}  // namespace

std::unique_ptr<Seq2SeqModel> make_transformer(const ModelConfig& config,
                                               std::uint64_t seed) {
  return std::make_unique<Transformer>(config, seed);
}

}  // namespace raed::detail
