// SPDX-License-Identifier: Apache-2.0
//
// Layers shared by the encoder-decoder models: parameter storage, LSTM
// cells, the convolutional frontend and sinusoidal positions.

#ifndef RAED_NN_HPP
#define RAED_NN_HPP

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "raed/tensor.hpp"

namespace raed {

// Named trainable tensors in insertion order. Names are unique.
class ParameterTable {
 public:
  const Tensor& add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const {
    return entries_;
  }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Glorot-uniform [fan_in x fan_out] matrix.
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor uniform_init(Shape shape, double bound, Rng& rng);

struct LinearParams {
  Tensor w, b;
  std::size_t in = 0, out = 0;
};
LinearParams make_linear(ParameterTable& table, const std::string& name,
                         std::size_t in, std::size_t out, Rng& rng);
Tensor apply(const LinearParams& p, const Tensor& x);

struct LayerNormParams {
  Tensor gain, bias;
};
LayerNormParams make_layer_norm(ParameterTable& table, const std::string& name,
                                std::size_t width);
Tensor apply(const LayerNormParams& p, const Tensor& x);

// Gate order i, f, g, o along the 4h axis. Input and recurrent biases are
// kept separately; the forget gate starts at a total bias of 1.
struct LstmParams {
  Tensor w_ih, w_hh, b_ih, b_hh;
  std::size_t input = 0, hidden = 0;
};
LstmParams make_lstm(ParameterTable& table, const std::string& name,
                     std::size_t input, std::size_t hidden, Rng& rng);
std::size_t lstm_parameter_count(std::size_t input, std::size_t hidden);

struct LstmState {
  Tensor h, c;  // [1 x hidden]
};
LstmState lstm_zero_state(const LstmParams& p);
// One step; gates_in is x W_ih + b_ih + b_hh for this step, [1 x 4h].
LstmState lstm_step(const Tensor& gates_in, const LstmState& state,
                    const LstmParams& p);
LstmState lstm_cell(const Tensor& x, const LstmState& state,
                    const LstmParams& p);
// Runs over all rows of x ([T x input]); returns [T x hidden].
Tensor lstm_sequence(const Tensor& x, const LstmParams& p, bool reverse);

struct FrontendConfig {
  std::size_t input_dim = 16;
  std::vector<std::size_t> channels = {32, 32, 32, 32};
  // 0 leaves the flattened conv output unprojected.
  std::size_t output_dim = 0;

  void validate() const;
  std::size_t reduced_freq() const;
  std::size_t flat_dim() const { return channels.back() * reduced_freq(); }
  std::size_t width() const { return output_dim ? output_dim : flat_dim(); }
  std::size_t parameter_count() const;
};

inline constexpr std::size_t kFrontendSubsampling = 4;
// ceil(frames / 4); throws ValueError below 4 frames.
std::size_t frontend_output_length(std::size_t frames);

struct FrontendParams {
  std::vector<Tensor> conv_w, conv_b;
  LinearParams proj;
  FrontendConfig config;
};
FrontendParams make_frontend(ParameterTable& table, const std::string& name,
                             const FrontendConfig& config, Rng& rng);

// x: [frames x input_dim]; rows at or past valid_frames are treated as
// padding. Returns [ceil(frames/4) x width()] with zero rows past
// ceil(valid_frames/4).
Tensor frontend_forward(const Tensor& x, std::size_t valid_frames,
                        const FrontendParams& p);

// Interleaved sinusoids: even columns sin, odd columns cos.
Tensor sinusoidal_positions(std::size_t rows, std::size_t width,
                            std::size_t offset = 0);

}  // namespace raed

#endif  // RAED_NN_HPP
