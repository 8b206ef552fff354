// SPDX-License-Identifier: Apache-2.0

#include "raed/nn.hpp"

#include <cmath>

#include "raed/error.hpp"

namespace raed {

const Tensor& ParameterTable::add(const std::string& name, Tensor value) {
  if (index_.count(name))
    throw ValueError("duplicate parameter name '" + name + "'");
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

const Tensor& ParameterTable::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

bool ParameterTable::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

std::size_t ParameterTable::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParameterTable::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_init({fan_in, fan_out}, bound, rng);
}

LinearParams make_linear(ParameterTable& table, const std::string& name,
                         std::size_t in, std::size_t out, Rng& rng) {
  LinearParams p;
  p.in = in;
  p.out = out;
  p.w = table.add(name + ".weight", xavier_uniform(in, out, rng));
  p.b = table.add(name + ".bias", Tensor::zeros({out}, true));
  return p;
}

Tensor apply(const LinearParams& p, const Tensor& x) {
  return add(matmul(x, p.w), p.b);
}

LayerNormParams make_layer_norm(ParameterTable& table, const std::string& name,
                                std::size_t width) {
  return {table.add(name + ".gain", Tensor::full({width}, 1.0, true)),
          table.add(name + ".bias", Tensor::zeros({width}, true))};
}

Tensor apply(const LayerNormParams& p, const Tensor& x) {
  return layer_norm(x, p.gain, p.bias);
}

LstmParams make_lstm(ParameterTable& table, const std::string& name,
                     std::size_t input, std::size_t hidden, Rng& rng) {
  LstmParams p;
  p.input = input;
  p.hidden = hidden;
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  p.w_ih = table.add(name + ".w_ih", uniform_init({input, 4 * hidden}, bound, rng));
  p.w_hh = table.add(name + ".w_hh", uniform_init({hidden, 4 * hidden}, bound, rng));
  std::vector<double> b_ih(4 * hidden, 0.0);
  for (std::size_t j = hidden; j < 2 * hidden; ++j) b_ih[j] = 1.0;
  p.b_ih = table.add(name + ".b_ih", Tensor({4 * hidden}, std::move(b_ih), true));
  p.b_hh = table.add(name + ".b_hh", Tensor::zeros({4 * hidden}, true));
  return p;
}

std::size_t lstm_parameter_count(std::size_t input, std::size_t hidden) {
  return 4 * hidden * (input + hidden) + 8 * hidden;
}

LstmState lstm_zero_state(const LstmParams& p) {
  return {Tensor::zeros({1, p.hidden}), Tensor::zeros({1, p.hidden})};
}

LstmState lstm_step(const Tensor& gates_in, const LstmState& state,
                    const LstmParams& p) {
  const std::size_t h = p.hidden;
  Tensor gates = add(gates_in, matmul(state.h, p.w_hh));
  Tensor i = sigmoid(slice(gates, 1, 0, h));
  Tensor f = sigmoid(slice(gates, 1, h, h));
  Tensor g = tanh(slice(gates, 1, 2 * h, h));
  Tensor o = sigmoid(slice(gates, 1, 3 * h, h));
  Tensor c = add(mul(f, state.c), mul(i, g));
  return {mul(o, tanh(c)), c};
}

LstmState lstm_cell(const Tensor& x, const LstmState& state,
                    const LstmParams& p) {
  if (x.rank() != 2 || x.dim(0) != 1 || x.dim(1) != p.input) {
    throw ShapeError("lstm: input " + shape_str(x.shape()) + " for input size " +
                     std::to_string(p.input));
  }
  Tensor gates_in = add(add(matmul(x, p.w_ih), p.b_ih), p.b_hh);
  return lstm_step(gates_in, state, p);
}

Tensor lstm_sequence(const Tensor& x, const LstmParams& p, bool reverse) {
  if (x.rank() != 2 || x.dim(1) != p.input) {
    throw ShapeError("lstm: input " + shape_str(x.shape()) + " for input size " +
                     std::to_string(p.input));
  }
  const std::size_t steps = x.dim(0);
  Tensor gates_in = add(add(matmul(x, p.w_ih), p.b_ih), p.b_hh);
  LstmState state = lstm_zero_state(p);
  std::vector<Tensor> outputs(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const std::size_t t = reverse ? steps - 1 - k : k;
    state = lstm_step(slice(gates_in, 0, t, 1), state, p);
    outputs[t] = state.h;
  }
  return concat(outputs, 0);
}

void FrontendConfig::validate() const {
  if (input_dim == 0) throw ConfigError("frontend: input_dim must be >= 1");
  if (channels.size() != 4)
    throw ConfigError("frontend: exactly 4 conv channel counts required");
  for (auto c : channels)
    if (c == 0) throw ConfigError("frontend: zero conv channels");
}

std::size_t FrontendConfig::reduced_freq() const {
  return (((input_dim + 1) / 2) + 1) / 2;
}

std::size_t FrontendConfig::parameter_count() const {
  std::size_t n = 0, in = 1;
  for (auto c : channels) {
    n += c * in * 9 + c;
    in = c;
  }
  if (output_dim) n += flat_dim() * output_dim + output_dim;
  return n;
}

std::size_t frontend_output_length(std::size_t frames) {
  if (frames < kFrontendSubsampling) {
    throw ValueError("frontend: " + std::to_string(frames) +
                     " input frames, need at least 4");
  }
  return (frames + kFrontendSubsampling - 1) / kFrontendSubsampling;
}

namespace {

constexpr std::size_t kStrides[4] = {1, 2, 1, 2};

// [1 x rows x 1] mask with ones on the first `valid` time rows.
Tensor time_mask(std::size_t rows, std::size_t valid) {
  std::vector<double> m(rows, 0.0);
  for (std::size_t t = 0; t < valid && t < rows; ++t) m[t] = 1.0;
  return Tensor({1, rows, 1}, std::move(m));
}

}  // namespace

FrontendParams make_frontend(ParameterTable& table, const std::string& name,
                             const FrontendConfig& config, Rng& rng) {
  config.validate();
  FrontendParams p;
  p.config = config;
  std::size_t in = 1;
  for (std::size_t l = 0; l < 4; ++l) {
    const std::size_t out = config.channels[l];
    const double bound = std::sqrt(6.0 / static_cast<double>(9 * (in + out)));
    p.conv_w.push_back(table.add(name + ".conv" + std::to_string(l) + ".weight",
                                 uniform_init({out, in, 3, 3}, bound, rng)));
    p.conv_b.push_back(table.add(name + ".conv" + std::to_string(l) + ".bias",
                                 Tensor::zeros({out}, true)));
    in = out;
  }
  if (config.output_dim)
    p.proj = make_linear(table, name + ".proj", config.flat_dim(),
                         config.output_dim, rng);
  return p;
}

Tensor frontend_forward(const Tensor& x, std::size_t valid_frames,
                        const FrontendParams& p) {
  const FrontendConfig& cfg = p.config;
  if (x.rank() != 2 || x.dim(1) != cfg.input_dim) {
    throw ShapeError("frontend: input " + shape_str(x.shape()) +
                     " does not have feature dim " +
                     std::to_string(cfg.input_dim));
  }
  const std::size_t frames = x.dim(0);
  const std::size_t out_len = frontend_output_length(frames);
  if (valid_frames == 0 || valid_frames > frames) {
    throw ValueError("frontend: valid frame count " +
                     std::to_string(valid_frames) + " for " +
                     std::to_string(frames) + " frames");
  }
  std::size_t valid = valid_frames;
  Tensor h = reshape(x, {1, frames, cfg.input_dim});
  if (valid < frames) h = mul(h, time_mask(frames, valid));
  for (std::size_t l = 0; l < 4; ++l) {
    const std::size_t s = kStrides[l];
    h = relu(conv2d(h, p.conv_w[l], p.conv_b[l], s, s, 1, 1));
    valid = (valid + s - 1) / s;
    if (valid < h.dim(1)) h = mul(h, time_mask(h.dim(1), valid));
  }
  // [C x T x F'] -> [T x C*F']
  const std::size_t c = h.dim(0), t = h.dim(1), f = h.dim(2);
  if (t != out_len) throw ShapeError("frontend: unexpected output length");
  Tensor flat = reshape(permute(h, {1, 0, 2}), {t, c * f});
  if (!cfg.output_dim) return flat;
  Tensor y = apply(p.proj, flat);
  // The projection bias would otherwise leak into padding rows.
  if (valid < t) y = mul(y, reshape(time_mask(t, valid), {t, 1}));
  return y;
}

Tensor sinusoidal_positions(std::size_t rows, std::size_t width,
                            std::size_t offset) {
  std::vector<double> pe(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    const double pos = static_cast<double>(r + offset);
    for (std::size_t j = 0; j < width; ++j) {
      const double rate = std::pow(
          10000.0, -static_cast<double>(j - j % 2) / static_cast<double>(width));
      pe[r * width + j] = j % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  }
  return Tensor({rows, width}, std::move(pe));
}

}  // namespace raed
