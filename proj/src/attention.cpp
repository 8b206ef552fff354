// SPDX-License-Identifier: Apache-2.0

#include "raed/attention.hpp"

#include <cmath>
#include <string>

#include "raed/error.hpp"

namespace raed {

namespace {

std::vector<std::uint8_t> validity_or_all(std::span<const std::uint8_t> mask,
                                          std::size_t frames) {
  if (mask.empty()) return all_valid(frames);
  if (mask.size() != frames) {
    throw ShapeError("attention: frame mask of length " +
                     std::to_string(mask.size()) + " for " +
                     std::to_string(frames) + " frames");
  }
  return {mask.begin(), mask.end()};
}

// Uniform distribution over the valid frames, as a [T] row.
Tensor uniform_row(std::span<const std::uint8_t> validity) {
  std::size_t valid = 0;
  for (auto v : validity) valid += v ? 1 : 0;
  if (valid == 0) throw ValueError("relax_weights: no valid frames");
  const double u = 1.0 / static_cast<double>(valid);
  std::vector<double> row(validity.size());
  for (std::size_t t = 0; t < row.size(); ++t) row[t] = validity[t] ? u : 0.0;
  const std::size_t frames = row.size();
  return Tensor({frames}, std::move(row));
}

void check_gamma(double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) {
    throw ValueError("relaxation coefficient " + std::to_string(gamma) +
                     " outside [0, 1]");
  }
}

std::vector<std::uint8_t> attention_mask(std::size_t rows, std::size_t cols,
                                         std::span<const std::uint8_t> validity,
                                         bool causal) {
  std::vector<std::uint8_t> mask(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      mask[r * cols + c] = validity[c] && (!causal || c <= r) ? 1 : 0;
  return mask;
}

Tensor apply_relaxation(const Tensor& weights, const AttentionOptions& options,
                        std::span<const std::uint8_t> validity) {
  if (!options.relax || !options.training) return weights;
  if (options.relax->is_learned())
    return relax_weights(weights, options.relax->learned, validity);
  return relax_weights(weights, options.relax->gamma, validity);
}

// Returns (weights to multiply the values with, weights to report).
std::pair<Tensor, Tensor> relax_and_drop(
    const Tensor& weights, const AttentionOptions& options,
    std::span<const std::uint8_t> validity) {
  if (options.dropout_before_relaxation) {
    Tensor relaxed = apply_relaxation(
        dropout(weights, options.attention_dropout, options.training,
                options.rng),
        options, validity);
    Tensor reported = apply_relaxation(weights, options, validity);
    if (options.capture)
      options.capture->record(options.capture_layer, reported, validity);
    return {relaxed, reported};
  }
  Tensor relaxed = apply_relaxation(weights, options, validity);
  if (options.capture)
    options.capture->record(options.capture_layer, relaxed, validity);
  return {dropout(relaxed, options.attention_dropout, options.training,
                  options.rng),
          relaxed};
}

// [rows x d] -> [heads x rows x d/heads]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t rows = x.dim(0), width = x.dim(1);
  return permute(reshape(x, {rows, heads, width / heads}), {1, 0, 2});
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t heads = x.dim(0), rows = x.dim(1), dh = x.dim(2);
  return reshape(permute(x, {1, 0, 2}), {rows, heads * dh});
}

void check_matrix(const Tensor& t, std::size_t rows, std::size_t cols,
                  const char* what) {
  if (!t.defined() || t.rank() != 2 || t.dim(0) != rows || t.dim(1) != cols) {
    throw ShapeError(std::string(what) + ": expected [" + std::to_string(rows) +
                     "x" + std::to_string(cols) + "], got " +
                     (t.defined() ? shape_str(t.shape()) : "undefined"));
  }
}

void check_vector(const Tensor& t, std::size_t n, const char* what) {
  if (!t.defined() || t.numel() != n) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(n) +
                     " entries, got " +
                     (t.defined() ? shape_str(t.shape()) : "undefined"));
  }
}

}  // namespace

void RelaxationConfig::validate() const { check_gamma(gamma); }

std::size_t AttentionWeights::valid_count() const {
  if (frame_validity.empty()) return frames();
  std::size_t n = 0;
  for (auto v : frame_validity) n += v ? 1 : 0;
  return n;
}

std::vector<std::uint8_t> all_valid(std::size_t frames) {
  return std::vector<std::uint8_t>(frames, 1);
}

Tensor relax_weights(const Tensor& weights, double gamma,
                     std::span<const std::uint8_t> frame_validity) {
  check_gamma(gamma);
  auto validity = validity_or_all(frame_validity, weights.dim(-1));
  Tensor uniform = uniform_row(validity);
  return add(scale(weights, 1.0 - gamma), scale(uniform, gamma));
}

Tensor relax_weights(const Tensor& weights, const Tensor& gamma,
                     std::span<const std::uint8_t> frame_validity) {
  if (gamma.numel() != 1) throw ShapeError("relax_weights: gamma must be [1]");
  check_gamma(gamma.item());
  auto validity = validity_or_all(frame_validity, weights.dim(-1));
  Tensor uniform = uniform_row(validity);
  Tensor keep = add_scalar(neg(gamma), 1.0);
  return add(mul(weights, keep), mul(uniform, gamma));
}

AttentionWeights relax_weights(const AttentionWeights& weights, double gamma) {
  return {relax_weights(weights.values, gamma, weights.frame_validity),
          weights.frame_validity};
}

void AttentionCapture::record(std::size_t layer, const Tensor& weights,
                              std::span<const std::uint8_t> frame_validity) {
  const std::size_t cols = weights.dim(-1);
  const std::size_t rows = weights.rank() >= 2 ? weights.dim(-2) : 1;
  const std::size_t heads = weights.numel() / (rows * cols);
  auto validity = validity_or_all(frame_validity, cols);
  std::size_t valid = 0;
  for (auto v : validity) valid += v ? 1 : 0;
  const double* src = weights.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    Matrix& m = matrices_[{layer, h}];
    if (m.cols != 0 && m.cols != valid) {
      throw ShapeError("attention capture: frame count changed within a record");
    }
    m.cols = valid;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        if (validity[c]) m.values.push_back(src[(h * rows + r) * cols + c]);
  }
}

void MhaParams::validate() const {
  if (heads == 0) throw ValueError("mha: head count must be >= 1");
  if (width % heads != 0) {
    throw ValueError("mha: width " + std::to_string(width) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  check_matrix(w_q, width, width, "mha w_q");
  check_matrix(w_k, width, width, "mha w_k");
  check_matrix(w_v, width, width, "mha w_v");
  check_matrix(w_o, width, width, "mha w_o");
  check_vector(b_q, width, "mha b_q");
  check_vector(b_k, width, "mha b_k");
  check_vector(b_v, width, "mha b_v");
  check_vector(b_o, width, "mha b_o");
}

std::vector<AttentionWeights> MhaOutput::per_head() const {
  std::vector<AttentionWeights> out;
  const std::size_t heads = weights.dim(0), rows = weights.dim(1),
                    cols = weights.dim(2);
  NoGradGuard no_grad;
  for (std::size_t h = 0; h < heads; ++h) {
    out.push_back({reshape(slice(weights, 0, h, 1), {rows, cols}),
                   frame_validity});
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

MhaOutput mha_forward(const Tensor& query, const Tensor& key,
                      const Tensor& value, const MhaParams& params,
                      const AttentionOptions& options) {
  params.validate();
  if (key.rank() != 2 || value.rank() != 2 || key.dim(0) != value.dim(0)) {
    throw ShapeError("mha: key " + shape_str(key.shape()) + " and value " +
                     shape_str(value.shape()) + " disagree");
  }
  return mha_attend_projected(query, linear(key, params.w_k, params.b_k),
                              linear(value, params.w_v, params.b_v), params,
                              options);
}

MhaOutput mha_attend_projected(const Tensor& query, const Tensor& key_proj,
                               const Tensor& value_proj,
                               const MhaParams& params,
                               const AttentionOptions& options) {
  params.validate();
  const std::size_t d = params.width;
  if (query.rank() != 2 || query.dim(1) != d) {
    throw ShapeError("mha: query " + shape_str(query.shape()) +
                     " does not have width " + std::to_string(d));
  }
  check_matrix(key_proj, key_proj.defined() ? key_proj.dim(0) : 0, d,
               "mha projected keys");
  check_matrix(value_proj, key_proj.dim(0), d, "mha projected values");
  const std::size_t rows = query.dim(0), frames = key_proj.dim(0);
  auto validity = validity_or_all(options.frame_validity, frames);
  auto mask = attention_mask(rows, frames, validity, options.causal);

  Tensor q = split_heads(linear(query, params.w_q, params.b_q), params.heads);
  Tensor k = split_heads(key_proj, params.heads);
  Tensor v = split_heads(value_proj, params.heads);
  Tensor scores =
      scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor weights = masked_softmax(scores, mask);
  auto [dropped, captured] = relax_and_drop(weights, options, validity);
  Tensor context = merge_heads(matmul(dropped, v));
  return {linear(context, params.w_o, params.b_o), captured,
          std::move(validity)};
}

void BahdanauParams::validate() const {
  if (encoder_dim == 0 || attention_dim == 0 || decoder_dim == 0)
    throw ValueError("bahdanau: zero dimension");
  check_matrix(w_q, decoder_dim, attention_dim, "bahdanau W^(Q)");
  check_matrix(w_v, encoder_dim, attention_dim, "bahdanau W^(V)");
  check_matrix(v, 1, attention_dim, "bahdanau v");
  check_matrix(b, 1, attention_dim, "bahdanau b");
}

Tensor bahdanau_value_projection(const Tensor& values,
                                 const BahdanauParams& params) {
  params.validate();
  if (values.rank() != 2 || values.dim(1) != params.encoder_dim) {
    throw ShapeError("bahdanau: values " + shape_str(values.shape()) +
                     " do not have width d_e=" +
                     std::to_string(params.encoder_dim));
  }
  return matmul(values, params.w_v);
}

BahdanauOutput bahdanau_forward(const Tensor& query, const Tensor& values,
                                const BahdanauParams& params,
                                const AttentionOptions& options) {
  return bahdanau_attend(query, values,
                         bahdanau_value_projection(values, params), params,
                         options);
}

BahdanauOutput bahdanau_attend(const Tensor& query, const Tensor& values,
                               const Tensor& value_proj,
                               const BahdanauParams& params,
                               const AttentionOptions& options) {
  params.validate();
  check_matrix(query, 1, params.decoder_dim, "bahdanau query");
  if (values.rank() != 2 || values.dim(1) != params.encoder_dim) {
    throw ShapeError("bahdanau: values " + shape_str(values.shape()) +
                     " do not have width d_e=" +
                     std::to_string(params.encoder_dim));
  }
  const std::size_t frames = values.dim(0);
  check_matrix(value_proj, frames, params.attention_dim,
               "bahdanau projected values");
  auto validity = validity_or_all(options.frame_validity, frames);

  Tensor q = add(matmul(query, params.w_q), params.b);          // [1 x d_a]
  Tensor energy = tanh(add(value_proj, q));                     // [T x d_a]
  Tensor scores = reshape(matmul(energy, transpose(params.v)),  // [T x 1]
                          {1, frames});
  auto mask = attention_mask(1, frames, validity, false);
  Tensor weights = masked_softmax(scores, mask);
  auto [dropped, captured] = relax_and_drop(weights, options, validity);
  return {matmul(dropped, values), captured};
}

}  // namespace raed
