// SPDX-License-Identifier: Apache-2.0
//
// Shared random inputs, micro model configurations and gradient drivers for
// the unit tests and the acceptance runner.

#ifndef RAED_TESTS_FIXTURES_HPP
#define RAED_TESTS_FIXTURES_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "gradcheck.hpp"
#include "raed/attention.hpp"
#include "raed/decode.hpp"
#include "raed/model.hpp"
#include "raed/tokens.hpp"

namespace raed::testing {

inline double row_entropy(const std::vector<double>& row) {
  double h = 0.0;
  for (double p : row)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

// Random distribution over the valid entries, occasionally peaked or sparse.
inline std::vector<double> random_row(Rng& rng, const std::vector<std::uint8_t>& valid) {
  std::vector<double> row(valid.size(), 0.0);
  const double sharpness = rng.uniform(0.1, 20.0);
  double total = 0.0;
  for (std::size_t t = 0; t < row.size(); ++t) {
    if (!valid[t]) continue;
    row[t] = rng.uniform() < 0.1 ? 0.0 : std::exp(sharpness * rng.uniform());
    total += row[t];
  }
  if (total == 0.0) {
    for (std::size_t t = 0; t < row.size(); ++t)
      if (valid[t]) {
        row[t] = 1.0;
        total = 1.0;
        break;
      }
  }
  for (auto& p : row) p /= total;
  return row;
}

inline MhaParams random_mha(Rng& rng, std::size_t d, std::size_t heads) {
  MhaParams p;
  p.width = d;
  p.heads = heads;
  p.w_q = random_tensor({d, d}, rng, -0.8, 0.8);
  p.w_k = random_tensor({d, d}, rng, -0.8, 0.8);
  p.w_v = random_tensor({d, d}, rng, -0.8, 0.8);
  p.w_o = random_tensor({d, d}, rng, -0.8, 0.8);
  p.b_q = random_tensor({d}, rng, -0.2, 0.2);
  p.b_k = random_tensor({d}, rng, -0.2, 0.2);
  p.b_v = random_tensor({d}, rng, -0.2, 0.2);
  p.b_o = random_tensor({d}, rng, -0.2, 0.2);
  return p;
}

inline std::vector<Tensor> mha_tensors(const MhaParams& p) {
  return {p.w_q, p.b_q, p.w_k, p.b_k, p.w_v, p.b_v, p.w_o, p.b_o};
}

inline BahdanauParams random_bahdanau(Rng& rng, std::size_t de, std::size_t da,
                                      std::size_t dd) {
  BahdanauParams p;
  p.encoder_dim = de;
  p.attention_dim = da;
  p.decoder_dim = dd;
  p.w_q = random_tensor({dd, da}, rng, -0.8, 0.8);
  p.w_v = random_tensor({de, da}, rng, -0.8, 0.8);
  p.v = random_tensor({1, da}, rng, -0.8, 0.8);
  p.b = random_tensor({1, da}, rng, -0.2, 0.2);
  return p;
}

// MHA with relaxation on a masked key set; every input is checked.
inline GradCheckResult mha_gradient_check(double gamma, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = 4, heads = 2;
  MhaParams p = random_mha(rng, d, heads);
  Tensor q = random_tensor({3, d}, rng);
  Tensor kv = random_tensor({4, d}, rng);
  Tensor r = random_tensor({3, d}, rng, -1.0, 1.0, false);
  std::vector<std::uint8_t> valid = {1, 1, 0, 1};
  Relaxation relax{gamma, {}};
  auto loss = [&] {
    AttentionOptions opt;
    opt.frame_validity = valid;
    opt.relax = &relax;
    opt.training = true;
    return sum(mul(mha_forward(q, kv, kv, p, opt).z, r));
  };
  auto params = mha_tensors(p);
  params.push_back(q);
  params.push_back(kv);
  return check_gradients(loss, params);
}

inline GradCheckResult bahdanau_gradient_check(double gamma, std::uint64_t seed) {
  Rng rng(seed);
  BahdanauParams p = random_bahdanau(rng, 3, 4, 2);
  Tensor q = random_tensor({1, 2}, rng);
  Tensor h = random_tensor({5, 3}, rng);
  Tensor r = random_tensor({1, 3}, rng, -1.0, 1.0, false);
  std::vector<std::uint8_t> valid = {1, 1, 1, 0, 1};
  Relaxation relax{gamma, {}};
  auto loss = [&] {
    AttentionOptions opt;
    opt.frame_validity = valid;
    opt.relax = &relax;
    opt.training = true;
    return sum(mul(bahdanau_forward(q, h, p, opt).context, r));
  };
  return check_gradients(loss, {p.w_q, p.w_v, p.v, p.b, q, h});
}

inline FrontendConfig tiny_frontend(std::size_t features = 4) {
  FrontendConfig f;
  f.input_dim = features;
  f.channels = {2, 2, 2, 2};
  return f;
}

inline ModelConfig micro_transformer() {
  ModelConfig c;
  c.architecture = Architecture::kTransformer;
  auto& t = c.transformer;
  t.frontend = tiny_frontend();
  t.encoder_blocks = 2;
  t.decoder_blocks = 2;
  t.width = 8;
  t.heads = 2;
  t.dropout = 0.0;
  t.attention_dropout = 0.0;
  t.vocab = 6;
  return c;
}

inline ModelConfig micro_las() {
  ModelConfig c;
  c.architecture = Architecture::kLas;
  auto& l = c.las;
  l.frontend = tiny_frontend();
  l.encoder_dim = 4;
  l.attention_dim = 2;
  l.decoder_dim = 2;
  l.embedding_dim = 3;
  l.dropout = 0.0;
  l.vocab = 6;
  return c;
}

struct ModelGradResult {
  GradCheckResult check;
  std::string worst_parameter;
};

// Every parameter of a micro model against central differences of a random
// linear functional of the teacher-forced log-probabilities.
inline ModelGradResult model_gradient_check(ModelConfig c, double gamma, bool learned,
                                            std::uint64_t seed) {
  c.relaxation().gamma = gamma;
  if (learned) c.relaxation().mode = RelaxationMode::kLearned;
  auto model = make_model(c, seed);
  Rng rng(seed + 100);
  // Zero-initialised biases put ReLU inputs exactly on the kink for
  // all-zero patches; shift them off it.
  for (const auto& [name, t] : model->parameters().entries()) {
    if (name.rfind("frontend.", 0) == 0 && name.ends_with(".bias")) {
      for (double& v : Tensor(t).mutable_data()) v = rng.uniform(0.01, 0.1);
    }
  }
  Tensor x = random_tensor({19, 4}, rng, -1.0, 1.0, false);  // T = 5 encoder frames
  std::vector<int> inputs = {kEosId, 3, 4};                  // L = 3
  Tensor r = random_tensor({3, 6}, rng, -1.0, 1.0, false);
  ForwardOptions train;
  train.training = true;
  auto loss = [&] {
    Encoded enc = model->encode(x, train);
    return sum(mul(model->decode_all(enc, inputs, train), r));
  };
  std::vector<Tensor> params;
  for (const auto& [name, t] : model->parameters().entries()) params.push_back(t);
  ModelGradResult out;
  out.check = check_gradients(loss, params);
  if (!out.check.worst.empty())
    out.worst_parameter =
        model->parameters().entries()[std::stoul(out.check.worst)].first;
  return out;
}

// Fused score of a token sequence, replayed from fresh scorer states.
inline double replay(const StepScorer& am, const StepScorer* lm, double lambda,
                     const std::vector<int>& tokens) {
  auto as = am.start();
  auto ls = lm ? lm->start() : nullptr;
  double s = 0.0;
  int prev = kEosId;
  for (int t : tokens) {
    s += am.score(*as, prev)[t];
    if (lm) s += lambda * lm->score(*ls, prev)[t];
    prev = t;
  }
  return s;
}

// Every EOS-terminated sequence of at most max_len tokens, ranked exactly as
// the decoder ranks finished hypotheses.
inline std::vector<std::pair<std::vector<int>, double>> enumerate_ranked(
    const StepScorer& am, const StepScorer* lm, double lambda, std::size_t max_len,
    bool normalize) {
  std::vector<std::pair<std::vector<int>, double>> all;
  std::function<void(std::vector<int>&)> walk = [&](std::vector<int>& prefix) {
    prefix.push_back(kEosId);
    all.emplace_back(prefix, replay(am, lm, lambda, prefix));
    prefix.pop_back();
    if (prefix.size() + 1 >= max_len) return;
    for (int c = kReservedTokens; c < static_cast<int>(am.vocab_size()); ++c) {
      prefix.push_back(c);
      walk(prefix);
      prefix.pop_back();
    }
  };
  std::vector<int> root;
  walk(root);
  std::stable_sort(all.begin(), all.end(), [normalize](const auto& a, const auto& b) {
    const double sa = normalize ? a.second / a.first.size() : a.second;
    const double sb = normalize ? b.second / b.first.size() : b.second;
    if (sa != sb) return sa > sb;
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return all;
}

// Exhaustive edit-script oracle: the set of (D, I, S) triples reaching the
// minimum total from position (i, j).
struct EditOracle {
  using Triple = std::tuple<std::size_t, std::size_t, std::size_t>;
  const std::vector<int>& r;
  const std::vector<int>& h;
  std::map<std::pair<std::size_t, std::size_t>, std::set<Triple>> memo;

  static std::size_t total(const Triple& t) {
    return std::get<0>(t) + std::get<1>(t) + std::get<2>(t);
  }

  const std::set<Triple>& best(std::size_t i = 0, std::size_t j = 0) {
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    std::set<Triple> all;
    auto extend = [&](std::size_t ni, std::size_t nj, Triple add) {
      for (const auto& [d, in, s] : best(ni, nj))
        all.emplace(d + std::get<0>(add), in + std::get<1>(add), s + std::get<2>(add));
    };
    if (i == r.size() && j == h.size()) all.emplace(0, 0, 0);
    if (i < r.size() && j < h.size()) extend(i + 1, j + 1, {0, 0, r[i] != h[j]});
    if (i < r.size()) extend(i + 1, j, {1, 0, 0});
    if (j < h.size()) extend(i, j + 1, {0, 1, 0});
    std::size_t lo = std::numeric_limits<std::size_t>::max();
    for (const auto& t : all) lo = std::min(lo, total(t));
    std::set<Triple> kept;
    for (const auto& t : all)
      if (total(t) == lo) kept.insert(t);
    return memo[key] = kept;
  }
};

}  // namespace raed::testing

#endif  // RAED_TESTS_FIXTURES_HPP
