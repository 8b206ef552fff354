// SPDX-License-Identifier: Apache-2.0

#include "raed/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "raed/error.hpp"

namespace raed {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> row_values(const Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace

std::vector<double> fuse(std::span<const double> log_p,
                         std::span<const double> log_p_lm, double lambda) {
  if (log_p.size() != log_p_lm.size())
    throw ShapeError("fuse: score vectors differ in length");
  if (std::isnan(lambda)) throw ValueError("fuse: NaN weight");
  std::vector<double> out(log_p.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (std::isnan(log_p[i]) || std::isnan(log_p_lm[i]))
      throw ValueError("fuse: NaN score");
    out[i] = lambda == 0.0 ? log_p[i] : log_p[i] + lambda * log_p_lm[i];
  }
  return out;
}

Tensor fuse(const Tensor& log_p, const Tensor& log_p_lm, double lambda) {
  if (log_p.shape() != log_p_lm.shape())
    throw ShapeError("fuse: " + shape_str(log_p.shape()) + " vs " +
                     shape_str(log_p_lm.shape()));
  return Tensor(log_p.shape(), fuse(log_p.data(), log_p_lm.data(), lambda));
}

std::unique_ptr<DecoderState> ModelScorer::start() const {
  return model_.initial_state(enc_);
}

std::vector<double> ModelScorer::score(DecoderState& state, int prev) const {
  NoGradGuard guard;
  return row_values(model_.decode_step(enc_, prev, state, ForwardOptions{}));
}

void FusionConfig::validate() const {
  if (!(lm_weight >= 0.0)) throw ConfigError("decode: lm_weight must be >= 0");
  if (beam < 1) throw ConfigError("decode: beam must be >= 1");
  if (nbest < 1) throw ConfigError("decode: nbest must be >= 1");
  if (!(max_length_ratio > 0.0))
    throw ConfigError("decode: max_length_ratio must be > 0");
  if (eos_rule == EosRule::kThreshold && !(eos_threshold >= 1.0))
    throw ConfigError("decode: eos_threshold must be >= 1");
}

double Hypothesis::normalized_score() const {
  return tokens.empty() ? score : score / static_cast<double>(tokens.size());
}

std::size_t output_length_cap(const FusionConfig& config, std::size_t frames) {
  if (config.max_length > 0) return config.max_length;
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::ceil(config.max_length_ratio * static_cast<double>(frames))));
}

BeamResult beam_search(const StepScorer& am, const StepScorer* lm,
                       const FusionConfig& config, std::size_t max_length) {
  config.validate();
  const std::size_t vocab = am.vocab_size();
  if (lm && lm->vocab_size() != vocab)
    throw ShapeError("beam search: LM vocabulary " + std::to_string(lm->vocab_size()) +
                     " differs from model vocabulary " + std::to_string(vocab));
  if (config.beam > config.max_expansions / vocab)
    throw ValueError("beam search: beam " + std::to_string(config.beam) + " x " +
                     std::to_string(vocab) + " tokens exceeds the expansion budget " +
                     std::to_string(config.max_expansions));
  if (max_length == 0) throw ValueError("beam search: max_length must be >= 1");
  const double lambda = lm ? config.lm_weight : 0.0;

  std::vector<Hypothesis> live(1), finished;
  live[0].am_state = am.start();
  if (lm) live[0].lm_state = lm->start();

  struct Candidate {
    std::size_t parent;
    int token;
    double score, am, lm;
  };
  for (std::size_t step = 0; step < max_length && !live.empty(); ++step) {
    std::vector<Candidate> cands;
    std::vector<std::shared_ptr<const DecoderState>> am_next(live.size()),
        lm_next(live.size());
    for (std::size_t i = 0; i < live.size(); ++i) {
      const Hypothesis& h = live[i];
      const int prev = h.tokens.empty() ? kEosId : h.tokens.back();
      std::shared_ptr<DecoderState> s = h.am_state->clone();
      const std::vector<double> lp = am.score(*s, prev);
      am_next[i] = std::move(s);
      std::vector<double> lp_lm(vocab, 0.0);
      if (lm) {
        std::shared_ptr<DecoderState> t = h.lm_state->clone();
        lp_lm = lm->score(*t, prev);
        lm_next[i] = std::move(t);
      }
      const std::vector<double> fused = fuse(lp, lp_lm, lambda);
      double best_other = kNegInf;
      for (std::size_t c = 0; c < vocab; ++c)
        if (static_cast<int>(c) != kPadId && static_cast<int>(c) != kEosId)
          best_other = std::max(best_other, fused[c]);
      for (std::size_t c = 0; c < vocab; ++c) {
        const int token = static_cast<int>(c);
        if (token == kPadId || fused[c] == kNegInf) continue;
        if (token == kEosId && config.eos_rule == EosRule::kThreshold &&
            fused[c] < config.eos_threshold * best_other)
          continue;
        cands.push_back({i, token, h.score + fused[c], h.am_score + lp[c],
                         h.lm_score + lp_lm[c]});
      }
    }
    // Candidates are generated in (parent, token) order, so a stable sort on
    // score breaks ties towards the better parent and the lower token id.
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) {
                       return a.score > b.score;
                     });
    std::vector<Hypothesis> next;
    for (std::size_t k = 0; k < std::min(config.beam, cands.size()); ++k) {
      const Candidate& c = cands[k];
      Hypothesis h;
      h.tokens = live[c.parent].tokens;
      h.tokens.push_back(c.token);
      h.score = c.score;
      h.am_score = c.am;
      h.lm_score = c.lm;
      h.am_state = am_next[c.parent];
      h.lm_state = lm_next[c.parent];
      h.finished = c.token == kEosId;
      (h.finished ? finished : next).push_back(std::move(h));
    }
    live = std::move(next);
  }
  if (finished.empty()) finished = std::move(live);

  const bool norm = config.length_normalization;
  std::stable_sort(finished.begin(), finished.end(),
                   [norm](const Hypothesis& a, const Hypothesis& b) {
                     const double sa = norm ? a.normalized_score() : a.score;
                     const double sb = norm ? b.normalized_score() : b.score;
                     if (sa != sb) return sa > sb;
                     if (a.score != b.score) return a.score > b.score;
                     return a.tokens < b.tokens;
                   });
  for (auto& h : finished) {
    h.am_state.reset();
    h.lm_state.reset();
  }
  return {std::move(finished)};
}

std::vector<int> greedy_decode(const StepScorer& am, std::size_t max_length) {
  auto state = am.start();
  std::vector<int> out;
  int prev = kEosId;
  for (std::size_t step = 0; step < max_length; ++step) {
    const std::vector<double> lp = am.score(*state, prev);
    int best = -1;
    for (std::size_t c = 0; c < lp.size(); ++c) {
      if (static_cast<int>(c) == kPadId || lp[c] == kNegInf) continue;
      if (best < 0 || lp[c] > lp[best]) best = static_cast<int>(c);
    }
    if (best < 0) break;
    out.push_back(best);
    if (best == kEosId) break;
    prev = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Toy LM.

void LmConfig::validate() const {
  if (vocab < kReservedTokens + 1) throw ConfigError("lm: vocab too small");
  if (embedding_dim == 0 || hidden == 0 || layers == 0)
    throw ConfigError("lm: zero dimension");
  if (batch_size == 0) throw ConfigError("lm: batch_size >= 1");
  if (!(lr > 0.0)) throw ConfigError("lm: lr must be > 0");
}

namespace {

struct LmState final : DecoderState {
  std::vector<LstmState> cells;
  std::unique_ptr<DecoderState> clone() const override {
    return std::make_unique<LmState>(*this);
  }
};

}  // namespace

ToyLm::ToyLm(const LmConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  embedding_ = params_.add("lm.embedding",
                           uniform_init({config_.vocab, config_.embedding_dim}, 1.0, rng));
  std::size_t in = config_.embedding_dim;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    cells_.push_back(
        make_lstm(params_, "lm." + std::to_string(l) + ".lstm", in, config_.hidden, rng));
    in = config_.hidden;
  }
  output_ = make_linear(params_, "lm.output", config_.hidden, config_.vocab, rng);
}

Tensor ToyLm::log_probs(std::span<const int> inputs) const {
  if (inputs.empty()) throw ValueError("lm: empty input");
  for (int t : inputs)
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab)
      throw ValueError("lm: token " + std::to_string(t) + " outside vocabulary");
  Tensor h = embedding_lookup(embedding_, inputs);
  for (const auto& cell : cells_) h = lstm_sequence(h, cell, false);
  return log_softmax(apply(output_, h));
}

std::unique_ptr<DecoderState> ToyLm::start() const {
  auto s = std::make_unique<LmState>();
  for (const auto& cell : cells_) s->cells.push_back(lstm_zero_state(cell));
  return s;
}

Tensor ToyLm::step(DecoderState& base, int prev) const {
  auto* s = dynamic_cast<LmState*>(&base);
  if (!s || s->cells.size() != cells_.size()) throw ValueError("lm: foreign state");
  if (prev < 0 || static_cast<std::size_t>(prev) >= config_.vocab)
    throw ValueError("lm: token " + std::to_string(prev) + " outside vocabulary");
  const int token[1] = {prev};
  Tensor h = embedding_lookup(embedding_, token);
  for (std::size_t l = 0; l < cells_.size(); ++l) {
    s->cells[l] = lstm_cell(h, s->cells[l], cells_[l]);
    h = s->cells[l].h;
  }
  return log_softmax(apply(output_, h));
}

void ToyLm::save(const std::filesystem::path& path) const {
  NamedTensors t = snapshot(params_);
  t.emplace_back("lm.config",
                 Tensor({4}, {static_cast<double>(config_.vocab),
                              static_cast<double>(config_.embedding_dim),
                              static_cast<double>(config_.hidden),
                              static_cast<double>(config_.layers)}));
  write_tensor_file(path, t);
}

ToyLm ToyLm::load(const std::filesystem::path& path) {
  NamedTensors t = read_tensor_file(path);
  auto it = std::find_if(t.begin(), t.end(),
                         [](const auto& e) { return e.first == "lm.config"; });
  if (it == t.end() || it->second.numel() != 4)
    throw FormatError("'" + path.string() + "' is not an LM file");
  LmConfig c;
  c.vocab = static_cast<std::size_t>(it->second.at(0));
  c.embedding_dim = static_cast<std::size_t>(it->second.at(1));
  c.hidden = static_cast<std::size_t>(it->second.at(2));
  c.layers = static_cast<std::size_t>(it->second.at(3));
  t.erase(it);
  ToyLm lm(c, 0);
  assign_parameters(lm.params_, t);
  return lm;
}

std::vector<double> LmScorer::score(DecoderState& state, int prev) const {
  NoGradGuard guard;
  return row_values(lm_.step(state, prev));
}

namespace {

std::vector<int> with_eos(const std::vector<int>& seq) {
  std::vector<int> t = seq;
  t.push_back(kEosId);
  return t;
}

}  // namespace

double perplexity(const ToyLm& lm, const std::vector<std::vector<int>>& sequences) {
  NoGradGuard guard;
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& seq : sequences) {
    const auto targets = with_eos(seq);
    const auto inputs = shift_right(targets);
    const Tensor lp = lm.log_probs(inputs);
    for (std::size_t l = 0; l < targets.size(); ++l)
      nll -= lp.at(l, static_cast<std::size_t>(targets[l]));
    count += targets.size();
  }
  if (count == 0) throw ValueError("perplexity: empty corpus");
  return std::exp(nll / static_cast<double>(count));
}

double unigram_perplexity(const std::vector<std::vector<int>>& train,
                          const std::vector<std::vector<int>>& held_out,
                          std::size_t vocab) {
  std::vector<double> counts(vocab, 1.0);
  counts[kPadId] = 0.0;
  double total = static_cast<double>(vocab - 1);
  for (const auto& seq : train)
    for (int t : with_eos(seq)) {
      counts.at(static_cast<std::size_t>(t)) += 1.0;
      total += 1.0;
    }
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& seq : held_out)
    for (int t : with_eos(seq)) {
      nll -= std::log(counts.at(static_cast<std::size_t>(t)) / total);
      ++n;
    }
  if (n == 0) throw ValueError("perplexity: empty corpus");
  return std::exp(nll / static_cast<double>(n));
}

ToyLm train_toy_lm(const std::vector<std::vector<int>>& sequences,
                   const LmConfig& config,
                   const std::vector<std::vector<int>>& held_out,
                   LmTrainReport* report) {
  config.validate();
  if (sequences.size() < config.batch_size)
    throw ValueError("lm: corpus of " + std::to_string(sequences.size()) +
                     " sequences is smaller than one batch of " +
                     std::to_string(config.batch_size));
  ToyLm lm(config, config.seed);
  AdamState adam;
  adam.init(lm.parameters());
  const AdamConfig adam_config;
  std::vector<std::size_t> order(sequences.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = Rng::derive(config.seed, 1, epoch);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t b = 0; b + config.batch_size <= order.size();
         b += config.batch_size) {
      lm.parameters().zero_grad();
      std::size_t tokens = 0;
      for (std::size_t k = b; k < b + config.batch_size; ++k)
        tokens += sequences[order[k]].size() + 1;
      for (std::size_t k = b; k < b + config.batch_size; ++k) {
        const auto targets = with_eos(sequences[order[k]]);
        const auto inputs = shift_right(targets);
        Tensor loss = smoothed_cross_entropy_sum(lm.log_probs(inputs), targets, 0.0);
        epoch_loss += loss.item();
        scale(loss, 1.0 / static_cast<double>(tokens)).backward();
      }
      epoch_tokens += tokens;
      clip_grad_norm(lm.parameters(), config.grad_clip);
      adam_step(lm.parameters(), adam, config.lr, adam_config);
    }
    if (report) {
      report->train_loss.push_back(epoch_loss / static_cast<double>(epoch_tokens));
      if (!held_out.empty())
        report->held_out_perplexity.push_back(perplexity(lm, held_out));
    }
  }
  return lm;
}

}  // namespace raed
