// SPDX-License-Identifier: Apache-2.0

#include "raed/train.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <limits>
#include <sstream>

#include "raed/checkpoint.hpp"
#include "raed/error.hpp"
#include "raed/eval.hpp"

namespace raed {

namespace fs = std::filesystem;

Tensor spec_augment(const Tensor& x, std::size_t time_masks, std::size_t time_width,
                    std::size_t freq_masks, std::size_t freq_width, Rng& rng,
                    std::vector<MaskStripe>* stripes) {
  if (x.rank() != 2) throw ShapeError("spec_augment: expects [frames x F]");
  const std::size_t t = x.dim(0), f = x.dim(1);
  if (time_masks > 0 && time_width >= t)
    throw ValueError("spec_augment: time width " + std::to_string(time_width) +
                     " reaches the " + std::to_string(t) + "-frame axis");
  if (freq_masks > 0 && freq_width >= f)
    throw ValueError("spec_augment: frequency width " + std::to_string(freq_width) +
                     " reaches the " + std::to_string(f) + "-bin axis");
  if (stripes) stripes->clear();
  if (time_masks == 0 && freq_masks == 0) return x;
  std::vector<double> v(x.data().begin(), x.data().end());
  for (std::size_t m = 0; m < time_masks; ++m) {
    const std::size_t w = rng.below(time_width + 1);
    const std::size_t start = rng.below(t - w + 1);
    for (std::size_t r = start; r < start + w; ++r)
      std::fill(v.begin() + r * f, v.begin() + (r + 1) * f, 0.0);
    if (stripes) stripes->push_back({true, start, w});
  }
  for (std::size_t m = 0; m < freq_masks; ++m) {
    const std::size_t w = rng.below(freq_width + 1);
    const std::size_t start = rng.below(f - w + 1);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = start; c < start + w; ++c) v[r * f + c] = 0.0;
    if (stripes) stripes->push_back({false, start, w});
  }
  return Tensor(x.shape(), std::move(v));
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs >= 1");
  if (batch_size == 0) throw ConfigError("train: batch_size >= 1");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw ConfigError("train: label_smoothing must lie in [0, 1)");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 &&
        adam.beta2 < 1.0 && adam.eps > 0.0))
    throw ConfigError("train: Adam betas must lie in [0, 1) and eps > 0");
  TriStageSchedule s = schedule;
  s.total_steps = 1;
  s.validate();
}

std::string metrics_json(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["step"] = m.step;
  j["lr"] = m.lr;
  j["train_loss"] = m.train_loss;
  j["val_loss"] = m.val_loss;
  j["val_ter"] = m.val_ter;
  if (m.val_wer_lm) j["val_wer_lm"] = *m.val_wer_lm;
  j["mean_attn_entropy"] = m.mean_attn_entropy;
  j["val_attn_entropy"] = m.val_attn_entropy;
  j["gamma"] = m.gamma;
  j["gamma_min"] = m.gamma_min;
  j["gamma_max"] = m.gamma_max;
  j["best"] = m.best;
  return j.dump();
}

namespace {

std::vector<int> with_eos(const std::vector<int>& tokens) {
  std::vector<int> t = tokens;
  t.push_back(kEosId);
  return t;
}

std::size_t valid_frames(const Encoded& enc) {
  return static_cast<std::size_t>(
      std::count(enc.validity.begin(), enc.validity.end(), std::uint8_t{1}));
}

std::vector<Example> validation_subset(const std::vector<Example>& dev,
                                       std::size_t cap) {
  if (cap == 0 || cap >= dev.size()) return dev;
  return std::vector<Example>(dev.begin(), dev.begin() + static_cast<long>(cap));
}

// Pooled entropy over every captured row.
std::pair<double, std::size_t> capture_entropy(const AttentionCapture& cap) {
  double sum = 0.0;
  std::size_t rows = 0;
  for (const auto& [key, m] : cap.matrices()) {
    const RowEntropy e = attention_entropy(m);
    for (double h : e.rows) sum += h;
    rows += e.rows.size();
  }
  return {sum, rows};
}

void write_text(const fs::path& path, const std::string& s) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()),
                                   s.size()));
}

void dump_nonfinite(const fs::path& dir, std::size_t step, double loss,
                    const std::vector<const Example*>& batch, const std::string& what) {
  if (dir.empty()) return;
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json(std::to_string(loss));
  j["error"] = what;
  for (const Example* e : batch) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0;
    std::size_t bad = 0;
    for (double v : e->features.data()) {
      if (!std::isfinite(v)) {
        ++bad;
        continue;
      }
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      sum += v;
    }
    nlohmann::ordered_json u;
    u["id"] = e->id;
    u["frames"] = e->features.dim(0);
    u["tokens"] = e->tokens;
    u["non_finite_values"] = bad;
    u["min"] = lo;
    u["max"] = hi;
    u["mean"] = sum / static_cast<double>(std::max<std::size_t>(1, e->features.numel() - bad));
    j["batch"].push_back(u);
  }
  write_text(dir / ("nonfinite-step" + std::to_string(step) + ".json"), j.dump(2) + "\n");
}

struct LoopState {
  std::size_t epoch = 0;  // completed epochs
  std::size_t best_epoch = 0;
  double best_metric = std::numeric_limits<double>::infinity();
  std::vector<double> gamma_min, gamma_max;
};

NamedTensors state_tensors(const ParameterTable& params, const AdamState& adam,
                           const LoopState& s) {
  NamedTensors t = adam.to_tensors(params);
  t.emplace_back("train.epoch", Tensor({1}, {static_cast<double>(s.epoch)}));
  t.emplace_back("train.best_epoch", Tensor({1}, {static_cast<double>(s.best_epoch)}));
  t.emplace_back("train.best_metric", Tensor({1}, {s.best_metric}));
  t.emplace_back("train.gamma_min", Tensor({s.gamma_min.size()}, s.gamma_min));
  t.emplace_back("train.gamma_max", Tensor({s.gamma_max.size()}, s.gamma_max));
  return t;
}

LoopState load_state(const fs::path& path, const ParameterTable& params,
                     AdamState& adam) {
  NamedTensors t = read_tensor_file(path);
  adam.from_tensors(params, t);
  LoopState s;
  auto get = [&](const std::string& name) -> const Tensor& {
    for (const auto& [n, v] : t)
      if (n == name) return v;
    throw FormatError("training state lacks '" + name + "'");
  };
  s.epoch = static_cast<std::size_t>(get("train.epoch").item());
  s.best_epoch = static_cast<std::size_t>(get("train.best_epoch").item());
  s.best_metric = get("train.best_metric").item();
  const Tensor& lo = get("train.gamma_min");
  const Tensor& hi = get("train.gamma_max");
  s.gamma_min.assign(lo.data().begin(), lo.data().end());
  s.gamma_max.assign(hi.data().begin(), hi.data().end());
  return s;
}

// Keeps the first `epochs` records of an existing metrics log.
std::vector<EpochMetrics> truncate_metrics(const fs::path& path, std::size_t epochs) {
  std::vector<EpochMetrics> kept;
  std::ifstream in(path);
  std::string line, out;
  while (kept.size() < epochs && std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EpochMetrics m;
    m.epoch = j.at("epoch");
    m.step = j.at("step");
    m.lr = j.at("lr");
    m.train_loss = j.at("train_loss");
    m.val_loss = j.at("val_loss");
    m.val_ter = j.at("val_ter");
    if (j.contains("val_wer_lm")) m.val_wer_lm = j.at("val_wer_lm").get<double>();
    m.mean_attn_entropy = j.at("mean_attn_entropy");
    m.val_attn_entropy = j.at("val_attn_entropy");
    m.gamma = j.at("gamma").get<std::vector<double>>();
    m.gamma_min = j.at("gamma_min").get<std::vector<double>>();
    m.gamma_max = j.at("gamma_max").get<std::vector<double>>();
    m.best = j.at("best");
    kept.push_back(m);
    out += line + '\n';
  }
  if (kept.size() != epochs)
    throw FormatError("metrics log '" + path.string() + "' is shorter than the saved state");
  write_text(path, out);
  return kept;
}

double lm_word_error_rate(const Seq2SeqModel& model, const std::vector<Example>& set,
                          const ToyLm& lm, const FusionConfig& fusion,
                          const std::vector<std::string>& words) {
  if (words.empty()) throw ConfigError("train: LM selection needs the vocabulary");
  EditCounts total;
  LmScorer lm_scorer(lm);
  for (const auto& e : set) {
    NoGradGuard guard;
    const Encoded enc = model.encode(e.features, {});
    ModelScorer am(model, enc);
    const BeamResult r =
        beam_search(am, &lm_scorer, fusion, output_length_cap(fusion, valid_frames(enc)));
    total += word_counts(render_transcript(e.tokens, words),
                         render_transcript(r.ranked.front().tokens, words));
  }
  return error_rate(total);
}

}  // namespace

double validation_loss(const Seq2SeqModel& model, const std::vector<Example>& set) {
  NoGradGuard guard;
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& e : set) {
    const auto targets = with_eos(e.tokens);
    const Encoded enc = model.encode(e.features, {});
    const Tensor lp = model.decode_all(enc, shift_right(targets), {});
    nll += smoothed_cross_entropy_sum(lp, targets, 0.0).item();
    tokens += targets.size();
  }
  return tokens ? nll / static_cast<double>(tokens) : 0.0;
}

double greedy_token_error_rate(const Seq2SeqModel& model,
                               const std::vector<Example>& set,
                               const FusionConfig& limits) {
  EditCounts total;
  for (const auto& e : set) {
    NoGradGuard guard;
    const Encoded enc = model.encode(e.features, {});
    ModelScorer am(model, enc);
    std::vector<int> hyp = greedy_decode(am, output_length_cap(limits, valid_frames(enc)));
    if (!hyp.empty() && hyp.back() == kEosId) hyp.pop_back();
    total += edit_distance_counts(e.tokens, hyp);
  }
  return total.n ? error_rate(total) : 0.0;
}

NamedTensors attention_dump(const Seq2SeqModel& model, const std::vector<Example>& set,
                            const std::vector<std::vector<int>>& tokens) {
  if (tokens.size() != set.size())
    throw ValueError("attention_dump: one token sequence per utterance");
  NamedTensors out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    NoGradGuard guard;
    AttentionCapture cap;
    ForwardOptions o;
    o.capture = &cap;
    std::vector<int> targets = tokens[i];
    if (targets.empty() || targets.back() != kEosId) targets.push_back(kEosId);
    const Encoded enc = model.encode(set[i].features, o);
    model.decode_all(enc, shift_right(targets), o);
    for (auto& entry : capture_to_dump(cap, set[i].id)) out.push_back(std::move(entry));
  }
  return out;
}

TrainResult train(Seq2SeqModel& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& dev_set, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  if (train_set.empty()) throw ValueError("train: empty training set");
  if (dev_set.empty()) throw ValueError("train: empty validation set");
  if (config.selection == Selection::kLmWordErrorRate && !options.selection_lm)
    throw ConfigError("train: LM-based selection needs an LM");
  for (const auto& e : train_set) {
    if (e.tokens.empty()) throw ValueError("train: utterance '" + e.id + "' has no tokens");
  }

  const std::size_t steps_per_epoch =
      (train_set.size() + config.batch_size - 1) / config.batch_size;
  TriStageSchedule schedule = config.schedule;
  schedule.total_steps = steps_per_epoch * config.epochs;
  schedule.validate();

  ParameterTable& params = model.parameters();
  const fs::path& dir = options.out_dir;
  if (!dir.empty()) fs::create_directories(dir);
  const fs::path metrics_path = dir / "metrics.jsonl";
  const fs::path state_path = dir / "train_state.raed";

  AdamState adam;
  adam.init(params);
  LoopState loop;
  TrainResult result;
  const std::size_t layers = model.attention_layers();
  loop.gamma_min = loop.gamma_max = model.relaxation_gammas();
  if (options.resume && !dir.empty() && fs::exists(state_path)) {
    assign_parameters(params, read_tensor_file(dir / "last.raed"));
    loop = load_state(state_path, params, adam);
    result.epochs = truncate_metrics(metrics_path, loop.epoch);
    if (options.log_progress)
      spdlog::info("resuming after epoch {} (step {})", loop.epoch, adam.step);
  } else if (!dir.empty()) {
    write_text(metrics_path, "");
  }
  if (loop.gamma_min.size() != layers) throw FormatError("train: gamma history mismatch");

  const std::vector<Example> val_set = validation_subset(dev_set, config.max_validation);
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = loop.epoch + 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle = Rng::derive(config.seed, 1, epoch);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0.0, entropy_sum = 0.0;
    std::size_t loss_tokens = 0, entropy_rows = 0;
    double lr = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t step = adam.step;
      const std::size_t first = b * config.batch_size;
      const std::size_t last = std::min(order.size(), first + config.batch_size);
      std::vector<const Example*> batch;
      std::size_t batch_tokens = 0;
      for (std::size_t k = first; k < last; ++k) {
        batch.push_back(&train_set[order[k]]);
        batch_tokens += train_set[order[k]].tokens.size() + 1;
      }
      params.zero_grad();
      for (std::size_t k = 0; k < batch.size(); ++k) {
        const Example& e = *batch[k];
        Rng rng = Rng::derive(config.seed, 2 + step, k);
        double loss_value = std::numeric_limits<double>::quiet_NaN();
        try {
          Tensor x = e.features;
          const SpecAugmentConfig& sa = config.spec_augment;
          if (sa.enabled) {
            const std::size_t t = x.dim(0), f = x.dim(1);
            x = spec_augment(x, sa.time_masks, std::min(sa.time_width, t - 1),
                             sa.freq_masks, std::min(sa.freq_width, f - 1), rng);
          }
          AttentionCapture cap;
          ForwardOptions o;
          o.training = true;
          o.rng = &rng;
          o.capture = &cap;
          const auto targets = with_eos(e.tokens);
          const Encoded enc = model.encode(x, o);
          const Tensor lp = model.decode_all(enc, shift_right(targets), o);
          Tensor loss = smoothed_cross_entropy_sum(lp, targets, config.label_smoothing);
          loss_value = loss.item();
          if (!std::isfinite(loss_value))
            throw NumericError("non-finite training loss " + std::to_string(loss_value));
          scale(loss, 1.0 / static_cast<double>(batch_tokens)).backward();
          const auto [h, rows] = capture_entropy(cap);
          entropy_sum += h;
          entropy_rows += rows;
        } catch (const NumericError& err) {
          dump_nonfinite(dir, step, loss_value, batch, err.what());
          throw NumericError(std::string(err.what()) + " at step " + std::to_string(step) +
                             " (utterance '" + e.id + "')");
        }
        loss_sum += loss_value;
      }
      loss_tokens += batch_tokens;
      clip_grad_norm(params, config.grad_clip);
      lr = tri_stage_lr(step, schedule);
      adam_step(params, adam, lr, config.adam);
      const std::vector<double> g = model.relaxation_gammas();
      for (std::size_t l = 0; l < layers; ++l) {
        loop.gamma_min[l] = std::min(loop.gamma_min[l], g[l]);
        loop.gamma_max[l] = std::max(loop.gamma_max[l], g[l]);
      }
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.step = adam.step;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(loss_tokens);
    m.val_loss = validation_loss(model, val_set);
    m.val_ter = greedy_token_error_rate(model, val_set);
    if (options.selection_lm && config.selection == Selection::kLmWordErrorRate)
      m.val_wer_lm = lm_word_error_rate(model, val_set, *options.selection_lm,
                                        options.selection_fusion, options.words);
    m.mean_attn_entropy = entropy_rows ? entropy_sum / static_cast<double>(entropy_rows) : 0.0;
    {
      std::vector<std::vector<int>> refs;
      for (const auto& e : val_set) refs.push_back(e.tokens);
      m.val_attn_entropy = entropy_stats(attention_dump(model, val_set, refs)).mean;
    }
    m.gamma = model.relaxation_gammas();
    m.gamma_min = loop.gamma_min;
    m.gamma_max = loop.gamma_max;
    const double metric = m.val_wer_lm.value_or(m.val_ter);
    m.best = metric < loop.best_metric;
    loop.epoch = epoch;
    if (m.best) {
      loop.best_metric = metric;
      loop.best_epoch = epoch;
    }
    result.epochs.push_back(m);

    if (!dir.empty()) {
      const NamedTensors snap = snapshot(params);
      write_tensor_file(dir / "last.raed", snap);
      if (config.keep_epoch_checkpoints) {
        std::ostringstream name;
        name << "checkpoint-epoch" << std::setw(3) << std::setfill('0') << epoch << ".raed";
        write_tensor_file(dir / name.str(), snap);
      }
      if (m.best) write_tensor_file(dir / "best.raed", snap);
      std::ofstream(metrics_path, std::ios::app) << metrics_json(m) << '\n';
      write_tensor_file(state_path, state_tensors(params, adam, loop));
    }
    if (options.log_progress) {
      spdlog::info("epoch {}/{} step {} lr {:.3g} train_loss {:.4f} val_loss {:.4f} "
                   "val_ter {:.4f} attn_entropy {:.4f}",
                   epoch, config.epochs, m.step, m.lr, m.train_loss, m.val_loss,
                   m.val_ter, m.mean_attn_entropy);
    }
    if (options.stop_after != 0 && epoch >= options.stop_after) break;
  }
  result.best_epoch = loop.best_epoch;
  result.best_metric = loop.best_metric;
  result.steps = adam.step;
  return result;
}

}  // namespace raed
