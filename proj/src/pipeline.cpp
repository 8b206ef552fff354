// SPDX-License-Identifier: Apache-2.0

#include "raed/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>
#include <thread>

#include "raed/checkpoint.hpp"
#include "raed/error.hpp"

namespace raed {

namespace {

void write_text(const fs::path& path, const std::string& s) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()),
                                   s.size()));
}

std::vector<int> strip_eos(std::vector<int> tokens) {
  if (!tokens.empty() && tokens.back() == kEosId) tokens.pop_back();
  return tokens;
}

}  // namespace

GenDataSummary run_gen_data(const ToyTaskSpec& spec, const fs::path& out_dir) {
  const GeneratedData data = generate_dataset(spec);
  write_dataset(out_dir, data, spec);
  ExperimentConfig c;
  c.data = spec;
  c.model.transformer.vocab = c.model.las.vocab = spec.vocab();
  c.model.transformer.frontend.input_dim = c.model.las.frontend.input_dim =
      spec.feature_dim;
  write_config(out_dir / "data.ini", c);
  GenDataSummary s;
  s.nearest_prototype_accuracy = data.nearest_prototype_accuracy;
  for (const auto& split : data.splits) s.utterances += split.utterances.size();
  nlohmann::ordered_json j;
  j["nearest_prototype_accuracy"] = s.nearest_prototype_accuracy;
  for (const auto& split : data.splits) j["splits"][split.name] = split.utterances.size();
  j["vocab"] = spec.vocab();
  write_text(out_dir / "generation.json", j.dump(2) + "\n");
  return s;
}

LmTrainReport run_lm_train(const LmTrainRequest& request) {
  const Manifest m = read_manifest(request.manifest);
  LmConfig config = request.config;
  config.vocab = m.vocab;
  std::vector<std::vector<int>> train;
  for (const auto& r : m.records) train.push_back(r.tokens);
  std::vector<std::vector<int>> held_out;
  if (request.held_out)
    for (const auto& r : read_manifest(*request.held_out).records)
      held_out.push_back(r.tokens);
  LmTrainReport report;
  const ToyLm lm = train_toy_lm(train, config, held_out, &report);
  lm.save(request.out);
  std::string lines;
  for (std::size_t e = 0; e < report.train_loss.size(); ++e) {
    nlohmann::ordered_json j;
    j["epoch"] = e + 1;
    j["train_loss"] = report.train_loss[e];
    if (e < report.held_out_perplexity.size())
      j["held_out_perplexity"] = report.held_out_perplexity[e];
    lines += j.dump() + "\n";
  }
  if (!held_out.empty()) {
    nlohmann::ordered_json j;
    j["unigram_perplexity"] = unigram_perplexity(train, held_out, m.vocab);
    j["uniform_perplexity"] = static_cast<double>(m.vocab);
    lines += j.dump() + "\n";
  }
  write_text(fs::path(request.out.string() + ".metrics.jsonl"), lines);
  return report;
}

TrainResult run_train(const TrainRequest& request) {
  ExperimentConfig config = request.config;
  const auto train_set = load_examples(request.data_dir / "train.jsonl");
  const auto dev_set = load_examples(request.data_dir / "dev.jsonl");
  const Manifest m = read_manifest(request.data_dir / "dev.jsonl");
  if (m.vocab != config.model.vocab())
    throw ConfigError("train: corpus vocabulary " + std::to_string(m.vocab) +
                      " differs from model vocabulary " +
                      std::to_string(config.model.vocab()));
  if (m.feature_dim != config.model.transformer.frontend.input_dim)
    throw ConfigError("train: corpus features have width " +
                      std::to_string(m.feature_dim) + ", model expects " +
                      std::to_string(config.model.transformer.frontend.input_dim));
  config.validate();
  fs::create_directories(request.out_dir);
  write_config(request.out_dir / "config.ini", config);

  auto model = make_model(config.model, config.train.seed);
  TrainOptions options;
  options.out_dir = request.out_dir;
  options.resume = request.resume;
  options.log_progress = request.log_progress;
  std::optional<ToyLm> lm;
  if (request.selection_lm) {
    lm.emplace(ToyLm::load(*request.selection_lm));
    options.selection_lm = &*lm;
    options.selection_fusion = config.decode;
    options.words = read_vocabulary(request.data_dir / "vocab.txt");
  }
  if (options.log_progress)
    spdlog::info("training {} with {} parameters on {} utterances",
                 architecture_name(config.model.architecture),
                 model->parameters().scalar_count(), train_set.size());
  return train(*model, train_set, dev_set, config.train, options);
}

std::vector<DecodedUtterance> run_decode(const DecodeRequest& request) {
  const fs::path config_path =
      request.config.value_or(request.checkpoint.parent_path() / "config.ini");
  const ExperimentConfig config = read_config(config_path);
  FusionConfig fusion = request.fusion;
  fusion.validate();
  auto model = make_model(config.model, 0);
  assign_parameters(model->parameters(), read_tensor_file(request.checkpoint));
  const auto set = load_examples(request.manifest);
  const auto words =
      read_vocabulary(request.vocab.value_or(request.manifest.parent_path() / "vocab.txt"));
  if (words.size() != model->vocab_size())
    throw ConfigError("decode: vocabulary file has " + std::to_string(words.size()) +
                      " entries, model expects " + std::to_string(model->vocab_size()));
  std::optional<ToyLm> lm;
  if (request.use_lm && request.lm) lm.emplace(ToyLm::load(*request.lm));

  std::vector<DecodedUtterance> out(set.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    std::optional<LmScorer> lm_scorer;
    if (lm) lm_scorer.emplace(*lm);
    for (std::size_t i = next++; i < set.size(); i = next++) {
      try {
        NoGradGuard guard;
        const Encoded enc = model->encode(set[i].features, {});
        const std::size_t frames = static_cast<std::size_t>(
            std::count(enc.validity.begin(), enc.validity.end(), std::uint8_t{1}));
        if (frames == 0) throw ValueError("decode: empty encoder output");
        ModelScorer am(*model, enc);
        BeamResult r = beam_search(am, lm_scorer ? &*lm_scorer : nullptr, fusion,
                                   output_length_cap(fusion, frames));
        r.ranked.resize(std::min(r.ranked.size(), fusion.nbest));
        out[i] = {set[i].id, std::move(r.ranked)};
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = set.size();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, request.threads);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::string jsonl;
  std::vector<std::string> ids;
  std::vector<std::vector<int>> best;
  for (const auto& u : out) {
    auto record = [&](const Hypothesis& h) {
      nlohmann::ordered_json j;
      j["tokens"] = strip_eos(h.tokens);
      j["text"] = render_transcript(h.tokens, words);
      j["score"] = h.score;
      j["am_score"] = h.am_score;
      j["lm_score"] = h.lm_score;
      j["normalized_score"] = h.normalized_score();
      j["finished"] = h.finished;
      return j;
    };
    nlohmann::ordered_json j;
    j["id"] = u.id;
    const nlohmann::ordered_json top = record(u.nbest.front());
    for (const auto& [k, v] : top.items()) j[k] = v;
    if (fusion.nbest > 1)
      for (const auto& h : u.nbest) j["nbest"].push_back(record(h));
    jsonl += j.dump() + "\n";
    ids.push_back(u.id);
    best.push_back(strip_eos(u.nbest.front().tokens));
  }
  write_text(fs::path(request.out_prefix.string() + ".jsonl"), jsonl);
  write_transcripts(fs::path(request.out_prefix.string() + ".txt"), ids, best, words);
  if (request.attention_dump)
    write_tensor_file(*request.attention_dump, attention_dump(*model, set, best));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::pair<std::string, std::string>> read_transcripts(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string id;
    ls >> id;
    std::string rest;
    std::getline(ls, rest);
    out.emplace_back(id, rest);
  }
  return out;
}

}  // namespace

ScoreReport score_transcripts(const fs::path& ref, const fs::path& hyp) {
  const auto refs = read_transcripts(ref);
  std::map<std::string, std::string> hyps;
  for (auto& [id, text] : read_transcripts(hyp)) {
    if (!hyps.emplace(id, text).second)
      throw FormatError(hyp.string() + ": duplicate utterance id '" + id + "'");
  }
  ScoreReport r;
  for (const auto& [id, text] : refs) {
    auto it = hyps.find(id);
    if (it == hyps.end())
      throw FormatError(hyp.string() + ": no hypothesis for utterance '" + id + "'");
    ScoredUtterance u{id, word_counts(text, it->second), char_counts(text, it->second)};
    r.words += u.words;
    r.chars += u.chars;
    r.utterances.push_back(u);
    hyps.erase(it);
  }
  if (!hyps.empty())
    throw FormatError(hyp.string() + ": hypothesis '" + hyps.begin()->first +
                      "' has no reference");
  if (r.words.n == 0) throw ValueError("score: references contain no words");
  return r;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width, bool left = false) {
  if (s.size() >= width) return s;
  return left ? s + std::string(width - s.size(), ' ')
              : std::string(width - s.size(), ' ') + s;
}

std::string counts_row(const std::string& id, const EditCounts& c, std::size_t id_w) {
  return pad(id, id_w, true) + pad(std::to_string(c.n), 7) +
         pad(std::to_string(c.substitutions), 6) + pad(std::to_string(c.deletions), 6) +
         pad(std::to_string(c.insertions), 6) +
         pad(c.n ? fixed(100.0 * error_rate(c), 2) : "-", 9) + "\n";
}

nlohmann::ordered_json counts_json(const EditCounts& c) {
  nlohmann::ordered_json j;
  j["n"] = c.n;
  j["substitutions"] = c.substitutions;
  j["deletions"] = c.deletions;
  j["insertions"] = c.insertions;
  if (c.n) j["rate"] = error_rate(c);
  return j;
}

}  // namespace

std::string format_score_table(const ScoreReport& r) {
  std::size_t w = 8;
  for (const auto& u : r.utterances) w = std::max(w, u.id.size() + 2);
  std::string out;
  for (const auto& [label, pick] :
       {std::pair<const char*, bool>{"words", true}, {"characters", false}}) {
    out += std::string("# ") + label + "\n";
    out += pad("id", w, true) + pad("N", 7) + pad("S", 6) + pad("D", 6) + pad("I", 6) +
           pad(pick ? "WER%" : "CER%", 9) + "\n";
    for (const auto& u : r.utterances) out += counts_row(u.id, pick ? u.words : u.chars, w);
    out += counts_row("TOTAL", pick ? r.words : r.chars, w) + "\n";
  }
  return out;
}

std::string score_json(const ScoreReport& r) {
  nlohmann::ordered_json j;
  j["wer"] = r.wer();
  j["cer"] = r.chars.n ? nlohmann::json(r.cer()) : nlohmann::json(nullptr);
  j["words"] = counts_json(r.words);
  j["chars"] = counts_json(r.chars);
  for (const auto& u : r.utterances) {
    nlohmann::ordered_json e;
    e["id"] = u.id;
    e["words"] = counts_json(u.words);
    e["chars"] = counts_json(u.chars);
    j["utterances"].push_back(e);
  }
  return j.dump(2) + "\n";
}

std::string format_entropy_table(const EntropyReport& r) {
  std::string out = "# mean attention entropy (nats)\n";
  out += pad("layer", 7) + pad("head", 6) + pad("baseline", 11) + pad("relaxed", 11) + "\n";
  for (const auto& [key, base] : r.baseline.per_head) {
    out += pad(std::to_string(key.first), 7) + pad(std::to_string(key.second), 6) +
           pad(fixed(base, 4), 11) + pad(fixed(r.relaxed.per_head.at(key), 4), 11) + "\n";
  }
  out += pad("all", 13) + pad(fixed(r.baseline.mean, 4), 11) +
         pad(fixed(r.relaxed.mean, 4), 11) + "\n";
  out += "rows " + std::to_string(r.baseline.rows) + ", utterances " +
         std::to_string(r.baseline.per_utterance.size()) + ", relaxed vs baseline " +
         (r.ratio >= 0 ? "+" : "") + fixed(100.0 * r.ratio, 2) + "%\n";
  return out;
}

std::string entropy_json(const EntropyReport& r) {
  auto stats = [](const EntropyStats& s) {
    nlohmann::ordered_json j;
    j["mean"] = s.mean;
    j["rows"] = s.rows;
    for (const auto& [key, v] : s.per_head) {
      nlohmann::ordered_json h;
      h["layer"] = key.first;
      h["head"] = key.second;
      h["mean"] = v;
      j["per_head"].push_back(h);
    }
    for (const auto& [id, v] : s.per_utterance) j["per_utterance"][id] = v;
    return j;
  };
  nlohmann::ordered_json j;
  j["ratio"] = r.ratio;
  j["baseline"] = stats(r.baseline);
  j["relaxed"] = stats(r.relaxed);
  return j.dump(2) + "\n";
}

}  // namespace raed
