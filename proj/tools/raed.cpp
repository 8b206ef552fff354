// SPDX-License-Identifier: Apache-2.0
//
// raed: corpus generation, LM and model training, decoding, scoring and
// attention analysis. Failures print one line
//   raed: error[<category>]: <detail>
// and exit nonzero. RAED_LOG sets the stderr log level (default warn).

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "raed/checkpoint.hpp"
#include "raed/error.hpp"
#include "raed/pipeline.hpp"

namespace {

using namespace raed;

void write_out(const std::optional<fs::path>& path, const std::string& text) {
  if (path)
    write_file_bytes(*path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                                      text.size()));
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("raed");
  logger->set_pattern("[%l] %v");
  spdlog::level::level_enum level = spdlog::level::warn;
  if (const char* env = std::getenv("RAED_LOG")) {
    level = spdlog::level::from_str(env);
    if (level == spdlog::level::off && std::string(env) != "off")
      throw ConfigError("RAED_LOG: unknown level '" + std::string(env) + "'");
  }
  logger->set_level(level);
  spdlog::set_default_logger(logger);
}

struct GenDataArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
};

struct LmTrainArgs {
  std::string manifest, out;
  std::optional<std::string> config, held_out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
};

struct TrainArgs {
  std::string config, data, out;
  std::optional<double> gamma;
  bool learned = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  bool resume = false;
  std::optional<std::string> lm, select_by;
};

struct DecodeArgs {
  std::string checkpoint, manifest, out;
  std::optional<std::string> config, vocab, lm, dump;
  bool no_lm = false;
  std::optional<double> lm_weight;
  std::optional<std::size_t> beam, nbest;
  std::optional<std::string> eos_rule;
  std::size_t threads = 1;
};

struct ScoreArgs {
  std::string ref, hyp;
  std::optional<std::string> json;
};

struct AnalyzeArgs {
  std::string baseline, relaxed;
  std::optional<std::string> json;
};

int gen_data(const GenDataArgs& a) {
  ToyTaskSpec spec = read_config(a.spec).data;
  if (a.seed) spec.seed = *a.seed;
  const GenDataSummary s = run_gen_data(spec, a.out);
  std::printf("utterances %zu\nnearest_prototype_accuracy %.6f\n", s.utterances,
              s.nearest_prototype_accuracy);
  return 0;
}

int lm_train(const LmTrainArgs& a) {
  LmTrainRequest r;
  r.manifest = a.manifest;
  if (a.held_out) r.held_out = fs::path(*a.held_out);
  if (a.config) r.config = read_config(*a.config).lm;
  if (a.seed) r.config.seed = *a.seed;
  if (a.epochs) r.config.epochs = *a.epochs;
  r.out = a.out;
  const LmTrainReport report = run_lm_train(r);
  std::printf("train_loss %.6f\n", report.train_loss.back());
  if (!report.held_out_perplexity.empty())
    std::printf("held_out_perplexity %.6f\n", report.held_out_perplexity.back());
  return 0;
}

int train_cmd(const TrainArgs& a) {
  TrainRequest r;
  r.config = read_config(a.config);
  if (a.gamma || a.learned)
    set_relaxation(r.config.model, a.gamma.value_or(0.0), a.learned);
  if (a.seed) r.config.train.seed = *a.seed;
  if (a.epochs) r.config.train.epochs = *a.epochs;
  if (a.select_by) {
    if (*a.select_by == "ter") r.config.train.selection = Selection::kTokenErrorRate;
    else if (*a.select_by == "wer_lm") r.config.train.selection = Selection::kLmWordErrorRate;
    else throw ConfigError("--select-by: expected ter or wer_lm");
  }
  if (r.config.train.selection == Selection::kLmWordErrorRate && !a.lm)
    throw ConfigError("selection by LM word error rate needs --lm");
  if (a.lm) r.selection_lm = fs::path(*a.lm);
  r.data_dir = a.data;
  r.out_dir = a.out;
  r.resume = a.resume;
  r.log_progress = spdlog::should_log(spdlog::level::info);
  const TrainResult result = run_train(r);
  const EpochMetrics& best = result.epochs.at(result.best_epoch - 1);
  std::printf("best_epoch %zu\nbest_metric %.6f\nval_ter %.6f\n", result.best_epoch,
              result.best_metric, best.val_ter);
  const EpochMetrics& last = result.epochs.back();
  if (!last.gamma.empty()) {
    std::printf("gamma");
    for (double g : last.gamma) std::printf(" %.6f", g);
    std::printf("\n");
  }
  return 0;
}

int decode_cmd(const DecodeArgs& a) {
  DecodeRequest r;
  r.checkpoint = a.checkpoint;
  r.config = a.config ? std::optional<fs::path>(*a.config) : std::nullopt;
  r.manifest = a.manifest;
  if (a.vocab) r.vocab = fs::path(*a.vocab);
  if (a.lm) r.lm = fs::path(*a.lm);
  r.use_lm = !a.no_lm;
  r.fusion =
      read_config(r.config.value_or(r.checkpoint.parent_path() / "config.ini")).decode;
  if (a.lm_weight) r.fusion.lm_weight = *a.lm_weight;
  if (a.beam) r.fusion.beam = *a.beam;
  if (a.nbest) r.fusion.nbest = *a.nbest;
  if (a.eos_rule) {
    if (*a.eos_rule == "none") r.fusion.eos_rule = EosRule::kNone;
    else if (*a.eos_rule == "threshold") r.fusion.eos_rule = EosRule::kThreshold;
    else throw ConfigError("--eos-rule: expected none or threshold");
  }
  r.out_prefix = a.out;
  if (a.dump) r.attention_dump = fs::path(*a.dump);
  r.threads = a.threads;
  const auto out = run_decode(r);
  spdlog::info("decoded {} utterances", out.size());
  return 0;
}

int score_cmd(const ScoreArgs& a) {
  const ScoreReport report = score_transcripts(a.ref, a.hyp);
  std::fputs(format_score_table(report).c_str(), stdout);
  write_out(a.json ? std::optional<fs::path>(*a.json) : std::nullopt, score_json(report));
  return 0;
}

int analyze_cmd(const AnalyzeArgs& a) {
  const EntropyReport report =
      compare_entropy(read_tensor_file(a.baseline), read_tensor_file(a.relaxed));
  std::fputs(format_entropy_table(report).c_str(), stdout);
  write_out(a.json ? std::optional<fs::path>(*a.json) : std::nullopt,
            entropy_json(report));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relaxed-attention encoder-decoder toolkit", "raed"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  gen->add_option("spec", gd.spec, "Config file; its [data] section is used")
      ->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gd.out, "Output directory")->required();
  gen->add_option("--seed", gd.seed, "Override data.seed");

  LmTrainArgs lt;
  auto* lmt = app.add_subcommand("lm-train", "Train the toy LSTM language model");
  lmt->add_option("manifest", lt.manifest, "Training manifest")
      ->required()->check(CLI::ExistingFile);
  lmt->add_option("--config", lt.config, "Config file; its [lm] section is used")
      ->check(CLI::ExistingFile);
  lmt->add_option("--held-out", lt.held_out, "Manifest for perplexity")
      ->check(CLI::ExistingFile);
  lmt->add_option("--out", lt.out, "LM output file")->required();
  lmt->add_option("--seed", lt.seed, "Override lm.seed");
  lmt->add_option("--epochs", lt.epochs, "Override lm.epochs");

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "Train an encoder-decoder model");
  trn->add_option("config", tr.config, "Experiment config")
      ->required()->check(CLI::ExistingFile);
  trn->add_option("--data", tr.data, "Corpus directory")
      ->required()->check(CLI::ExistingDirectory);
  trn->add_option("--out", tr.out, "Run directory")->required();
  trn->add_option("--relax-gamma", tr.gamma, "Fixed relaxation coefficient")
      ->check(CLI::Range(0.0, 1.0));
  trn->add_flag("--relax-learned", tr.learned, "Learn one coefficient per layer");
  trn->add_option("--seed", tr.seed, "Override train.seed");
  trn->add_option("--epochs", tr.epochs, "Override train.epochs");
  trn->add_flag("--resume", tr.resume, "Continue from train_state.raed");
  trn->add_option("--lm", tr.lm, "LM for word-error-rate selection")
      ->check(CLI::ExistingFile);
  trn->add_option("--select-by", tr.select_by, "Checkpoint selection: ter or wer_lm");

  DecodeArgs dc;
  auto* dec = app.add_subcommand("decode", "Beam search with optional shallow fusion");
  dec->add_option("checkpoint", dc.checkpoint, "Model checkpoint")
      ->required()->check(CLI::ExistingFile);
  dec->add_option("manifest", dc.manifest, "Manifest to decode")
      ->required()->check(CLI::ExistingFile);
  dec->add_option("--out", dc.out, "Output prefix for .jsonl and .txt")->required();
  dec->add_option("--config", dc.config, "Config (default: beside the checkpoint)")
      ->check(CLI::ExistingFile);
  dec->add_option("--vocab", dc.vocab, "Vocabulary (default: beside the manifest)")
      ->check(CLI::ExistingFile);
  dec->add_option("--lm", dc.lm, "Language model for shallow fusion")
      ->check(CLI::ExistingFile);
  dec->add_flag("--no-lm", dc.no_lm, "Decode without the language model");
  dec->add_option("--lm-weight", dc.lm_weight, "LM weight")->check(CLI::NonNegativeNumber);
  dec->add_option("--beam", dc.beam, "Beam size")->check(CLI::PositiveNumber);
  dec->add_option("--nbest", dc.nbest, "Hypotheses per utterance")
      ->check(CLI::PositiveNumber);
  dec->add_option("--eos-rule", dc.eos_rule, "none or threshold");
  dec->add_option("--dump-attention", dc.dump,
                  "Write teacher-forced attention on the best hypotheses");
  dec->add_option("--threads", dc.threads, "Decoding threads")
      ->check(CLI::PositiveNumber);

  ScoreArgs sc;
  auto* scr = app.add_subcommand("score", "Word and character error rates");
  scr->add_option("ref", sc.ref, "Reference transcripts")
      ->required()->check(CLI::ExistingFile);
  scr->add_option("hyp", sc.hyp, "Hypothesis transcripts")
      ->required()->check(CLI::ExistingFile);
  scr->add_option("--json", sc.json, "Also write a JSON report");

  AnalyzeArgs an;
  auto* ana = app.add_subcommand("analyze-attention",
                                 "Compare attention entropy of two dumps");
  ana->add_option("baseline", an.baseline, "Baseline dump")
      ->required()->check(CLI::ExistingFile);
  ana->add_option("relaxed", an.relaxed, "Relaxed dump")
      ->required()->check(CLI::ExistingFile);
  ana->add_option("--json", an.json, "Also write a JSON report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "raed: error[usage]: " << e.what() << "\n";
    return 2;
  }

  try {
    setup_logging();
    if (*gen) return gen_data(gd);
    if (*lmt) return lm_train(lt);
    if (*trn) return train_cmd(tr);
    if (*dec) return decode_cmd(dc);
    if (*scr) return score_cmd(sc);
    if (*ana) return analyze_cmd(an);
  } catch (const raed::Error& e) {
    std::cerr << "raed: error[" << e.category() << "]: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "raed: error[io]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "raed: error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
