// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner. Prints one verdict line per criterion,
//   PASS <name>: <summary>   or   FAIL <name>: <summary>
// with indented detail lines before it, and exits 1 if any criterion fails.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "raed/checkpoint.hpp"
#include "raed/config.hpp"
#include "raed/decode.hpp"
#include "raed/eval.hpp"
#include "raed/pipeline.hpp"
#include "raed/tokens.hpp"

namespace raed {
namespace {

namespace fs = std::filesystem;
using namespace raed::testing;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

void detail(const std::string& line) {
  std::printf("    %s\n", line.c_str());
  std::fflush(stdout);
}

int failures = 0;

void verdict(bool ok, const std::string& name, const std::string& summary) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), summary.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------

void relaxation_algebra() {
  const auto start = Clock::now();
  Rng rng(20240611);
  std::size_t identity = 0, uniform = 0, stochastic = 0, convex = 0, entropy = 0;
  std::size_t gamma0 = 0, gamma1 = 0;
  double worst_sum = 0.0;
  constexpr int kRows = 1000;
  for (int trial = 0; trial < kRows; ++trial) {
    const std::size_t frames = 1 + rng.below(16);
    std::vector<std::uint8_t> valid(frames, 1);
    for (auto& v : valid) v = rng.uniform() < 0.8 ? 1 : 0;
    valid[rng.below(frames)] = 1;
    std::size_t n_valid = 0;
    for (auto v : valid) n_valid += v;
    double gamma = rng.uniform();
    if (trial % 10 == 0) gamma = 0.0;
    if (trial % 10 == 1) gamma = 1.0;
    gamma0 += gamma == 0.0;
    gamma1 += gamma == 1.0;
    const std::vector<double> row = random_row(rng, valid);
    const Tensor out = relax_weights(Tensor({1, frames}, row), gamma, valid);
    const double u = 1.0 / static_cast<double>(n_valid);
    double total = 0.0;
    bool row_identity = true, row_uniform = true, row_convex = true;
    std::vector<double> relaxed(frames);
    for (std::size_t t = 0; t < frames; ++t) {
      const double g = row[t], r = relaxed[t] = out.at(t);
      total += r;
      if (!valid[t]) {
        row_convex &= r == 0.0;
        continue;
      }
      row_identity &= r == g;
      row_uniform &= r == u;
      row_convex &= r >= std::min(g, u) - 1e-15 && r <= std::max(g, u) + 1e-15;
    }
    if (gamma == 0.0) identity += row_identity;
    if (gamma == 1.0) uniform += row_uniform;
    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    stochastic += std::abs(total - 1.0) <= 1e-9;
    convex += row_convex;
    entropy += row_entropy(relaxed) >= row_entropy(row) - 1e-12;
  }
  const double elapsed = seconds_since(start);
  detail(fmt("gamma=0 identity (exact): %zu/%zu rows", identity, gamma0));
  detail(fmt("gamma=1 uniform over valid frames (exact): %zu/%zu rows", uniform, gamma1));
  detail(fmt("row sums within 1e-9: %zu/%d (worst |sum-1| = %.2e)", stochastic, kRows,
             worst_sum));
  detail(fmt("entries between G and 1/T_valid: %zu/%d rows", convex, kRows));
  detail(fmt("entropy non-decreasing: %zu/%d rows", entropy, kRows));
  const bool ok = identity == gamma0 && uniform == gamma1 && stochastic == kRows &&
                  convex == kRows && entropy == kRows && elapsed < 1.0;
  verdict(ok, "relaxation-algebra",
          fmt("%d random rows, all properties %s, %.3f s (limit 1 s)", kRows,
              ok ? "hold" : "checked", elapsed));
}

// ---------------------------------------------------------------------------

void gradient_suite() {
  const auto start = Clock::now();
  bool ok = true;
  auto model = [&](const char* name, ModelConfig c, double gamma, bool learned,
                   std::uint64_t seed) {
    const auto r = model_gradient_check(std::move(c), gamma, learned, seed);
    const bool pass = r.check.max_rel_error < 1e-3 && r.check.checked > 100;
    ok &= pass;
    detail(fmt("%-32s %5zu entries, max rel err %.2e (< 1e-3)%s", name, r.check.checked,
               r.check.max_rel_error, pass ? "" : (" worst " + r.worst_parameter).c_str()));
  };
  auto op = [&](const char* name, const GradCheckResult& r) {
    const bool pass = r.max_rel_error < 1e-4;
    ok &= pass;
    detail(fmt("%-32s %5zu entries, max rel err %.2e (< 1e-4)", name, r.checked,
               r.max_rel_error));
  };
  model("micro-transformer", micro_transformer(), 0.0, false, 31);
  model("micro-transformer gamma=0.35", micro_transformer(), 0.35, false, 32);
  model("micro-transformer learned gamma", micro_transformer(), 0.0, true, 33);
  model("micro-LAS", micro_las(), 0.0, false, 34);
  model("micro-LAS gamma=0.35", micro_las(), 0.35, false, 36);
  model("micro-LAS learned gamma", micro_las(), 0.0, true, 35);
  for (double g : {0.0, 0.35, 1.0}) op(fmt("MHA gamma=%.2f", g).c_str(), mha_gradient_check(g, 31));
  for (double g : {0.0, 0.2, 1.0})
    op(fmt("additive attention gamma=%.2f", g).c_str(), bahdanau_gradient_check(g, 46));
  {
    Rng rng(11);
    const std::vector<std::uint8_t> valid = {1, 1, 0, 1, 1};
    Tensor g = random_tensor({3, 5}, rng, 0.0, 1.0);
    Tensor gamma = Tensor({1}, {0.3}, true);
    const Tensor r = random_tensor({3, 5}, rng, -1.0, 1.0, false);
    op("relax_weights",
       check_gradients([&] { return sum(mul(tanh(relax_weights(g, gamma, valid)), r)); },
                       {g, gamma}));
  }
  const double elapsed = seconds_since(start);
  ok &= elapsed < 120.0;
  verdict(ok, "gradient-suite",
          fmt("central differences on every parameter, %.1f s (limit 120 s)", elapsed));
}

// ---------------------------------------------------------------------------

Tensor random_features(Rng& rng, std::size_t frames) {
  return random_tensor({frames, 4}, rng, -1.0, 1.0, false);
}

void decoder_equivalences() {
  const auto start = Clock::now();
  // Step-by-step against teacher-forced decoding.
  double worst_step = 0.0;
  {
    Rng rng(15);
    for (double gamma : {0.0, 0.35}) {
      ModelConfig c = micro_transformer();
      c.transformer.relaxation.gamma = gamma;
      for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto model = make_model(c, seed);
        NoGradGuard guard;
        const Encoded enc = model->encode(random_features(rng, 14 + seed), {});
        std::vector<int> inputs = {kEosId};
        for (int l = 0; l < 6; ++l) inputs.push_back(2 + static_cast<int>(rng.below(4)));
        const Tensor all = model->decode_all(enc, inputs, {});
        auto state = model->initial_state(enc);
        for (std::size_t l = 0; l < inputs.size(); ++l) {
          const Tensor step = model->decode_step(enc, inputs[l], *state, {});
          for (std::size_t v = 0; v < 6; ++v)
            worst_step = std::max(worst_step, std::abs(step.at(v) - all.at(l, v)));
        }
      }
    }
  }
  const bool step_ok = worst_step <= 1e-10;
  detail(fmt("stepwise vs teacher-forced, 10 models x 7 steps: max |diff| %.2e (<= 1e-10)",
             worst_step));

  // Unit beam with zero LM weight against greedy argmax.
  std::size_t greedy_same = 0, greedy_total = 0;
  {
    Rng rng(16);
    LmConfig lc;
    lc.vocab = 6;
    const ToyLm lm(lc, 3);
    const LmScorer lm_scorer(lm);
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
      ModelConfig c = micro_transformer();
      auto model = make_model(c, 100 + seed);
      NoGradGuard guard;
      const Encoded enc = model->encode(random_features(rng, 12 + seed % 9), {});
      const ModelScorer am(*model, enc);
      const std::vector<int> greedy = greedy_decode(am, 8);
      FusionConfig f;
      f.beam = 1;
      f.lm_weight = 0.0;
      for (const StepScorer* lm_ptr : {static_cast<const StepScorer*>(nullptr),
                                       static_cast<const StepScorer*>(&lm_scorer)}) {
        ++greedy_total;
        greedy_same += beam_search(am, lm_ptr, f, 8).ranked.front().tokens == greedy;
      }
    }
  }
  const bool greedy_ok = greedy_same == greedy_total;
  detail(fmt("beam=1, lambda=0 vs greedy (50 models, with and without LM): %zu/%zu "
             "token-exact",
             greedy_same, greedy_total));

  // Non-pruning beam against exhaustive enumeration, D = 5, L = 3.
  std::size_t exact = 0, cases = 0;
  double worst_score = 0.0;
  {
    Rng rng(17);
    LmConfig lc;
    lc.vocab = 5;
    const ToyLm lm(lc, 4);
    const LmScorer lm_scorer(lm);
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      ModelConfig c = micro_transformer();
      c.transformer.vocab = 5;
      auto model = make_model(c, 200 + seed);
      NoGradGuard guard;
      const Encoded enc = model->encode(random_features(rng, 12 + seed), {});
      const ModelScorer am(*model, enc);
      for (const StepScorer* lm_ptr : {static_cast<const StepScorer*>(nullptr),
                                       static_cast<const StepScorer*>(&lm_scorer)}) {
        for (bool norm : {true, false}) {
          FusionConfig f;
          f.beam = 4 * 3 * 3;  // (D-1)(D-2)^(L-1): nothing is ever pruned
          f.lm_weight = 0.9;
          f.length_normalization = norm;
          const auto oracle = enumerate_ranked(am, lm_ptr, 0.9, 3, norm);
          const BeamResult r = beam_search(am, lm_ptr, f, 3);
          ++cases;
          bool same = r.ranked.size() == oracle.size();
          for (std::size_t k = 0; same && k < oracle.size(); ++k) {
            const double d = std::abs(r.ranked[k].score - oracle[k].second);
            worst_score = std::max(worst_score, d);
            same = r.ranked[k].tokens == oracle[k].first && d <= 1e-12;
          }
          exact += same;
        }
      }
    }
  }
  const bool exhaustive_ok = exact == cases;
  detail(fmt("beam vs exhaustive search (D=5, L=3; LM on/off x normalization on/off): "
             "%zu/%zu identical ranked lists, max score diff %.1e",
             exact, cases, worst_score));
  const double elapsed = seconds_since(start);
  verdict(step_ok && greedy_ok && exhaustive_ok && elapsed < 60.0, "decoder-equivalences",
          fmt("stepwise, greedy and exhaustive checks, %.1f s (limit 60 s)", elapsed));
}

// ---------------------------------------------------------------------------

void scoring_oracle() {
  Rng rng(7);
  const std::vector<std::string> lexicon = {"ab", "b", "ca", "abc", "c"};
  std::size_t word_match = 0, char_match = 0, identity = 0, cases = 0;
  auto matches = [](const std::vector<int>& r, const std::vector<int>& h,
                    const EditCounts& c) {
    EditOracle o{r, h, {}};
    const auto& optimal = o.best();
    return c.n == r.size() && c.errors() == EditOracle::total(*optimal.begin()) &&
           optimal.count({c.deletions, c.insertions, c.substitutions}) == 1;
  };
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> rw(rng.below(9)), hw(rng.below(9));
    const std::size_t alphabet = 1 + rng.below(lexicon.size());
    for (int& x : rw) x = static_cast<int>(rng.below(alphabet));
    for (int& x : hw) x = static_cast<int>(rng.below(alphabet));
    std::string ref, hyp;
    for (int x : rw) ref += (ref.empty() ? "" : " ") + lexicon[x];
    for (int x : hw) hyp += (hyp.empty() ? "" : " ") + lexicon[x];
    ++cases;
    const EditCounts w = word_counts(ref, hyp);
    word_match += matches(rw, hw, w);
    std::vector<int> rc, hc;
    for (char ch : split_chars(ref)) rc.push_back(ch);
    for (char ch : split_chars(hyp)) hc.push_back(ch);
    const EditCounts c = char_counts(ref, hyp);
    char_match += matches(rc, hc, c);
    bool id = true;
    for (const EditCounts& e : {w, c}) {
      if (e.n == 0) continue;
      const double n = static_cast<double>(e.n);
      const double lhs = 1.0 - (n - e.deletions - e.insertions - e.substitutions) / n;
      const double rhs = (e.deletions + e.insertions + e.substitutions) / n;
      id &= std::abs(lhs - rhs) <= 1e-12 && error_rate(e) == rhs;
    }
    identity += id;
  }
  detail(fmt("word counts equal to the exhaustive oracle: %zu/%zu", word_match, cases));
  detail(fmt("character counts equal to the exhaustive oracle: %zu/%zu", char_match, cases));
  detail(fmt("1-(N-D-I-S)/N == (D+I+S)/N: %zu/%zu", identity, cases));
  verdict(word_match == cases && char_match == cases && identity == cases, "scoring-oracle",
          fmt("%zu random pairs", cases));
}

// ---------------------------------------------------------------------------
// Toy task.

struct Workspace {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path lm() const { return root / "lm.raed"; }
};

constexpr std::uint64_t kSeeds[] = {1, 2, 3};
constexpr double kGammas[] = {0.0, 0.2, 0.35};

ExperimentConfig pinned_config() {
  ExperimentConfig c;
  auto& t = c.model.transformer;
  t.frontend.input_dim = c.data.feature_dim;
  t.frontend.channels = {8, 8, 8, 8};
  t.encoder_blocks = 2;
  t.decoder_blocks = 1;
  t.width = 64;
  t.heads = 4;
  c.model.las.frontend = t.frontend;
  c.train.epochs = 12;
  c.train.batch_size = 16;
  c.train.schedule.peak = 0.002;
  return c;
}

void ensure_data(const Workspace& w) {
  if (fs::exists(w.lm())) return;
  const auto start = Clock::now();
  const ExperimentConfig c = pinned_config();
  const GenDataSummary g = run_gen_data(c.data, w.data());
  LmTrainRequest req;
  req.manifest = w.data() / "train.jsonl";
  req.held_out = w.data() / "dev.jsonl";
  req.config = c.lm;
  req.out = w.lm();
  const LmTrainReport lm = run_lm_train(req);
  detail(fmt("corpus: %zu utterances, nearest-prototype accuracy %.4f; LM held-out "
             "perplexity %.3f; %.0f s",
             g.utterances, g.nearest_prototype_accuracy, lm.held_out_perplexity.back(),
             seconds_since(start)));
}

struct RunOutcome {
  fs::path dir;
  TrainResult train;
  double greedy_wer = 0.0;
  double lm_wer = 0.0;
  double entropy = 0.0;  // inference attention on LM-decoded hypotheses
};

std::string run_name(std::uint64_t seed, double gamma, bool learned) {
  return learned ? fmt("seed%llu-learned", static_cast<unsigned long long>(seed))
                 : fmt("seed%llu-gamma%.2f", static_cast<unsigned long long>(seed), gamma);
}

std::map<std::string, RunOutcome> runs;

void decode_run(const Workspace& w, const fs::path& dir, bool with_lm, const std::string& prefix,
                bool dump) {
  DecodeRequest d;
  d.checkpoint = dir / "best.raed";
  d.manifest = w.data() / "test.jsonl";
  d.fusion = read_config(dir / "config.ini").decode;
  if (with_lm) {
    d.lm = w.lm();
  } else {
    d.use_lm = false;
    d.fusion.beam = 1;
  }
  d.out_prefix = dir / prefix;
  if (dump) d.attention_dump = dir / (prefix + ".attn.raed");
  run_decode(d);
}

const RunOutcome& ensure_run(const Workspace& w, std::uint64_t seed, double gamma,
                             bool learned, const std::string& name = "") {
  const std::string key = name.empty() ? run_name(seed, gamma, learned) : name;
  if (auto it = runs.find(key); it != runs.end()) return it->second;
  ensure_data(w);
  const auto start = Clock::now();
  TrainRequest req;
  req.config = pinned_config();
  req.config.train.seed = seed;
  set_relaxation(req.config.model, learned ? 0.0 : gamma, learned);
  req.data_dir = w.data();
  req.out_dir = w.root / key;
  fs::remove_all(req.out_dir);
  RunOutcome out;
  out.dir = req.out_dir;
  out.train = run_train(req);
  decode_run(w, out.dir, false, "greedy", false);
  decode_run(w, out.dir, true, "lm", true);
  const fs::path ref = w.data() / "test.ref.txt";
  out.greedy_wer = score_transcripts(ref, out.dir / "greedy.txt").wer();
  out.lm_wer = score_transcripts(ref, out.dir / "lm.txt").wer();
  out.entropy = entropy_stats(read_tensor_file(out.dir / "lm.attn.raed")).mean;
  const auto& best = out.train.epochs.at(out.train.best_epoch - 1);
  detail(fmt("%-18s best epoch %2zu, val TER %.4f, test WER greedy %.2f%%, with LM %.2f%%, "
             "inference entropy %.4f nats; %.0f s",
             key.c_str(), out.train.best_epoch, best.val_ter, 100 * out.greedy_wer,
             100 * out.lm_wer, out.entropy, seconds_since(start)));
  return runs.emplace(key, std::move(out)).first->second;
}

void toy_end_to_end(const Workspace& w) {
  const auto start = Clock::now();
  std::size_t a_votes = 0, b_votes = 0, c_votes = 0;
  double relaxed_lm_sum = 0.0;
  std::map<double, double> lm_by_gamma, entropy_by_gamma;
  for (std::uint64_t seed : kSeeds) {
    for (double g : kGammas) ensure_run(w, seed, g, false);
    const RunOutcome& base = runs.at(run_name(seed, 0.0, false));
    double relaxed_lm = 0.0, relaxed_entropy = 0.0;
    for (double g : {0.2, 0.35}) {
      const RunOutcome& r = runs.at(run_name(seed, g, false));
      relaxed_lm += r.lm_wer / 2;
      relaxed_entropy += r.entropy / 2;
    }
    for (double g : kGammas) {
      lm_by_gamma[g] += runs.at(run_name(seed, g, false)).lm_wer / std::size(kSeeds);
      entropy_by_gamma[g] += runs.at(run_name(seed, g, false)).entropy / std::size(kSeeds);
    }
    relaxed_lm_sum += relaxed_lm;
    const bool a = base.greedy_wer < 0.05 && base.train.epochs.size() <= 30;
    const bool b = relaxed_lm <= base.lm_wer;
    const bool c = relaxed_entropy > base.entropy;
    a_votes += a;
    b_votes += b;
    c_votes += c;
    detail(fmt("seed %llu: (a) greedy %.2f%% %s; (b) relaxed+LM %.2f%% vs baseline+LM %.2f%% "
               "%s; (c) entropy %.4f vs %.4f (%+.2f%%) %s",
               static_cast<unsigned long long>(seed), 100 * base.greedy_wer, a ? "yes" : "no",
               100 * relaxed_lm, 100 * base.lm_wer, b ? "yes" : "no", relaxed_entropy,
               base.entropy, 100 * (relaxed_entropy / base.entropy - 1), c ? "yes" : "no"));
  }
  const std::size_t n = std::size(kSeeds);
  for (double g : kGammas)
    detail(fmt("gamma %.2f: mean test WER with LM %.2f%%, mean inference entropy %.4f", g,
               100 * lm_by_gamma[g], entropy_by_gamma[g]));
  // (b) compares seed-mean WERs: each relaxed gamma against the baseline.
  bool b = true;
  std::string b_means;
  for (double g : {0.2, 0.35}) {
    b &= lm_by_gamma[g] <= lm_by_gamma[0.0];
    b_means += fmt("%sgamma %.2f %.2f%%", b_means.empty() ? "" : ", ", g, 100 * lm_by_gamma[g]);
  }
  const bool a = 2 * a_votes > n, c = 2 * c_votes > n;
  detail(fmt("(a) baseline greedy WER < 5%% within 30 epochs: %zu/%zu seeds -> %s", a_votes, n,
             a ? "pass" : "fail"));
  detail(fmt("(b) seed-mean WER with LM, %s vs baseline %.2f%% -> %s (per-seed vote %zu/%zu, "
             "pooled relaxed %.2f%%)",
             b_means.c_str(), 100 * lm_by_gamma[0.0], b ? "pass" : "fail", b_votes, n,
             100 * relaxed_lm_sum / n));
  detail(fmt("(c) relaxed inference entropy > baseline: %zu/%zu seeds -> %s", c_votes, n,
             c ? "pass" : "fail"));
  const double elapsed = seconds_since(start);
  verdict(a && b && c, "toy-end-to-end",
          fmt("(a) %s, (b) %s, (c) %s over %zu seeds; %.0f s", a ? "pass" : "fail",
              b ? "pass" : "fail", c ? "pass" : "fail", n, elapsed));
}

void learned_gamma(const Workspace& w) {
  const RunOutcome& r = ensure_run(w, 1, 0.0, true);
  bool bounded = true;
  double lo = 1.0, hi = 0.0;
  for (const auto& e : r.train.epochs) {
    for (double g : e.gamma_min) lo = std::min(lo, g);
    for (double g : e.gamma_max) hi = std::max(hi, g);
  }
  bounded = lo >= 0.0 && hi <= 1.0 && !r.train.epochs.empty();
  const auto& last = r.train.epochs.back();
  bool small = !last.gamma.empty();
  std::string finals;
  for (std::size_t b = 0; b < last.gamma.size(); ++b) {
    finals += fmt("%sblock %zu: %.4f", b ? ", " : "", b, last.gamma[b]);
    small &= last.gamma[b] < 0.1;
  }
  for (const auto& e : r.train.epochs) {
    std::string gs;
    for (double g : e.gamma) gs += fmt(" %.4f", g);
    detail(fmt("epoch %2zu gamma%s", e.epoch, gs.c_str()));
  }
  detail(fmt("range over every step: [%.4f, %.4f]", lo, hi));
  verdict(bounded && small, "learned-gamma",
          fmt("per-block gamma within [0,1] %s; final %s; below 0.1 %s", bounded ? "yes" : "no",
              finals.c_str(), small ? "yes" : "no"));
}

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir));
  std::sort(out.begin(), out.end());
  return out;
}

void determinism(const Workspace& w) {
  const auto start = Clock::now();
  ensure_data(w);
  std::size_t same = 0, total = 0;
  auto compare = [&](const fs::path& a, const fs::path& b) {
    ++total;
    const bool eq = fs::exists(a) && fs::exists(b) && slurp(a) == slurp(b);
    same += eq;
    if (!eq) detail("differs: " + b.string());
  };
  const ExperimentConfig c = pinned_config();
  const fs::path data2 = w.root / "repeat-data";
  fs::remove_all(data2);
  run_gen_data(c.data, data2);
  const auto names = files_under(w.data());
  if (files_under(data2) != names) detail("repeated corpus has a different file set");
  for (const auto& f : names) compare(w.data() / f, data2 / f);

  LmTrainRequest lm;
  lm.manifest = w.data() / "train.jsonl";
  lm.held_out = w.data() / "dev.jsonl";
  lm.config = c.lm;
  lm.out = w.root / "repeat-lm.raed";
  run_lm_train(lm);
  compare(w.lm(), lm.out);
  compare(w.root / "lm.raed.metrics.jsonl", w.root / "repeat-lm.raed.metrics.jsonl");

  const RunOutcome& first = ensure_run(w, 1, 0.2, false);
  const RunOutcome& again = ensure_run(w, 1, 0.2, false, "repeat-seed1-gamma0.20");
  for (const char* f : {"metrics.jsonl", "best.raed", "last.raed", "train_state.raed",
                        "config.ini", "greedy.jsonl", "greedy.txt", "lm.jsonl", "lm.txt",
                        "lm.attn.raed"})
    compare(first.dir / f, again.dir / f);
  verdict(same == total, "determinism",
          fmt("%zu/%zu artifacts byte-identical across repeated corpus, LM, training and "
              "decoding runs; %.0f s",
              same, total, seconds_since(start)));
}

}  // namespace
}  // namespace raed

int main(int argc, char** argv) {
  using namespace raed;
  CLI::App app{"Acceptance runner"};
  std::string work = "acceptance-work";
  std::vector<std::string> only;
  bool reuse_data = false;
  app.add_option("--work", work, "Scratch directory for the toy-task runs");
  app.add_flag("--reuse-data", reuse_data, "Keep the corpus and LM already in --work");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const std::vector<std::pair<std::string, std::function<void(const Workspace&)>>> criteria = {
      {"relaxation-algebra", [](const Workspace&) { relaxation_algebra(); }},
      {"gradient-suite", [](const Workspace&) { gradient_suite(); }},
      {"decoder-equivalences", [](const Workspace&) { decoder_equivalences(); }},
      {"scoring-oracle", [](const Workspace&) { scoring_oracle(); }},
      {"toy-end-to-end", toy_end_to_end},
      {"learned-gamma", learned_gamma},
      {"determinism", determinism},
  };
  const std::set<std::string> selected(only.begin(), only.end());
  Workspace w{fs::absolute(work)};
  if (!reuse_data) fs::remove_all(w.root);
  fs::create_directories(w.root);
  const auto start = Clock::now();
  for (const auto& [name, run] : criteria) {
    if (!selected.empty() && !selected.count(name)) continue;
    try {
      run(w);
    } catch (const std::exception& e) {
      verdict(false, name, std::string("error: ") + e.what());
    }
  }
  std::printf("%d criteria failed; %.0f s total\n", failures, seconds_since(start));
  return failures == 0 ? 0 : 1;
}
