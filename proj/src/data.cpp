// SPDX-License-Identifier: Apache-2.0

#include "raed/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <limits>
#include <set>
#include <sstream>

#include "raed/checkpoint.hpp"
#include "raed/error.hpp"
#include "raed/tokens.hpp"

namespace raed {

static_assert(std::endian::native == std::endian::little,
              "feature files are written with native little-endian layout");

namespace {

constexpr char kFeatureMagic[4] = {'R', 'A', 'F', 'X'};
constexpr std::size_t kFeatureHeaderBytes = 16;

// Stream keys for Rng::derive.
constexpr std::uint64_t kPrototypeStream = 1;
constexpr std::uint64_t kGrammarStream = 2;
constexpr std::uint64_t kWordStream = 3;
constexpr std::uint64_t kUtteranceStream = 10;

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::size_t sample(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

std::vector<std::string> make_words(std::size_t tokens, Rng& rng) {
  static const char* kOnsets = "bdfgklmnprstvz";
  static const char* kVowels = "aeiou";
  std::vector<std::string> words = {"<pad>", "</s>"};
  std::set<std::string> seen(words.begin(), words.end());
  while (words.size() < tokens + kReservedTokens) {
    std::string w;
    const std::size_t syllables = 1 + rng.below(3);
    for (std::size_t s = 0; s < syllables; ++s) {
      w += kOnsets[rng.below(std::strlen(kOnsets))];
      w += kVowels[rng.below(std::strlen(kVowels))];
    }
    if (seen.insert(w).second) words.push_back(w);
  }
  return words;
}

float to_f32(double v) { return static_cast<float>(v); }

}  // namespace

std::size_t ToyTaskSpec::vocab() const { return tokens + kReservedTokens; }

void ToyTaskSpec::validate() const {
  if (tokens < 1) throw ConfigError("data: tokens >= 1");
  if (feature_dim < 1) throw ConfigError("data: feature_dim >= 1");
  if (frames_per_token < 1) throw ConfigError("data: frames_per_token >= 1");
  if (jitter >= frames_per_token)
    throw ConfigError("data: jitter must be below frames_per_token");
  if (!(noise >= 0.0)) throw ConfigError("data: noise >= 0");
  if (min_length < 1 || max_length < min_length)
    throw ConfigError("data: need 1 <= min_length <= max_length");
  if (grammar_successors < 1 || grammar_successors > tokens)
    throw ConfigError("data: grammar_successors must lie in [1, tokens]");
  if (!(grammar_peak >= 0.0 && grammar_peak <= 1.0))
    throw ConfigError("data: grammar_peak must lie in [0, 1]");
  if (prototype_retries < 1) throw ConfigError("data: prototype_retries >= 1");
}

ToyTask make_toy_task(const ToyTaskSpec& spec) {
  spec.validate();
  ToyTask task;
  Rng proto_rng = Rng::derive(spec.seed, kPrototypeStream);
  bool separated = false;
  for (std::size_t attempt = 0; attempt < spec.prototype_retries && !separated;
       ++attempt) {
    task.prototypes.assign(spec.tokens, std::vector<double>(spec.feature_dim));
    for (auto& p : task.prototypes)
      for (double& v : p) v = to_f32(proto_rng.normal());
    separated = true;
    for (std::size_t a = 0; a < spec.tokens && separated; ++a)
      for (std::size_t b = a + 1; b < spec.tokens && separated; ++b)
        if (distance(task.prototypes[a], task.prototypes[b]) <
            spec.min_prototype_distance)
          separated = false;
  }
  if (!separated) {
    throw ValueError("data: no prototype set with pairwise distance >= " +
                     std::to_string(spec.min_prototype_distance) + " after " +
                     std::to_string(spec.prototype_retries) + " attempts");
  }

  Rng grammar_rng = Rng::derive(spec.seed, kGrammarStream);
  const double base = (1.0 - spec.grammar_peak) / static_cast<double>(spec.tokens);
  const double peak =
      spec.grammar_peak / static_cast<double>(spec.grammar_successors);
  task.grammar.assign(spec.tokens + 1, std::vector<double>(spec.tokens, base));
  for (auto& row : task.grammar) {
    std::vector<std::size_t> order(spec.tokens);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[grammar_rng.below(i)]);
    for (std::size_t k = 0; k < spec.grammar_successors; ++k)
      row[order[k]] += peak;
  }

  Rng word_rng = Rng::derive(spec.seed, kWordStream);
  task.words = make_words(spec.tokens, word_rng);
  return task;
}

namespace {

Utterance render_utterance(const ToyTaskSpec& spec, const ToyTask& task,
                           const std::string& id, Rng& rng) {
  Utterance u;
  u.id = id;
  const std::size_t length =
      spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
  std::size_t state = 0;
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t next = sample(task.grammar[state], rng);
    u.tokens.push_back(static_cast<int>(next + kReservedTokens));
    state = next + 1;
  }
  std::vector<double> frames;
  for (int token : u.tokens) {
    const std::size_t count =
        spec.frames_per_token - spec.jitter + rng.below(2 * spec.jitter + 1);
    const auto& proto = task.prototypes[token - kReservedTokens];
    for (std::size_t f = 0; f < count; ++f) {
      for (double p : proto) frames.push_back(to_f32(p + spec.noise * rng.normal()));
      u.frame_labels.push_back(token);
    }
  }
  const std::size_t n = u.frame_labels.size();
  u.features = Tensor({n, spec.feature_dim}, std::move(frames));
  return u;
}

std::pair<std::size_t, std::size_t> count_nearest(
    const ToyTask& task, const std::vector<Utterance>& utterances) {
  std::size_t correct = 0, total = 0;
  for (const auto& u : utterances) {
    const std::size_t dim = u.features.dim(1);
    auto data = u.features.data();
    for (std::size_t t = 0; t < u.frame_labels.size(); ++t) {
      std::vector<double> frame(data.begin() + t * dim, data.begin() + (t + 1) * dim);
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < task.prototypes.size(); ++k) {
        const double d = distance(frame, task.prototypes[k]);
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      correct += static_cast<int>(best + kReservedTokens) == u.frame_labels[t];
      ++total;
    }
  }
  return {correct, total};
}

}  // namespace

double nearest_prototype_accuracy(const ToyTask& task,
                                  const std::vector<Utterance>& utterances) {
  const auto [correct, total] = count_nearest(task, utterances);
  return total ? static_cast<double>(correct) / total : 1.0;
}

GeneratedData generate_dataset(const ToyTaskSpec& spec) {
  GeneratedData out;
  out.task = make_toy_task(spec);
  const std::pair<const char*, std::size_t> sizes[] = {
      {"train", spec.train_size}, {"dev", spec.dev_size}, {"test", spec.test_size}};
  std::uint64_t split_index = 0;
  std::size_t correct_total = 0, frames_total = 0;
  for (const auto& [name, size] : sizes) {
    Split split{name, {}};
    split.utterances.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
      Rng rng = Rng::derive(spec.seed, kUtteranceStream + split_index, i);
      std::ostringstream id;
      id << name << '-' << std::setfill('0') << std::setw(5) << i;
      split.utterances.push_back(render_utterance(spec, out.task, id.str(), rng));
    }
    const auto [correct, frames] = count_nearest(out.task, split.utterances);
    correct_total += correct;
    frames_total += frames;
    out.splits.push_back(std::move(split));
    ++split_index;
  }
  out.nearest_prototype_accuracy =
      frames_total ? static_cast<double>(correct_total) / frames_total : 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// Feature container.

Manifest write_feature_file(const std::filesystem::path& path,
                            const std::vector<Utterance>& utterances,
                            std::size_t feature_dim, std::size_t vocab) {
  std::vector<std::uint8_t> bytes(kFeatureMagic, kFeatureMagic + 4);
  auto put32 = [&](std::uint32_t v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + 4);
  };
  put32(kFeatureFileVersion);
  put32(static_cast<std::uint32_t>(feature_dim));
  put32(static_cast<std::uint32_t>(utterances.size()));
  Manifest m;
  m.features = path.filename().string();
  m.feature_dim = feature_dim;
  m.vocab = vocab;
  for (const auto& u : utterances) {
    if (u.features.dim(1) != feature_dim)
      throw ShapeError("features: utterance '" + u.id + "' has wrong width");
    m.records.push_back({u.id, bytes.size(), u.features.dim(0), u.tokens});
    for (double v : u.features.data()) {
      const float f = to_f32(v);
      const auto* p = reinterpret_cast<const std::uint8_t*>(&f);
      bytes.insert(bytes.end(), p, p + 4);
    }
  }
  write_file_bytes(path, bytes);
  return m;
}

namespace {

struct FeatureHeader {
  std::uint32_t feature_dim = 0, count = 0;
};

FeatureHeader parse_feature_header(const std::uint8_t* p, std::size_t size) {
  if (size < kFeatureHeaderBytes || std::memcmp(p, kFeatureMagic, 4))
    throw FormatError("not a feature file (bad magic)");
  std::uint32_t version;
  FeatureHeader h;
  std::memcpy(&version, p + 4, 4);
  std::memcpy(&h.feature_dim, p + 8, 4);
  std::memcpy(&h.count, p + 12, 4);
  if (version != kFeatureFileVersion)
    throw FormatError("unsupported feature file version " + std::to_string(version));
  if (h.feature_dim == 0) throw FormatError("feature file with zero width");
  return h;
}

Tensor frames_from_bytes(const std::uint8_t* p, std::size_t frames,
                         std::size_t dim) {
  std::vector<double> values(frames * dim);
  for (std::size_t i = 0; i < values.size(); ++i) {
    float f;
    std::memcpy(&f, p + 4 * i, 4);
    values[i] = f;
  }
  return Tensor({frames, dim}, std::move(values));
}

}  // namespace

std::vector<Tensor> read_feature_file(const std::filesystem::path& path,
                                      const Manifest& m) {
  const auto bytes = read_file_bytes(path);
  const FeatureHeader h = parse_feature_header(bytes.data(), bytes.size());
  if (h.count != m.records.size() || h.feature_dim != m.feature_dim)
    throw FormatError("feature file '" + path.string() +
                      "' does not match its manifest");
  std::vector<Tensor> out;
  std::size_t pos = kFeatureHeaderBytes;
  for (const auto& r : m.records) {
    const std::size_t n = r.frames * h.feature_dim * 4;
    if (r.offset != pos || bytes.size() - pos < n)
      throw FormatError("feature file truncated or offsets out of order");
    out.push_back(frames_from_bytes(bytes.data() + pos, r.frames, h.feature_dim));
    pos += n;
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes in feature file");
  return out;
}

Tensor read_utterance_features(const std::filesystem::path& path,
                               const ManifestRecord& record,
                               std::size_t feature_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::uint8_t header[kFeatureHeaderBytes];
  in.read(reinterpret_cast<char*>(header), kFeatureHeaderBytes);
  if (!in) throw FormatError("feature file truncated");
  const FeatureHeader h = parse_feature_header(header, kFeatureHeaderBytes);
  if (h.feature_dim != feature_dim)
    throw FormatError("feature width mismatch in '" + path.string() + "'");
  std::vector<std::uint8_t> buf(record.frames * feature_dim * 4);
  in.seekg(static_cast<std::streamoff>(record.offset));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw FormatError("utterance '" + record.id + "' past end of file");
  return frames_from_bytes(buf.data(), record.frames, feature_dim);
}

// ---------------------------------------------------------------------------
// Manifest.

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::ostringstream out;
  nlohmann::json header = {{"format", "raed-manifest"},
                           {"version", m.version},
                           {"features", m.features},
                           {"feature_dim", m.feature_dim},
                           {"vocab", m.vocab},
                           {"utterances", m.records.size()}};
  out << header.dump() << '\n';
  for (const auto& r : m.records) {
    nlohmann::json j = {{"id", r.id},
                        {"offset", r.offset},
                        {"frames", r.frames},
                        {"tokens", r.tokens}};
    out << j.dump() << '\n';
  }
  const std::string s = out.str();
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()),
                                   s.size()));
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  auto fail = [&](std::size_t line, const std::string& what) {
    return FormatError(path.string() + ":" + std::to_string(line) + ": " + what);
  };
  Manifest m;
  std::string line;
  std::size_t line_no = 0, expected = 0;
  std::uint64_t next_offset = kFeatureHeaderBytes;
  try {
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (line_no == 1) {
        if (j.at("format") != "raed-manifest") throw fail(line_no, "not a manifest");
        m.version = j.at("version");
        if (m.version != kManifestVersion)
          throw fail(line_no, "unsupported manifest version");
        m.features = j.at("features");
        m.feature_dim = j.at("feature_dim");
        m.vocab = j.at("vocab");
        expected = j.at("utterances");
        continue;
      }
      ManifestRecord r;
      r.id = j.at("id");
      r.offset = j.at("offset");
      r.frames = j.at("frames");
      r.tokens = j.at("tokens").get<std::vector<int>>();
      if (r.offset < next_offset) throw fail(line_no, "overlapping offsets");
      next_offset = r.offset + r.frames * m.feature_dim * 4;
      for (int t : r.tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= m.vocab)
          throw fail(line_no, "token id " + std::to_string(t) + " outside vocabulary");
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(line_no, e.what());
  }
  if (line_no == 0) throw FormatError(path.string() + ": empty manifest");
  if (m.records.size() != expected)
    throw FormatError(path.string() + ": header announces " +
                      std::to_string(expected) + " utterances, found " +
                      std::to_string(m.records.size()));
  return m;
}

std::vector<Example> load_examples(const std::filesystem::path& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  const auto container = manifest_path.parent_path() / m.features;
  const auto bytes = read_file_bytes(container);
  const FeatureHeader h = parse_feature_header(bytes.data(), bytes.size());
  if (h.feature_dim != m.feature_dim || h.count != m.records.size())
    throw FormatError("feature file '" + container.string() +
                      "' does not match its manifest");
  std::vector<Example> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) {
    const std::size_t n = r.frames * m.feature_dim * 4;
    if (r.offset > bytes.size() || bytes.size() - r.offset < n)
      throw FormatError("utterance '" + r.id + "' past end of feature file");
    out.push_back({r.id, r.tokens,
                   frames_from_bytes(bytes.data() + r.offset, r.frames, m.feature_dim)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text files.

void write_vocabulary(const std::filesystem::path& path,
                      const std::vector<std::string>& words) {
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i)
    s += std::to_string(i) + ' ' + words[i] + '\n';
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()),
                                   s.size()));
}

std::vector<std::string> read_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::string> words;
  std::size_t id;
  std::string word;
  while (in >> id >> word) {
    if (id != words.size())
      throw FormatError(path.string() + ": ids must be dense and ordered");
    words.push_back(word);
  }
  if (words.size() <= kReservedTokens)
    throw FormatError(path.string() + ": vocabulary too small");
  return words;
}

std::string render_transcript(const std::vector<int>& tokens,
                              const std::vector<std::string>& words) {
  std::string s;
  for (int t : tokens) {
    if (t == kEosId) break;
    if (t < 0 || static_cast<std::size_t>(t) >= words.size())
      throw ValueError("token id " + std::to_string(t) + " has no word");
    if (!s.empty()) s += ' ';
    s += words[t];
  }
  return s;
}

void write_transcripts(const std::filesystem::path& path,
                       const std::vector<std::string>& ids,
                       const std::vector<std::vector<int>>& tokens,
                       const std::vector<std::string>& words) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    s += ids[i];
    const std::string text = render_transcript(tokens[i], words);
    if (!text.empty()) s += ' ' + text;
    s += '\n';
  }
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()),
                                   s.size()));
}

void write_dataset(const std::filesystem::path& dir, const GeneratedData& data,
                   const ToyTaskSpec& spec) {
  std::filesystem::create_directories(dir);
  write_vocabulary(dir / "vocab.txt", data.task.words);
  for (const auto& split : data.splits) {
    Manifest m = write_feature_file(dir / (split.name + ".rafx"), split.utterances,
                                    spec.feature_dim, spec.vocab());
    write_manifest(dir / (split.name + ".jsonl"), m);
    std::vector<std::string> ids;
    std::vector<std::vector<int>> tokens;
    for (const auto& u : split.utterances) {
      ids.push_back(u.id);
      tokens.push_back(u.tokens);
    }
    write_transcripts(dir / (split.name + ".ref.txt"), ids, tokens, data.task.words);
  }
}

}  // namespace raed
