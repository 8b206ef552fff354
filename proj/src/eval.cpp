// SPDX-License-Identifier: Apache-2.0

#include "raed/eval.hpp"

#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include "raed/error.hpp"

namespace raed {

EditCounts& EditCounts::operator+=(const EditCounts& o) {
  n += o.n;
  deletions += o.deletions;
  insertions += o.insertions;
  substitutions += o.substitutions;
  return *this;
}

template <typename T>
EditCounts edit_distance_counts(std::span<const T> ref, std::span<const T> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  const std::size_t w = m + 1;
  std::vector<std::size_t> cost((n + 1) * w);
  for (std::size_t i = 0; i <= n; ++i) cost[i * w] = i;
  for (std::size_t j = 0; j <= m; ++j) cost[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag =
          cost[(i - 1) * w + j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cost[i * w + j] =
          std::min({diag, cost[(i - 1) * w + j] + 1, cost[i * w + j - 1] + 1});
    }
  }
  EditCounts c;
  c.n = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const std::size_t here = cost[i * w + j];
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      if (here == cost[(i - 1) * w + j - 1] + (same ? 0 : 1)) {
        if (!same) ++c.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && here == cost[(i - 1) * w + j] + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

template EditCounts edit_distance_counts<int>(std::span<const int>,
                                              std::span<const int>);
template EditCounts edit_distance_counts<std::string>(std::span<const std::string>,
                                                      std::span<const std::string>);
template EditCounts edit_distance_counts<char>(std::span<const char>,
                                               std::span<const char>);

EditCounts edit_distance_counts(const std::vector<int>& ref,
                                const std::vector<int>& hyp) {
  return edit_distance_counts<int>(std::span(ref), std::span(hyp));
}

EditCounts edit_distance_counts(const std::vector<std::string>& ref,
                                const std::vector<std::string>& hyp) {
  return edit_distance_counts<std::string>(std::span(ref), std::span(hyp));
}

double error_rate(const EditCounts& c) {
  if (c.n == 0) throw ValueError("error rate undefined for an empty reference");
  return static_cast<double>(c.errors()) / static_cast<double>(c.n);
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::vector<char> split_chars(const std::string& text) {
  std::vector<char> out;
  for (char ch : text)
    if (!std::isspace(static_cast<unsigned char>(ch))) out.push_back(ch);
  return out;
}

EditCounts word_counts(const std::string& ref, const std::string& hyp) {
  return edit_distance_counts(split_words(ref), split_words(hyp));
}

EditCounts char_counts(const std::string& ref, const std::string& hyp) {
  const auto r = split_chars(ref), h = split_chars(hyp);
  return edit_distance_counts<char>(std::span(r), std::span(h));
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kStochasticTolerance = 1e-6;

double row_entropy(std::span<const double> row) {
  double sum = 0.0, h = 0.0;
  for (double g : row) {
    if (!(g >= -kStochasticTolerance))
      throw ValueError("entropy: negative attention weight");
    sum += g;
    if (g > 0.0) h -= g * std::log(g);
  }
  if (std::abs(sum - 1.0) > kStochasticTolerance)
    throw ValueError("entropy: attention row sums to " + std::to_string(sum));
  return h;
}

RowEntropy finish(std::vector<double> rows) {
  RowEntropy out;
  for (double h : rows) out.mean += h;
  if (!rows.empty()) out.mean /= static_cast<double>(rows.size());
  out.rows = std::move(rows);
  return out;
}

}  // namespace

RowEntropy attention_entropy(const AttentionWeights& weights) {
  const Tensor& v = weights.values;
  if (!v.defined() || v.rank() < 1) throw ShapeError("entropy: empty weights");
  const std::size_t t = weights.frames();
  const auto valid = weights.frame_validity.empty() ? all_valid(t)
                                                    : weights.frame_validity;
  if (valid.size() != t) throw ShapeError("entropy: validity length mismatch");
  std::vector<double> rows;
  auto data = v.data();
  std::vector<double> row;
  for (std::size_t r = 0; r < v.numel() / t; ++r) {
    row.clear();
    for (std::size_t k = 0; k < t; ++k) {
      const double g = data[r * t + k];
      if (valid[k]) {
        row.push_back(g);
      } else if (std::abs(g) > kStochasticTolerance) {
        throw ValueError("entropy: weight on a padded frame");
      }
    }
    rows.push_back(row_entropy(row));
  }
  return finish(std::move(rows));
}

RowEntropy attention_entropy(const AttentionCapture::Matrix& m) {
  std::vector<double> rows;
  for (std::size_t r = 0; r < m.rows(); ++r)
    rows.push_back(row_entropy(std::span(m.values).subspan(r * m.cols, m.cols)));
  return finish(std::move(rows));
}

std::string attention_dump_name(std::size_t layer, std::size_t head,
                                const std::string& utt) {
  return "attn/" + std::to_string(layer) + "/" + std::to_string(head) + "/" + utt;
}

NamedTensors capture_to_dump(const AttentionCapture& capture,
                             const std::string& utt) {
  NamedTensors out;
  for (const auto& [key, m] : capture.matrices()) {
    out.emplace_back(attention_dump_name(key.first, key.second, utt),
                     Tensor({m.rows(), m.cols}, m.values));
  }
  return out;
}

namespace {

struct DumpKey {
  std::size_t layer, head;
  std::string utt;
};

DumpKey parse_dump_name(const std::string& name) {
  const auto fail = [&] {
    return FormatError("attention dump entry '" + name +
                       "' is not attn/<layer>/<head>/<utt>");
  };
  if (name.rfind("attn/", 0) != 0) throw fail();
  const auto a = name.find('/', 5);
  if (a == std::string::npos) throw fail();
  const auto b = name.find('/', a + 1);
  if (b == std::string::npos || b + 1 >= name.size()) throw fail();
  try {
    std::size_t used = 0;
    DumpKey k;
    k.layer = std::stoul(name.substr(5, a - 5), &used);
    if (used != a - 5) throw fail();
    k.head = std::stoul(name.substr(a + 1, b - a - 1), &used);
    if (used != b - a - 1) throw fail();
    k.utt = name.substr(b + 1);
    return k;
  } catch (const std::logic_error&) {
    throw fail();
  }
}

}  // namespace

EntropyStats entropy_stats(const NamedTensors& dump) {
  EntropyStats s;
  std::map<std::string, std::pair<double, std::size_t>> utt;
  std::map<std::pair<std::size_t, std::size_t>, std::pair<double, std::size_t>> head;
  double total = 0.0;
  for (const auto& [name, t] : dump) {
    const DumpKey k = parse_dump_name(name);
    if (t.rank() != 2) throw ShapeError("attention dump '" + name + "' is not 2-D");
    AttentionCapture::Matrix m;
    m.cols = t.dim(1);
    m.values.assign(t.data().begin(), t.data().end());
    const RowEntropy e = attention_entropy(m);
    double sum = 0.0;
    for (double h : e.rows) sum += h;
    auto& u = utt[k.utt];
    u.first += sum;
    u.second += e.rows.size();
    auto& hd = head[{k.layer, k.head}];
    hd.first += sum;
    hd.second += e.rows.size();
    total += sum;
    s.rows += e.rows.size();
  }
  for (const auto& [id, v] : utt)
    s.per_utterance[id] = v.second ? v.first / v.second : 0.0;
  for (const auto& [key, v] : head)
    s.per_head[key] = v.second ? v.first / v.second : 0.0;
  s.mean = s.rows ? total / static_cast<double>(s.rows) : 0.0;
  return s;
}

EntropyReport compare_entropy(const NamedTensors& baseline,
                              const NamedTensors& relaxed) {
  auto keys = [](const NamedTensors& d) {
    std::set<std::string> out;
    for (const auto& [name, t] : d) out.insert(name);
    return out;
  };
  if (keys(baseline) != keys(relaxed))
    throw ValueError("compare_entropy: dumps cover different utterances or heads");
  EntropyReport r;
  r.baseline = entropy_stats(baseline);
  r.relaxed = entropy_stats(relaxed);
  if (r.baseline.rows == 0) throw ValueError("compare_entropy: empty dumps");
  if (r.baseline.mean <= 0.0)
    throw ValueError("compare_entropy: baseline entropy is zero");
  r.ratio = r.relaxed.mean / r.baseline.mean - 1.0;
  return r;
}

}  // namespace raed
