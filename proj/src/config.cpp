// SPDX-License-Identifier: Apache-2.0

#include "raed/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "raed/checkpoint.hpp"
#include "raed/error.hpp"

namespace raed {

namespace pt = boost::property_tree;

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (!in || !(in >> std::ws).eof())
    throw ConfigError("config: '" + key + "' has malformed value '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + value + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream in(value);
  for (std::string item; std::getline(in, item, ',');)
    out.push_back(parse_number<std::size_t>(key, item));
  if (out.empty()) throw ConfigError("config: '" + key + "' is empty");
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// One entry per key: how to read it into the config and how to print it.
struct Field {
  std::function<void(ExperimentConfig&, const std::string& key, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

using FieldTable = std::vector<std::pair<std::string, Field>>;  // "section.key"

template <typename T, typename Access>
Field number(Access access) {
  return {[access](ExperimentConfig& c, const std::string& k, const std::string& v) {
            access(c) = parse_number<T>(k, v);
          },
          [access](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt_double(access(c));
            } else {
              return std::to_string(access(c));
            }
          }};
}

template <typename Access>
Field boolean(Access access) {
  return {[access](ExperimentConfig& c, const std::string& k, const std::string& v) {
            access(c) = parse_bool(k, v);
          },
          [access](const ExperimentConfig& c) {
            return std::string(access(c) ? "true" : "false");
          }};
}

const FieldTable& fields() {
  using C = ExperimentConfig;
  static const FieldTable table = [] {
    FieldTable t;
    auto add = [&](const std::string& key, Field f) { t.emplace_back(key, std::move(f)); };
    add("model.architecture",
        {[](C& c, const std::string&, const std::string& v) {
           c.model.architecture = parse_architecture(v);
         },
         [](const C& c) { return architecture_name(c.model.architecture); }});
    add("model.vocab",
        {[](C& c, const std::string& k, const std::string& v) {
           c.model.transformer.vocab = c.model.las.vocab = parse_number<std::size_t>(k, v);
         },
         [](const C& c) { return std::to_string(c.model.vocab()); }});
    add("frontend.input_dim",
        {[](C& c, const std::string& k, const std::string& v) {
           c.model.transformer.frontend.input_dim = c.model.las.frontend.input_dim =
               parse_number<std::size_t>(k, v);
         },
         [](const C& c) { return std::to_string(c.model.transformer.frontend.input_dim); }});
    add("frontend.channels",
        {[](C& c, const std::string& k, const std::string& v) {
           c.model.transformer.frontend.channels = c.model.las.frontend.channels =
               parse_list(k, v);
         },
         [](const C& c) { return join(c.model.transformer.frontend.channels); }});
    add("relaxation.mode",
        {[](C& c, const std::string& k, const std::string& v) {
           RelaxationMode m;
           if (v == "fixed") {
             m = RelaxationMode::kFixed;
           } else if (v == "learned") {
             m = RelaxationMode::kLearned;
           } else {
             throw ConfigError("config: '" + k + "' expects fixed or learned");
           }
           c.model.transformer.relaxation.mode = c.model.las.relaxation.mode = m;
         },
         [](const C& c) {
           return std::string(c.model.relaxation().mode == RelaxationMode::kLearned
                                  ? "learned"
                                  : "fixed");
         }});
    add("relaxation.gamma",
        {[](C& c, const std::string& k, const std::string& v) {
           c.model.transformer.relaxation.gamma = c.model.las.relaxation.gamma =
               parse_number<double>(k, v);
         },
         [](const C& c) { return fmt_double(c.model.relaxation().gamma); }});

#define RAED_T(key, T, expr) add(key, number<T>([](auto& c) -> auto& { return expr; }))
#define RAED_B(key, expr) add(key, boolean([](auto& c) -> auto& { return expr; }))
    RAED_T("transformer.encoder_blocks", std::size_t, c.model.transformer.encoder_blocks);
    RAED_T("transformer.decoder_blocks", std::size_t, c.model.transformer.decoder_blocks);
    RAED_T("transformer.width", std::size_t, c.model.transformer.width);
    RAED_T("transformer.heads", std::size_t, c.model.transformer.heads);
    RAED_T("transformer.dropout", double, c.model.transformer.dropout);
    RAED_T("transformer.attention_dropout", double, c.model.transformer.attention_dropout);
    RAED_T("transformer.max_positions", std::size_t, c.model.transformer.max_positions);
    RAED_T("las.encoder_dim", std::size_t, c.model.las.encoder_dim);
    RAED_T("las.attention_dim", std::size_t, c.model.las.attention_dim);
    RAED_T("las.decoder_dim", std::size_t, c.model.las.decoder_dim);
    RAED_T("las.embedding_dim", std::size_t, c.model.las.embedding_dim);
    RAED_T("las.encoder_blocks", std::size_t, c.model.las.encoder_blocks);
    RAED_T("las.decoder_blocks", std::size_t, c.model.las.decoder_blocks);
    RAED_T("las.dropout", double, c.model.las.dropout);
    RAED_B("las.bidirectional", c.model.las.bidirectional);

    RAED_T("train.seed", std::uint64_t, c.train.seed);
    RAED_T("train.epochs", std::size_t, c.train.epochs);
    RAED_T("train.batch_size", std::size_t, c.train.batch_size);
    RAED_T("train.peak_lr", double, c.train.schedule.peak);
    RAED_T("train.floor_scale", double, c.train.schedule.floor_scale);
    RAED_T("train.warmup", double, c.train.schedule.warmup);
    RAED_T("train.hold", double, c.train.schedule.hold);
    RAED_T("train.decay", double, c.train.schedule.decay);
    RAED_T("train.label_smoothing", double, c.train.label_smoothing);
    RAED_T("train.adam_beta1", double, c.train.adam.beta1);
    RAED_T("train.adam_beta2", double, c.train.adam.beta2);
    RAED_T("train.adam_eps", double, c.train.adam.eps);
    RAED_T("train.grad_clip", double, c.train.grad_clip);
    RAED_B("train.keep_epoch_checkpoints", c.train.keep_epoch_checkpoints);
    RAED_T("train.max_validation", std::size_t, c.train.max_validation);
    add("train.selection",
        {[](C& c, const std::string& k, const std::string& v) {
           if (v == "ter") {
             c.train.selection = Selection::kTokenErrorRate;
           } else if (v == "wer_lm") {
             c.train.selection = Selection::kLmWordErrorRate;
           } else {
             throw ConfigError("config: '" + k + "' expects ter or wer_lm");
           }
         },
         [](const C& c) {
           return std::string(c.train.selection == Selection::kTokenErrorRate ? "ter"
                                                                              : "wer_lm");
         }});
    RAED_B("spec_augment.enabled", c.train.spec_augment.enabled);
    RAED_T("spec_augment.time_masks", std::size_t, c.train.spec_augment.time_masks);
    RAED_T("spec_augment.time_width", std::size_t, c.train.spec_augment.time_width);
    RAED_T("spec_augment.freq_masks", std::size_t, c.train.spec_augment.freq_masks);
    RAED_T("spec_augment.freq_width", std::size_t, c.train.spec_augment.freq_width);

    RAED_T("decode.lm_weight", double, c.decode.lm_weight);
    RAED_T("decode.beam", std::size_t, c.decode.beam);
    add("decode.eos_rule",
        {[](C& c, const std::string& k, const std::string& v) {
           if (v == "none") {
             c.decode.eos_rule = EosRule::kNone;
           } else if (v == "threshold") {
             c.decode.eos_rule = EosRule::kThreshold;
           } else {
             throw ConfigError("config: '" + k + "' expects none or threshold");
           }
         },
         [](const C& c) {
           return std::string(c.decode.eos_rule == EosRule::kNone ? "none" : "threshold");
         }});
    RAED_T("decode.eos_threshold", double, c.decode.eos_threshold);
    RAED_B("decode.length_normalization", c.decode.length_normalization);
    RAED_T("decode.max_length_ratio", double, c.decode.max_length_ratio);
    RAED_T("decode.max_length", std::size_t, c.decode.max_length);
    RAED_T("decode.nbest", std::size_t, c.decode.nbest);

    RAED_T("lm.embedding_dim", std::size_t, c.lm.embedding_dim);
    RAED_T("lm.hidden", std::size_t, c.lm.hidden);
    RAED_T("lm.layers", std::size_t, c.lm.layers);
    RAED_T("lm.epochs", std::size_t, c.lm.epochs);
    RAED_T("lm.batch_size", std::size_t, c.lm.batch_size);
    RAED_T("lm.lr", double, c.lm.lr);
    RAED_T("lm.grad_clip", double, c.lm.grad_clip);
    RAED_T("lm.seed", std::uint64_t, c.lm.seed);

    RAED_T("data.tokens", std::size_t, c.data.tokens);
    RAED_T("data.frames_per_token", std::size_t, c.data.frames_per_token);
    RAED_T("data.jitter", std::size_t, c.data.jitter);
    RAED_T("data.feature_dim", std::size_t, c.data.feature_dim);
    RAED_T("data.noise", double, c.data.noise);
    RAED_T("data.min_prototype_distance", double, c.data.min_prototype_distance);
    RAED_T("data.prototype_retries", std::size_t, c.data.prototype_retries);
    RAED_T("data.grammar_successors", std::size_t, c.data.grammar_successors);
    RAED_T("data.grammar_peak", double, c.data.grammar_peak);
    RAED_T("data.min_length", std::size_t, c.data.min_length);
    RAED_T("data.max_length", std::size_t, c.data.max_length);
    RAED_T("data.train_size", std::size_t, c.data.train_size);
    RAED_T("data.dev_size", std::size_t, c.data.dev_size);
    RAED_T("data.test_size", std::size_t, c.data.test_size);
    RAED_T("data.seed", std::uint64_t, c.data.seed);
#undef RAED_T
#undef RAED_B
    return t;
  }();
  return table;
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  decode.validate();
  data.validate();
  LmConfig l = lm;
  l.vocab = model.vocab();
  l.validate();
}

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: line " + std::to_string(e.line()) + ": " + e.message());
  }
  std::map<std::string, const Field*> by_key;
  for (const auto& [key, field] : fields()) by_key[key] = &field;
  ExperimentConfig c;
  for (const auto& [section, body] : tree) {
    if (!body.data().empty())
      throw ConfigError("config: key '" + section + "' outside any section");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      auto it = by_key.find(full);
      if (it == by_key.end()) throw ConfigError("config: unknown key '" + full + "'");
      it->second->set(c, full, value.data());
    }
  }
  c.lm.vocab = c.model.vocab();
  c.validate();
  return c;
}

ExperimentConfig read_config(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_config(std::string(bytes.begin(), bytes.end()));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string format_config(const ExperimentConfig& config) {
  std::string out, section;
  for (const auto& [key, field] : fields()) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      out += (out.empty() ? "" : "\n") + ("[" + sec + "]\n");
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + field.get(config) + "\n";
  }
  return out;
}

void write_config(const std::filesystem::path& path, const ExperimentConfig& config) {
  const std::string s = format_config(config);
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()),
                                   s.size()));
}

void set_relaxation(ModelConfig& config, double gamma, bool learned) {
  for (RelaxationConfig* r : {&config.transformer.relaxation, &config.las.relaxation}) {
    r->gamma = gamma;
    r->mode = learned ? RelaxationMode::kLearned : RelaxationMode::kFixed;
  }
}

}  // namespace raed
