// SPDX-License-Identifier: Apache-2.0
//
// Sectioned key=value configuration covering models, training, decoding,
// the toy LM and the synthetic corpus. Sections and keys are listed by
// write_config; unknown sections or keys are rejected.

#ifndef RAED_CONFIG_HPP
#define RAED_CONFIG_HPP

#include <filesystem>
#include <string>

#include "raed/data.hpp"
#include "raed/decode.hpp"
#include "raed/model.hpp"
#include "raed/train.hpp"

namespace raed {

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  FusionConfig decode;
  LmConfig lm;
  ToyTaskSpec data;

  void validate() const;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig read_config(const std::filesystem::path& path);
std::string format_config(const ExperimentConfig& config);
void write_config(const std::filesystem::path& path, const ExperimentConfig& config);

// Applies a relaxation coefficient to whichever architecture is active.
void set_relaxation(ModelConfig& config, double gamma, bool learned);

}  // namespace raed

#endif  // RAED_CONFIG_HPP
