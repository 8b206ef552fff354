// SPDX-License-Identifier: Apache-2.0
//
// Loss, learning-rate schedule and optimizer shared by model and LM training.

#ifndef RAED_OPTIM_HPP
#define RAED_OPTIM_HPP

#include <span>
#include <vector>

#include "raed/checkpoint.hpp"
#include "raed/nn.hpp"
#include "raed/tensor.hpp"

namespace raed {

// Mean over non-pad positions of -sum_c q(c) log p(c), where
// q = (1 - epsilon) onehot + epsilon / D. Takes log-probabilities [L x D].
// Positions whose target equals pad_id are skipped.
Tensor smoothed_cross_entropy(const Tensor& log_probs, std::span<const int> targets,
                              double epsilon, int pad_id = 0);
// Sum instead of mean, for batching across utterances.
Tensor smoothed_cross_entropy_sum(const Tensor& log_probs,
                                  std::span<const int> targets, double epsilon,
                                  int pad_id = 0);

struct TriStageSchedule {
  double peak = 1e-3;
  double floor_scale = 0.01;  // floor = peak * floor_scale
  double warmup = 0.1, hold = 0.4, decay = 0.5;  // fractions of total steps
  std::size_t total_steps = 1;

  double floor() const { return peak * floor_scale; }
  void validate() const;
};

// Linear floor -> peak, constant peak, then exponential peak -> floor.
double tri_stage_lr(std::size_t step, const TriStageSchedule& s);

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.98, eps = 1e-9;
};

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;  // parallel to the parameter table

  void init(const ParameterTable& params);
  NamedTensors to_tensors(const ParameterTable& params) const;
  void from_tensors(const ParameterTable& params, const NamedTensors& tensors);
};

// Bias-corrected Adam over every table entry. ValueError when a parameter
// has no gradient.
void adam_step(ParameterTable& params, AdamState& state, double lr,
               const AdamConfig& config);

double global_grad_norm(const ParameterTable& params);
// Rescales gradients to max_norm when their global norm exceeds it and
// returns the norm measured before clipping. max_norm <= 0 disables.
double clip_grad_norm(ParameterTable& params, double max_norm);

}  // namespace raed

#endif  // RAED_OPTIM_HPP
