// SPDX-License-Identifier: Apache-2.0

#include "raed/optim.hpp"

#include <cmath>
#include <map>

#include "raed/error.hpp"

namespace raed {

Tensor smoothed_cross_entropy_sum(const Tensor& log_probs,
                                  std::span<const int> targets, double epsilon,
                                  int pad_id) {
  if (!(epsilon >= 0.0 && epsilon < 1.0))
    throw ValueError("label smoothing must lie in [0, 1)");
  if (log_probs.rank() != 2 || log_probs.dim(0) != targets.size())
    throw ShapeError("cross entropy: " + shape_str(log_probs.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  const std::size_t rows = log_probs.dim(0), d = log_probs.dim(1);
  std::vector<double> q(rows * d, 0.0);
  for (std::size_t l = 0; l < rows; ++l) {
    const int y = targets[l];
    if (y < 0 || static_cast<std::size_t>(y) >= d)
      throw ValueError("cross entropy: target " + std::to_string(y) +
                       " outside vocabulary of size " + std::to_string(d));
    if (y == pad_id) continue;
    for (std::size_t c = 0; c < d; ++c) q[l * d + c] = epsilon / static_cast<double>(d);
    q[l * d + y] += 1.0 - epsilon;
  }
  return neg(sum(mul(log_probs, Tensor({rows, d}, std::move(q)))));
}

Tensor smoothed_cross_entropy(const Tensor& log_probs, std::span<const int> targets,
                              double epsilon, int pad_id) {
  std::size_t count = 0;
  for (int y : targets) count += y != pad_id;
  if (count == 0) throw ValueError("cross entropy: every target is padding");
  return scale(smoothed_cross_entropy_sum(log_probs, targets, epsilon, pad_id),
               1.0 / static_cast<double>(count));
}

void TriStageSchedule::validate() const {
  if (!(peak > 0.0)) throw ConfigError("schedule: peak learning rate must be > 0");
  if (!(floor_scale > 0.0 && floor_scale <= 1.0))
    throw ConfigError("schedule: floor_scale must lie in (0, 1]");
  if (warmup < 0.0 || hold < 0.0 || decay < 0.0 ||
      std::abs(warmup + hold + decay - 1.0) > 1e-9)
    throw ConfigError("schedule: stage fractions must be >= 0 and sum to 1");
  if (total_steps == 0) throw ConfigError("schedule: total_steps >= 1");
}

double tri_stage_lr(std::size_t step, const TriStageSchedule& s) {
  const double n = static_cast<double>(s.total_steps);
  const double w = s.warmup * n, h = s.hold * n, k = s.decay * n;
  const double t = static_cast<double>(step);
  if (t < w) return s.floor() + (s.peak - s.floor()) * t / w;
  if (t < w + h) return s.peak;
  if (k <= 0.0) return s.floor();
  const double frac = std::min(1.0, (t - w - h) / k);
  return s.peak * std::pow(s.floor_scale, frac);
}

void AdamState::init(const ParameterTable& params) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& [name, t] : params.entries()) {
    m.emplace_back(t.numel(), 0.0);
    v.emplace_back(t.numel(), 0.0);
  }
}

NamedTensors AdamState::to_tensors(const ParameterTable& params) const {
  NamedTensors out;
  const auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out.emplace_back("adam.m/" + entries[i].first, Tensor(entries[i].second.shape(), m[i]));
    out.emplace_back("adam.v/" + entries[i].first, Tensor(entries[i].second.shape(), v[i]));
  }
  out.emplace_back("adam.step", Tensor({1}, {static_cast<double>(step)}));
  return out;
}

void AdamState::from_tensors(const ParameterTable& params,
                             const NamedTensors& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  auto fetch = [&](const std::string& name, const Shape& shape) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("optimizer state lacks '" + name + "'");
    if (it->second->shape() != shape)
      throw FormatError("optimizer state '" + name + "' has the wrong shape");
    return std::vector<double>(it->second->data().begin(), it->second->data().end());
  };
  init(params);
  const auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    m[i] = fetch("adam.m/" + entries[i].first, entries[i].second.shape());
    v[i] = fetch("adam.v/" + entries[i].first, entries[i].second.shape());
  }
  step = static_cast<std::size_t>(fetch("adam.step", {1})[0]);
}

void adam_step(ParameterTable& params, AdamState& state, double lr,
               const AdamConfig& config) {
  const auto& entries = params.entries();
  if (state.m.size() != entries.size()) state.init(params);
  for (const auto& [name, t] : entries)
    if (!t.has_grad()) throw ValueError("adam: parameter '" + name + "' has no gradient");
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor p = entries[i].second;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

double global_grad_norm(const ParameterTable& params) {
  double s = 0.0;
  for (const auto& [name, t] : params.entries())
    if (t.has_grad())
      for (double g : t.grad()) s += g * g;
  return std::sqrt(s);
}

double clip_grad_norm(ParameterTable& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& [name, t] : params.entries()) {
      if (!t.has_grad()) continue;
      for (double& g : Tensor(t).mutable_grad()) g *= f;
    }
  }
  return norm;
}

}  // namespace raed
