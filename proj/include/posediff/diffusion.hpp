// Copyright 2026 The posediff Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "posediff/errors.hpp"

namespace posediff {

enum class ScheduleKind { kLinear, kCosine };

/// Per-timestep coefficients, indexed by t in [1, T].
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::kLinear;
  int steps = 0;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
  std::vector<double> sigma_;

  double beta(int t) const { return beta_.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_.at(static_cast<std::size_t>(t - 1)); }
  double sigma(int t) const { return sigma_.at(static_cast<std::size_t>(t - 1)); }
};

inline NoiseSchedule make_schedule(ScheduleKind kind, int steps, double beta_min, double beta_max) {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
    throw ConfigError("schedule bounds must satisfy 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.kind = kind;
  s.steps = steps;
  s.beta_.resize(static_cast<std::size_t>(steps));
  if (kind == ScheduleKind::kLinear) {
    for (int i = 0; i < steps; ++i) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
      s.beta_[static_cast<std::size_t>(i)] = beta_min + frac * (beta_max - beta_min);
    }
  } else {
    // Squared-cosine cumulative profile with offset 0.008.
    constexpr double off = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / steps + off) / (1.0 + off) * 3.14159265358979323846 / 2.0);
      return c * c;
    };
    for (int i = 1; i <= steps; ++i) {
      const double b = 1.0 - f(i) / f(i - 1);
      s.beta_[static_cast<std::size_t>(i - 1)] = std::clamp(b, beta_min, 0.999);
    }
  }
  s.alpha_bar_.resize(s.beta_.size());
  s.sigma_.resize(s.beta_.size());
  double acc = 1.0;
  for (std::size_t i = 0; i < s.beta_.size(); ++i) {
    acc *= 1.0 - s.beta_[i];
    s.alpha_bar_[i] = acc;
    s.sigma_[i] = i == 0 ? 0.0 : std::sqrt(s.beta_[i]);
  }
  return s;
}

/// Schedule parameters as carried in configs and checkpoints.
struct DiffusionConfig {
  ScheduleKind kind = ScheduleKind::kLinear;
  int steps = 100;
  double beta_min = 1e-4;
  double beta_max = 0.2;  // 0.02 leaves alpha_bar_T = 0.37 at T = 100

  NoiseSchedule make() const { return make_schedule(kind, steps, beta_min, beta_max); }
};

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::kLinear;
  if (s == "cosine") return ScheduleKind::kCosine;
  throw ConfigError("unknown schedule kind '" + s + "'");
}

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::kLinear ? "linear" : "cosine"; }

inline void check_timestep(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.steps) throw ContractViolation("timestep out of range");
}

/// Marginal corruption M_t = sqrt(abar_t)·M_0 + sqrt(1 − abar_t)·eps.
inline std::vector<double> forward_noise(std::span<const double> m0, int t, std::span<const double> eps,
                                         const NoiseSchedule& s) {
  if (m0.size() != eps.size()) throw ContractViolation("forward_noise: shape mismatch");
  check_timestep(s, t);
  const double a = std::sqrt(s.alpha_bar(t));
  const double b = std::sqrt(1.0 - s.alpha_bar(t));
  std::vector<double> out(m0.size());
  for (std::size_t i = 0; i < m0.size(); ++i) out[i] = a * m0[i] + b * eps[i];
  return out;
}

/// Noise implied by a clean-map prediction at timestep t.
inline double implied_noise(double mt, double m0_hat, int t, const NoiseSchedule& s) {
  return (mt - std::sqrt(s.alpha_bar(t)) * m0_hat) / std::sqrt(1.0 - s.alpha_bar(t));
}

/// One ancestral step M_t -> M_{t-1}:
///   M_{t-1} = (M_t − sqrt(1 − a_t)·eps_hat) / sqrt(a_t) + sigma_t·z
/// with per-step a_t = 1 − beta_t and eps_hat recovered from the clean-map
/// prediction. At t = 1 the result equals m0_hat and z is ignored.
inline std::vector<double> reverse_step(std::span<const double> mt, std::span<const double> m0_hat, int t,
                                        std::span<const double> z, const NoiseSchedule& s) {
  check_timestep(s, t);
  if (mt.size() != m0_hat.size() || mt.size() != z.size()) throw ContractViolation("reverse_step: shape mismatch");
  const double a = 1.0 - s.beta(t);
  const double c_eps = std::sqrt(s.beta(t));
  const double inv_sqrt_a = 1.0 / std::sqrt(a);
  const double sigma = t > 1 ? s.sigma(t) : 0.0;
  std::vector<double> out(mt.size());
  if (t == 1) {
    // Algebraically exact: sqrt(1 − abar_1) = sqrt(beta_1) collapses the update.
    for (std::size_t i = 0; i < mt.size(); ++i) out[i] = m0_hat[i];
    return out;
  }
  for (std::size_t i = 0; i < mt.size(); ++i) {
    const double eps_hat = implied_noise(mt[i], m0_hat[i], t, s);
    out[i] = (mt[i] - c_eps * eps_hat) * inv_sqrt_a + sigma * z[i];
  }
  return out;
}

/// Clean-map predictor: (noisy state, timestep) -> predicted clean state.
using Denoiser = std::function<std::vector<double>(std::span<const double>, int)>;

template <class Rng>
void fill_normal(std::span<double> out, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : out) v = n(rng);
}

/// Ancestral sampling from N(0, I) at t = T down to t = 1. The state layout is
/// opaque here; callers pack all pose maps of one query into one vector.
inline std::vector<double> sample(const Denoiser& denoiser, std::size_t state_size, const NoiseSchedule& s,
                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> state(state_size);
  fill_normal(state, rng);
  std::vector<double> z(state_size);
  for (int t = s.steps; t >= 1; --t) {
    std::vector<double> m0_hat = denoiser(state, t);
    if (m0_hat.size() != state_size) throw ContractViolation("denoiser returned wrong state size");
    for (double v : m0_hat)
      if (!std::isfinite(v)) throw NumericError("non-finite denoiser output at timestep " + std::to_string(t));
    if (t > 1) fill_normal(z, rng);
    state = reverse_step(state, m0_hat, t, z, s);
  }
  return state;
}

}  // namespace posediff
