// Copyright 2026 The revmetro Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// First-order Krotov optimization of piecewise-constant controls for a set of
// state-to-state transfers, with the functional
//
//   J_T = 1 - (1/N_c) sum_k |<target_k | phi_k(T)>|^2
//
// Each iteration backward-propagates the co-states chi_k from
// chi_k(T) = (1/N_c) <target_k|phi_k(T)> |target_k> under the previous pulse,
// then sweeps forward in time, updating sample n of every active channel as
//
//   dc_l[n] = S_l(t_n) / lambda_l * sum_k Im <chi_k | dH/dc_l | phi_k>
//
// before propagating phi_k across interval n with the updated sample.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "revmetro/dynamics.hpp"
#include "revmetro/errors.hpp"
#include "revmetro/hilbert.hpp"

namespace revmetro {

inline constexpr double kPairOrthonormalityTolerance = 1e-10;
inline constexpr double kMonotonicityTolerance = 1e-10;

struct StatePair {
  PureState initial;
  PureState target;
};

namespace detail {
inline double gram_defect(const std::vector<const PureState*>& states) {
  double worst = 0.0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    for (std::size_t j = 0; j < states.size(); ++j) {
      const Complex g = inner(*states[i], *states[j]);
      worst = std::max(worst, std::abs(g - (i == j ? 1.0 : 0.0)));
    }
  }
  return worst;
}
}  // namespace detail

/// Initial -> target pairs on a fixed grid. Both sets must be orthonormal,
/// otherwise no unitary can realize all transfers at once.
class ControlProblem {
 public:
  ControlProblem(std::vector<StatePair> pairs, DriftSpec drift, double t_final, int n_steps)
      : pairs_(std::move(pairs)), drift_(drift), t_final_(t_final), n_steps_(n_steps) {
    if (pairs_.empty()) throw InvalidArgument("control problem needs at least one state pair");
    drift_.validate();
    if (!(t_final_ > 0.0) || n_steps_ <= 0) throw InvalidArgument("control problem needs t_final > 0, n_steps > 0");
    std::vector<const PureState*> init, tgt;
    for (const auto& p : pairs_) {
      require_same_space(pairs_.front().initial.space(), p.initial.space(), "ControlProblem");
      require_same_space(pairs_.front().initial.space(), p.target.space(), "ControlProblem");
      init.push_back(&p.initial);
      tgt.push_back(&p.target);
    }
    if (const double d = detail::gram_defect(init); d > kPairOrthonormalityTolerance) {
      throw InvalidArgument("initial states are not orthonormal (Gram defect " + std::to_string(d) + ")");
    }
    if (const double d = detail::gram_defect(tgt); d > kPairOrthonormalityTolerance) {
      throw InvalidArgument("target states are not orthonormal (Gram defect " + std::to_string(d) + ")");
    }
  }

  const std::vector<StatePair>& pairs() const { return pairs_; }
  const SpaceDescriptor& space() const { return pairs_.front().initial.space(); }
  const DriftSpec& drift() const { return drift_; }
  double t_final() const { return t_final_; }
  int n_steps() const { return n_steps_; }
  std::size_t size() const { return pairs_.size(); }

 private:
  std::vector<StatePair> pairs_;
  DriftSpec drift_;
  double t_final_;
  int n_steps_;
};

/// Update envelope: sin^2 ramps on [0, rT] and [(1-r)T, T], 1 in between.
inline double shape_function(double ramp_fraction, double t, double t_final) {
  if (!(ramp_fraction > 0.0 && ramp_fraction < 0.5)) throw InvalidArgument("ramp fraction must lie in (0, 0.5)");
  if (t <= 0.0 || t >= t_final) return 0.0;
  const double ramp = ramp_fraction * t_final;
  const double quarter = std::acos(0.0);  // pi/2
  if (t < ramp) return std::pow(std::sin(quarter * t / ramp), 2);
  if (t > t_final - ramp) return std::pow(std::sin(quarter * (t_final - t) / ramp), 2);
  return 1.0;
}

/// Guess controls: f_x = B S(t) cos(w t), f_z = b S(t), g1 = g2 = A S(t).
/// The defaults put the TLS on resonance with mode 1 (b = -omega1/2) and drive it
/// at omega1. With f_x = 0 the vacuum is dark, and with a static f_x the
/// vacuum pair has no overlap with a NOON target for N >= 3, which leaves its
/// co-state at zero.
struct GuessSpec {
  double coupling_amplitude = 0.1;
  double drive_amplitude = 0.2;
  double drive_frequency = 1.0;
  double bias = -0.5;
  std::optional<std::uint64_t> seed;  // set to add a reproducible random perturbation
  double perturbation = 0.01;
};

struct KrotovConfig {
  std::array<double, kNumChannels> lambda_a{0.3, 0.3, 0.3, 0.3};
  std::array<bool, kNumChannels> active{true, true, true, true};
  double ramp_fraction = 0.1;
  int max_iters = 5000;
  double target_infidelity = 1e-3;
  double stagnation_threshold = 1e-9;
  GuessSpec guess;

  void validate() const {
    for (int c = 0; c < kNumChannels; ++c) {
      if (!(lambda_a[c] > 0.0) || !std::isfinite(lambda_a[c])) throw InvalidArgument("lambda_a must be > 0");
    }
    if (!(target_infidelity > 0.0 && target_infidelity < 1.0)) {
      throw InvalidArgument("target infidelity must lie in (0, 1)");
    }
    if (!(ramp_fraction > 0.0 && ramp_fraction < 0.5)) throw InvalidArgument("ramp fraction must lie in (0, 0.5)");
    if (max_iters < 0) throw InvalidArgument("max_iters must be >= 0");
  }
};

inline PulseSet guess_pulse(double t_final, int n_steps, const KrotovConfig& config) {
  auto pulse = PulseSet::zeros(t_final, n_steps);
  for (int k = 0; k < n_steps; ++k) {
    const double t = pulse.t_mid(k);
    const double s = shape_function(config.ramp_fraction, t, t_final);
    pulse.channel(Channel::kFx)[k] = config.guess.drive_amplitude * s * std::cos(config.guess.drive_frequency * t);
    pulse.channel(Channel::kFz)[k] = config.guess.bias * s;
    pulse.channel(Channel::kG1)[k] = config.guess.coupling_amplitude * s;
    pulse.channel(Channel::kG2)[k] = config.guess.coupling_amplitude * s;
  }
  if (config.guess.seed) {
    std::mt19937_64 rng(*config.guess.seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int c = 0; c < kNumChannels; ++c) {
      for (int k = 0; k < n_steps; ++k) {
        const double s = shape_function(config.ramp_fraction, pulse.t_mid(k), t_final);
        pulse.channels[c][k] += config.guess.perturbation * s * u(rng);
      }
    }
  }
  for (int c = 0; c < kNumChannels; ++c) {
    if (!config.active[c]) std::fill(pulse.channels[c].begin(), pulse.channels[c].end(), 0.0);
  }
  return pulse;
}

struct IterationInfo {
  int iteration;
  double infidelity;
  double max_update;
};

enum class StopReason { kConverged, kMaxIterations, kStagnated };

struct OptimizationRecord {
  std::vector<IterationInfo> iterations;
  PulseSet final_pulse;
  bool converged = false;
  StopReason reason = StopReason::kMaxIterations;

  double final_infidelity() const { return iterations.back().infidelity; }
};

// ---------------------------------------------------------------------------
// Building blocks

inline double infidelity(const std::vector<PureState>& evolved, const std::vector<PureState>& targets) {
  if (evolved.size() != targets.size() || evolved.empty()) {
    throw InvalidArgument("infidelity needs equal, non-empty lists of evolved and target states");
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < evolved.size(); ++k) acc += std::norm(inner(targets[k], evolved[k]));
  return std::clamp(1.0 - acc / static_cast<double>(evolved.size()), 0.0, 1.0);
}

/// chi_k(T) = -dJ_T/d<phi_k(T)| = (1/N_c) <target|phi(T)> |target>, unnormalized.
inline CVector terminal_costate(const CVector& evolved, const CVector& target, std::size_t n_pairs) {
  const Complex tau = target.dot(evolved);
  return (tau / static_cast<double>(n_pairs)) * target;
}

inline CVector terminal_costate(const PureState& evolved, const PureState& target, std::size_t n_pairs) {
  require_same_space(evolved.space(), target.space(), "terminal_costate");
  return terminal_costate(evolved.amplitudes(), target.amplitudes(), n_pairs);
}

/// Spectral propagator of every interval of `pulse`.
inline std::vector<SpectralPropagator> interval_propagators(const RealHamiltonian& ham, const PulseSet& pulse) {
  std::vector<SpectralPropagator> steps;
  steps.reserve(static_cast<std::size_t>(pulse.n_steps));
  for (int k = 0; k < pulse.n_steps; ++k) steps.emplace_back(ham.at(pulse.samples(k)));
  return steps;
}

/// Co-state at grid points t_0..t_n, stepping T -> 0 with exp(+i H_k dt).
inline std::vector<CVector> backward_propagate(const CVector& costate_final,
                                               const std::vector<SpectralPropagator>& steps, double dt) {
  std::vector<CVector> chi(steps.size() + 1);
  chi.back() = costate_final;
  for (std::size_t k = steps.size(); k-- > 0;) chi[k] = steps[k].apply(chi[k + 1], -dt);
  return chi;
}

inline std::vector<CVector> backward_propagate(const CVector& costate_final, const SpaceDescriptor& space,
                                               const DriftSpec& drift, const PulseSet& pulse) {
  const RealHamiltonian ham(space, drift);
  return backward_propagate(costate_final, interval_propagators(ham, pulse), pulse.dt());
}

namespace detail {
// 4-point Gauss-Legendre on [0, 1].
inline constexpr std::array<double, 4> kGaussNodes = {0.0694318442029737, 0.3300094782075719, 0.6699905217924281,
                                                      0.9305681557970263};
inline constexpr std::array<double, 4> kGaussWeights = {0.1739274225687269, 0.3260725774312731, 0.3260725774312731,
                                                        0.1739274225687269};
}  // namespace detail

/// Interval average of <chi(s)|G_l|phi(s)> for s in [t_n, t_n + dt], where both
/// states evolve under the constant H_n of `step`: phi(s) = exp(-i H (s - t_n)) phi_n
/// and chi(s) = exp(+i H (t_n + dt - s)) chi_{n+1}. This equals
/// (i/dt) <chi_{n+1}| dU_n/dc_l |phi_n>, so -2 dt Im(...) summed over pairs is the
/// exact derivative of J_T with respect to sample n of channel l.
inline std::array<Complex, kNumChannels> interval_coupling(const SpectralPropagator& step, double dt,
                                                           const CVector& chi_next, const CVector& phi_now,
                                                           const RealHamiltonian& ham,
                                                           const std::array<bool, kNumChannels>& active) {
  std::array<Complex, kNumChannels> out{};
  const CVector x = step.to_eigenbasis(chi_next);
  const CVector y = step.to_eigenbasis(phi_now);
  const auto& e = step.energies();
  CVector xs(x.size()), ys(y.size());
  for (std::size_t q = 0; q < detail::kGaussNodes.size(); ++q) {
    const double s = detail::kGaussNodes[q] * dt;
    for (Eigen::Index b = 0; b < x.size(); ++b) {
      xs(b) = x(b) * std::polar(1.0, e(b) * (dt - s));
      ys(b) = y(b) * std::polar(1.0, -e(b) * s);
    }
    const CVector chi_s = step.from_eigenbasis(xs);
    const CVector phi_s = step.from_eigenbasis(ys);
    for (int c = 0; c < kNumChannels; ++c) {
      if (!active[c]) continue;
      const CVector g_phi = ham.sparse_generator(c) * phi_s;
      out[c] += detail::kGaussWeights[q] * chi_s.dot(g_phi);
    }
  }
  return out;
}

struct SweepOutcome {
  PulseSet pulse;
  std::vector<PureState> final_states;
  std::vector<SpectralPropagator> steps;  // propagators of the updated pulse
  double max_update = 0.0;
};

/// One sequential Krotov sweep. `prev_steps` are the propagators of `prev`,
/// `costates[k]` the backward trajectory of pair k under `prev`.
inline SweepOutcome krotov_update(const std::vector<PureState>& initial, const PulseSet& prev,
                                  const std::vector<SpectralPropagator>& prev_steps,
                                  const std::vector<std::vector<CVector>>& costates, const RealHamiltonian& ham,
                                  const KrotovConfig& config) {
  if (costates.size() != initial.size()) throw InvalidArgument("one co-state trajectory per pair required");
  for (const auto& c : costates) {
    if (c.size() != static_cast<std::size_t>(prev.n_steps) + 1) throw InvalidArgument("co-state grid mismatch");
  }
  if (prev_steps.size() != static_cast<std::size_t>(prev.n_steps)) throw InvalidArgument("propagator grid mismatch");
  const double dt = prev.dt();
  SweepOutcome out{prev, {}, {}, 0.0};
  out.steps.reserve(prev_steps.size());
  std::vector<CVector> phi;
  phi.reserve(initial.size());
  for (const auto& s : initial) phi.push_back(s.amplitudes());

  for (int n = 0; n < prev.n_steps; ++n) {
    const double shape = shape_function(config.ramp_fraction, prev.t_mid(n), prev.t_final);
    std::array<double, kNumChannels> grad{};
    if (shape > 0.0) {
      for (std::size_t k = 0; k < phi.size(); ++k) {
        const auto c = interval_coupling(prev_steps[n], dt, costates[k][n + 1], phi[k], ham, config.active);
        for (int l = 0; l < kNumChannels; ++l) grad[l] += c[l].imag();
      }
    }
    for (int l = 0; l < kNumChannels; ++l) {
      if (!config.active[l]) continue;
      const double delta = shape / config.lambda_a[l] * grad[l];
      out.pulse.channels[l][n] += delta;
      out.max_update = std::max(out.max_update, std::abs(delta));
    }
    out.steps.emplace_back(ham.at(out.pulse.samples(n)));
    for (auto& v : phi) v = out.steps.back().apply(v, dt);
  }
  for (auto& v : phi) out.final_states.push_back(detail::checked_state(ham.space(), std::move(v), prev.n_steps));
  return out;
}

/// Forward-propagates each initial state through `steps` to the final time.
inline std::vector<PureState> propagate_final(const std::vector<PureState>& initial,
                                              const std::vector<SpectralPropagator>& steps, double dt) {
  std::vector<PureState> out;
  for (const auto& s : initial) {
    CVector v = s.amplitudes();
    for (const auto& st : steps) v = st.apply(v, dt);
    out.push_back(detail::checked_state(s.space(), std::move(v), static_cast<int>(steps.size())));
  }
  return out;
}

/// Called after every iteration; return false to stop early.
using IterationObserver = std::function<bool(const IterationInfo&)>;

inline OptimizationRecord optimize(const ControlProblem& problem, const KrotovConfig& config,
                                   std::optional<PulseSet> guess = std::nullopt,
                                   const IterationObserver& observer = {}) {
  config.validate();
  const RealHamiltonian ham(problem.space(), problem.drift());
  std::vector<PureState> initial, targets;
  for (const auto& p : problem.pairs()) {
    initial.push_back(p.initial);
    targets.push_back(p.target);
  }

  OptimizationRecord record;
  record.final_pulse = guess ? *guess : guess_pulse(problem.t_final(), problem.n_steps(), config);
  record.final_pulse.validate();
  if (record.final_pulse.n_steps != problem.n_steps() ||
      std::abs(record.final_pulse.t_final - problem.t_final()) > 1e-12 * problem.t_final()) {
    throw InvalidArgument("guess pulse grid does not match the control problem");
  }
  const double dt = record.final_pulse.dt();

  auto steps = interval_propagators(ham, record.final_pulse);
  auto finals = propagate_final(initial, steps, dt);
  double j_t = infidelity(finals, targets);
  record.iterations.push_back({0, j_t, 0.0});
  if (observer && !observer(record.iterations.back())) return record;
  if (j_t <= config.target_infidelity) {
    record.converged = true;
    record.reason = StopReason::kConverged;
    return record;
  }

  for (int it = 1; it <= config.max_iters; ++it) {
    std::vector<std::vector<CVector>> costates;
    costates.reserve(initial.size());
    for (std::size_t k = 0; k < initial.size(); ++k) {
      costates.push_back(backward_propagate(terminal_costate(finals[k], targets[k], initial.size()), steps, dt));
    }
    auto sweep = krotov_update(initial, record.final_pulse, steps, costates, ham, config);
    const double j_new = infidelity(sweep.final_states, targets);
    if (j_new > j_t + kMonotonicityTolerance) {
      throw ConvergenceError("Krotov iteration " + std::to_string(it) + " increased J_T from " +
                             std::to_string(j_t) + " to " + std::to_string(j_new) +
                             "; increase lambda_a or refine the time grid");
    }
    record.final_pulse = std::move(sweep.pulse);
    steps = std::move(sweep.steps);
    finals = std::move(sweep.final_states);
    j_t = j_new;
    record.iterations.push_back({it, j_t, sweep.max_update});
    if (j_t <= config.target_infidelity) {
      record.converged = true;
      record.reason = StopReason::kConverged;
      return record;
    }
    if (sweep.max_update < config.stagnation_threshold) {
      record.reason = StopReason::kStagnated;
      return record;
    }
    if (observer && !observer(record.iterations.back())) return record;
  }
  record.reason = StopReason::kMaxIterations;
  return record;
}

}  // namespace revmetro
