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

// Photon loss during phase acquisition, L_j = lambda_j a_j, unraveled to first
// order into a no-jump branch and one single-photon jump per mode. At most one
// photon is lost. With the adapted control (|1,N,0> -> |0,N-1,0> and
// |1,0,N> -> |0,0,N-1> in addition to the NOON pairs), the time reversal sends
// every jump branch into the TLS-excited sector, where a projective measurement
// of the TLS can discard it.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "revmetro/dynamics.hpp"
#include "revmetro/errors.hpp"
#include "revmetro/hilbert.hpp"
#include "revmetro/krotov.hpp"
#include "revmetro/metrology.hpp"

namespace revmetro {

/// Largest single-jump probability accepted when probabilities come from rates.
inline constexpr double kFirstOrderJumpLimit = 0.1;
/// Eigenvalues below this are outside the support of a mixed state.
inline constexpr double kSupportThreshold = 1e-12;
inline constexpr double kComponentOrthogonality = 1e-10;

struct JumpProbabilities {
  double p0 = 1.0;
  double p1 = 0.0;
  double p2 = 0.0;
};

/// Either fixed branch probabilities (p0, p1, p2) or rates (lambda1, lambda2)
/// applied over a phase-acquisition window dt.
///
/// With fixed probabilities the no-jump branch is taken to be the input state
/// itself. That is exact whenever the state is an eigenvector of H_eff, as a
/// NOON state is for equal rates.
class LossSpec {
 public:
  static LossSpec from_probabilities(double p0, double p1, double p2) {
    if (!(p0 >= 0.0 && p1 >= 0.0 && p2 >= 0.0)) throw InvalidArgument("jump probabilities must be >= 0");
    if (std::abs(p0 + p1 + p2 - 1.0) > 1e-12) throw InvalidArgument("jump probabilities must sum to 1");
    LossSpec s;
    s.probabilities_ = JumpProbabilities{p0, p1, p2};
    return s;
  }

  static LossSpec from_rates(double lambda1, double lambda2, double dt) {
    if (!(lambda1 >= 0.0 && lambda2 >= 0.0) || !std::isfinite(lambda1) || !std::isfinite(lambda2)) {
      throw InvalidArgument("loss couplings must be finite and >= 0");
    }
    if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidArgument("loss window dt must be > 0");
    LossSpec s;
    s.lambda1_ = lambda1;
    s.lambda2_ = lambda2;
    s.dt_ = dt;
    return s;
  }

  bool has_rates() const { return !probabilities_.has_value(); }
  double lambda1() const { return lambda1_; }
  double lambda2() const { return lambda2_; }
  double dt() const { return dt_; }
  const std::optional<JumpProbabilities>& fixed_probabilities() const { return probabilities_; }

 private:
  LossSpec() = default;
  std::optional<JumpProbabilities> probabilities_;
  double lambda1_ = 0.0;
  double lambda2_ = 0.0;
  double dt_ = 0.0;
};

/// H_eff = -(i/2) sum_j L_j^dag L_j = -(i/2)(lambda1^2 n1 + lambda2^2 n2).
inline OperatorMatrix effective_hamiltonian(const SpaceDescriptor& space, double lambda1, double lambda2) {
  CMatrix h = CMatrix::Zero(space.dim(), space.dim());
  for (Eigen::Index i = 0; i < space.dim(); ++i) {
    const auto l = space.label(i);
    h(i, i) = Complex(0.0, -0.5 * (lambda1 * lambda1 * l.n1 + lambda2 * lambda2 * l.n2));
  }
  return OperatorMatrix(space, std::move(h));
}

namespace detail {
/// Branch operators [K0, K1, K2]. Rates: K0 = 1 - i H_eff dt, K_j = sqrt(dt) L_j.
/// Fixed probabilities: identity and bare a_j, only the direction matters.
inline std::array<CMatrix, 3> branch_operators(const SpaceDescriptor& space, const LossSpec& loss) {
  const CMatrix a1 = embed(annihilation(space.cutoff1()), Slot::kMode1, space).entries();
  const CMatrix a2 = embed(annihilation(space.cutoff2()), Slot::kMode2, space).entries();
  const CMatrix id = CMatrix::Identity(space.dim(), space.dim());
  if (!loss.has_rates()) return {id, a1, a2};
  const double dt = loss.dt();
  const CMatrix k0 = id - Complex(0.0, 1.0) * dt * effective_hamiltonian(space, loss.lambda1(), loss.lambda2()).entries();
  return {k0, std::sqrt(dt) * loss.lambda1() * a1, std::sqrt(dt) * loss.lambda2() * a2};
}

inline JumpProbabilities branch_probabilities(const std::array<CMatrix, 3>& ops, const LossSpec& loss,
                                              const CVector& psi) {
  if (const auto& fixed = loss.fixed_probabilities()) return *fixed;
  JumpProbabilities p;
  p.p1 = (ops[1] * psi).squaredNorm();
  p.p2 = (ops[2] * psi).squaredNorm();
  if (p.p1 > kFirstOrderJumpLimit || p.p2 > kFirstOrderJumpLimit) {
    throw InvalidArgument("jump probability exceeds " + std::to_string(kFirstOrderJumpLimit) +
                          "; the single-jump expansion is invalid, use a smaller dt");
  }
  p.p0 = 1.0 - p.p1 - p.p2;
  return p;
}
}  // namespace detail

/// rho(dt) ~ sum_j K_j |psi><psi| K_j^dag as {(p0, chi0), (p1, chi1), (p2, chi2)}.
/// Zero-probability branches are omitted.
inline Ensemble jump_decompose(const PureState& state, const LossSpec& loss) {
  const auto& space = state.space();
  const auto ops = detail::branch_operators(space, loss);
  const auto p = detail::branch_probabilities(ops, loss, state.amplitudes());
  const std::array<double, 3> w{p.p0, p.p1, p.p2};
  std::vector<Ensemble::Component> comps;
  for (int j = 0; j < 3; ++j) {
    if (w[j] == 0.0) continue;
    CVector v = ops[j] * state.amplitudes();
    if (v.norm() == 0.0) throw NumericalError("branch " + std::to_string(j) + " has weight but annihilates the state");
    comps.push_back({w[j], PureState::normalized(space, std::move(v))});
  }
  return Ensemble(std::move(comps));
}

/// One explicit Euler step of the Lindblad equation from |psi><psi|.
/// Verification oracle for jump_decompose; needs rates.
inline CMatrix lindblad_euler_oracle(const PureState& state, const LossSpec& loss) {
  if (!loss.has_rates()) throw InvalidArgument("Lindblad oracle requires loss rates and dt");
  const auto& space = state.space();
  const CMatrix rho = state.amplitudes() * state.amplitudes().adjoint();
  CMatrix drho = CMatrix::Zero(rho.rows(), rho.cols());
  const std::array<std::pair<Slot, double>, 2> channels{{{Slot::kMode1, loss.lambda1()}, {Slot::kMode2, loss.lambda2()}}};
  for (const auto& [slot, lambda] : channels) {
    const CMatrix l = lambda * embed(annihilation(space.slot_dim(slot)), slot, space).entries();
    const CMatrix ldl = l.adjoint() * l;
    drho += l * rho * l.adjoint() - 0.5 * (ldl * rho + rho * ldl);
  }
  return rho + loss.dt() * drho;
}

// ---------------------------------------------------------------------------
// Adapted control

inline std::vector<StatePair> adapted_pairs(const SpaceDescriptor& space, int n, int n_x = 0) {
  if (n_x == 0) n_x = n;
  if (n < 2) {
    throw InvalidArgument("the loss-adapted pairs need N >= 2; for N = 1 both jump targets are |0,0,0>");
  }
  if (n >= space.cutoff1() || n >= space.cutoff2()) throw InvalidArgument("Fock cutoff too small for N");
  auto pairs = noon_pairs(space, n, n_x);
  pairs.push_back({fock_state(space, 1, n, 0), fock_state(space, 0, n - 1, 0)});
  pairs.push_back({fock_state(space, 1, 0, n), fock_state(space, 0, 0, n - 1)});
  return pairs;
}

inline ControlProblem adapted_control_problem(const SpaceDescriptor& space, int n, const DriftSpec& drift,
                                              double t_final, int n_steps, int n_x = 0) {
  return ControlProblem(adapted_pairs(space, n, n_x), drift, t_final, n_steps);
}

/// Protocol whose U also routes single-photon-loss states into the TLS-excited sector.
class AdaptedProtocolSpec {
 public:
  AdaptedProtocolSpec(ProtocolSpec base, double max_infidelity = 1e-3) : base_(std::move(base)) {
    const auto pairs = adapted_pairs(base_.space(), base_.n(), base_.n_x());
    worst_overlap2_ = 1.0;
    for (std::size_t k = 2; k < pairs.size(); ++k) {
      const CVector mapped = base_.unitary().apply(pairs[k].initial);
      worst_overlap2_ = std::min(worst_overlap2_, std::norm(pairs[k].target.amplitudes().dot(mapped)));
    }
    if (worst_overlap2_ < 1.0 - max_infidelity) {
      throw InvalidArgument("unitary does not realize the loss-adapted transfers (overlap^2 " +
                            std::to_string(worst_overlap2_) + ")");
    }
  }

  static AdaptedProtocolSpec exact(const SpaceDescriptor& space, int n, int n_x = 0, std::uint64_t variant = 0) {
    if (n_x == 0) n_x = n;
    return AdaptedProtocolSpec(ProtocolSpec(n, n_x, exact_completion_unitary(adapted_pairs(space, n, n_x), variant)));
  }

  const ProtocolSpec& base() const { return base_; }
  double worst_jump_overlap2() const { return worst_overlap2_; }

 private:
  ProtocolSpec base_;
  double worst_overlap2_ = 0.0;
};

/// rho_R with, per component, the phi-derivatives of its weight and of its (normalized) state.
struct DecayedState {
  Ensemble rho;
  std::vector<double> weight_derivatives;
  std::vector<CVector> state_derivatives;
  JumpProbabilities probabilities;
};

/// U^dag (jump branches of U_phi U |0,0,0>) U, with loss acting after the phase.
inline DecayedState decayed_protocol_with_derivatives(const ProtocolSpec& spec, const LossSpec& loss, double phi) {
  const auto& space = spec.space();
  const auto ops = detail::branch_operators(space, loss);
  const CVector psi_f = spec.phase_acquired(phi);
  const CVector dpsi_f = spec.phase_acquired_derivative(phi);
  const auto p = detail::branch_probabilities(ops, loss, psi_f);
  std::array<double, 3> w{p.p0, p.p1, p.p2};
  std::array<double, 3> dw{0.0, 0.0, 0.0};
  if (loss.has_rates()) {
    for (int j = 1; j < 3; ++j) dw[j] = 2.0 * (ops[j] * dpsi_f).dot(ops[j] * psi_f).real();
    dw[0] = -dw[1] - dw[2];
  }
  std::vector<Ensemble::Component> comps;
  DecayedState out{Ensemble::pure(PureState::normalized(space, spec.adjoint() * psi_f)), {}, {}, p};
  for (int j = 0; j < 3; ++j) {
    if (w[j] == 0.0) continue;
    const CVector v = spec.adjoint() * (ops[j] * psi_f);
    const CVector dv = spec.adjoint() * (ops[j] * dpsi_f);
    const double norm = v.norm();
    if (norm == 0.0) throw NumericalError("loss branch " + std::to_string(j) + " has weight but no amplitude");
    CVector psi = v / norm;
    const Complex proj = psi.dot(dv);
    out.state_derivatives.push_back(dv / norm - psi * (proj.real() / norm));
    out.weight_derivatives.push_back(dw[j]);
    comps.push_back({w[j], PureState(space, std::move(psi))});
  }
  out.rho = Ensemble(std::move(comps));
  return out;
}

inline Ensemble decayed_protocol(const AdaptedProtocolSpec& spec, const LossSpec& loss, double phi) {
  return decayed_protocol_with_derivatives(spec.base(), loss, phi).rho;
}

// ---------------------------------------------------------------------------
// Estimators on mixtures

namespace detail {
/// <N> and <N^2> of sum_k w_k P|psi_k>, plus d<N>/dphi, for the diagonal
/// projector P selected by `keep` (TLS level filter, or all when empty).
struct DiagonalMoments {
  double norm = 0.0, dnorm = 0.0;
  double n1 = 0.0, dn1 = 0.0;
  double n2 = 0.0;
};

inline DiagonalMoments diagonal_moments(const DecayedState& d, std::optional<int> keep_tls) {
  DiagonalMoments m;
  const auto& comps = d.rho.components();
  const auto& space = d.rho.space();
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const CVector& v = comps[k].state.amplitudes();
    const CVector& dv = d.state_derivatives[k];
    const double w = comps[k].weight;
    const double dw = d.weight_derivatives[k];
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const auto l = space.label(i);
      if (keep_tls && l.tls != *keep_tls) continue;
      const double n = l.n1 + l.n2;
      const double p = std::norm(v(i));
      const double dp = 2.0 * (std::conj(dv(i)) * v(i)).real();
      m.norm += w * p;
      m.dnorm += dw * p + w * dp;
      m.n1 += w * p * n;
      m.dn1 += (dw * p + w * dp) * n;
      m.n2 += w * p * n * n;
    }
  }
  return m;
}

inline std::optional<double> ratio_uncertainty(const DiagonalMoments& m) {
  if (!(m.norm > 0.0)) return std::nullopt;
  const double mean = m.n1 / m.norm;
  const double mean2 = m.n2 / m.norm;
  const double slope = (m.dn1 * m.norm - m.n1 * m.dnorm) / (m.norm * m.norm);
  if (slope == 0.0) return std::nullopt;
  return std::sqrt(std::max(mean2 - mean * mean, 0.0)) / std::abs(slope);
}
}  // namespace detail

struct LossEstimate {
  PhotonStats stats;
  std::optional<double> delta_phi;  // empty at excluded phases
};

/// Photon statistics of rho_R (no post-selection) and the resulting delta_phi.
inline LossEstimate loss_photon_stats_and_uncertainty(const AdaptedProtocolSpec& spec, const LossSpec& loss, double phi,
                                                      DerivativeRule rule = {}) {
  const auto d = decayed_protocol_with_derivatives(spec.base(), loss, phi);
  const auto m = detail::diagonal_moments(d, std::nullopt);
  LossEstimate e;
  e.stats = {m.n1, m.n2};
  if (is_singular_phase(spec.base().n(), phi)) return e;
  if (rule.kind == DerivativeRule::Kind::kAnalytic) {
    e.delta_phi = detail::ratio_uncertainty(m);
  } else {
    const auto up = detail::diagonal_moments(decayed_protocol_with_derivatives(spec.base(), loss, phi + rule.step), std::nullopt);
    const auto dn = detail::diagonal_moments(decayed_protocol_with_derivatives(spec.base(), loss, phi - rule.step), std::nullopt);
    const double slope = (up.n1 - dn.n1) / (2.0 * rule.step);
    if (slope != 0.0) e.delta_phi = std::sqrt(e.stats.variance()) / std::abs(slope);
  }
  return e;
}

/// delta_phi = sqrt[(2 - p0 (1 + cos N phi)) / (N^2 p0 (1 - cos N phi))]
inline double loss_uncertainty_closed_form(int n, double p0, double phi) {
  const double c = std::cos(n * phi);
  return std::sqrt((2.0 - p0 * (1.0 + c)) / (static_cast<double>(n) * n * p0 * (1.0 - c)));
}

/// Quantum Fisher information of sum_i w_i |psi_i><psi_i| for mutually orthogonal
/// psi_i, from the weights, states and their phi-derivatives:
///   F = sum_i (dw_i)^2 / w_i + 4 sum_i w_i <dpsi_i|dpsi_i>
///       - 8 sum_{i,j} w_i w_j / (w_i + w_j) |<dpsi_i|psi_j>|^2
/// Empty when the components are not orthogonal.
inline std::optional<double> fisher_mixed(const DecayedState& d) {
  const auto& comps = d.rho.components();
  for (std::size_t i = 0; i < comps.size(); ++i) {
    for (std::size_t j = i + 1; j < comps.size(); ++j) {
      if (std::abs(inner(comps[i].state, comps[j].state)) > kComponentOrthogonality) return std::nullopt;
    }
  }
  double f = 0.0;
  for (std::size_t i = 0; i < comps.size(); ++i) {
    const double wi = comps[i].weight;
    if (wi <= kSupportThreshold) continue;
    f += d.weight_derivatives[i] * d.weight_derivatives[i] / wi;
    f += 4.0 * wi * d.state_derivatives[i].squaredNorm();
    for (std::size_t j = 0; j < comps.size(); ++j) {
      const double wj = comps[j].weight;
      if (wj <= kSupportThreshold) continue;
      f -= 8.0 * wi * wj / (wi + wj) * std::norm(d.state_derivatives[i].dot(comps[j].state.amplitudes()));
    }
  }
  return f;
}

/// F = sum_{ij} 2 |<i|d rho|j>|^2 / (l_i + l_j) over eigenpairs of rho(phi) with
/// l_i + l_j > kSupportThreshold, d rho by central difference with step h.
inline double fisher_sld_dense(const std::function<CMatrix(double)>& family, double phi, double h = 1e-4) {
  const CMatrix rho = family(phi);
  const CMatrix drho = (family(phi + h) - family(phi - h)) / (2.0 * h);
  Eigen::SelfAdjointEigenSolver<CMatrix> es(rho);
  if (es.info() != Eigen::Success) throw NumericalError("density matrix eigendecomposition failed");
  const CMatrix dr = es.eigenvectors().adjoint() * drho * es.eigenvectors();
  const auto& l = es.eigenvalues();
  double f = 0.0;
  for (Eigen::Index i = 0; i < l.size(); ++i) {
    for (Eigen::Index j = 0; j < l.size(); ++j) {
      const double s = l(i) + l(j);
      if (s > kSupportThreshold) f += 2.0 * std::norm(dr(i, j)) / s;
    }
  }
  return f;
}

/// Fisher information of rho_R at phi; uses the dense SLD form when the
/// mixture components are not orthogonal.
inline double fisher_decayed(const AdaptedProtocolSpec& spec, const LossSpec& loss, double phi) {
  if (auto f = fisher_mixed(decayed_protocol_with_derivatives(spec.base(), loss, phi))) return *f;
  return fisher_sld_dense([&](double x) { return decayed_protocol(spec, loss, x).density_matrix(); }, phi);
}

struct PovmOutcome {
  double success_probability = 0.0;
  Ensemble post_state;
};

/// Keeps the TLS-|0> outcome of every component and renormalizes.
inline PovmOutcome povm_select(const Ensemble& rho) {
  const auto& space = rho.space();
  std::vector<Ensemble::Component> kept;
  double success = 0.0;
  for (const auto& c : rho.components()) {
    CVector v = c.state.amplitudes();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (space.label(i).tls != 0) v(i) = 0.0;
    }
    const double q = v.squaredNorm();
    if (q * c.weight <= 0.0) continue;
    success += c.weight * q;
    kept.push_back({c.weight * q, PureState::normalized(space, std::move(v))});
  }
  if (!(success > 0.0)) throw NumericalError("post-selection on TLS |0> has zero success probability");
  for (auto& c : kept) c.weight /= success;
  // Renormalize once more so the weights sum to 1 to machine precision.
  double total = 0.0;
  for (const auto& c : kept) total += c.weight;
  for (auto& c : kept) c.weight /= total;
  return {success, Ensemble(std::move(kept))};
}

/// delta_phi after keeping only the TLS-|0> outcome.
inline std::optional<double> recovered_uncertainty(const AdaptedProtocolSpec& spec, const LossSpec& loss, double phi) {
  if (is_singular_phase(spec.base().n(), phi)) return std::nullopt;
  return detail::ratio_uncertainty(detail::diagonal_moments(decayed_protocol_with_derivatives(spec.base(), loss, phi), 0));
}

// ---------------------------------------------------------------------------
// Loss sweep

struct LossSweepResult {
  int n = 0;
  std::vector<double> phi;
  std::vector<double> mean_n;
  std::vector<std::optional<double>> delta_phi_sim;
  std::vector<double> delta_phi_eq17;
  std::vector<double> fisher_sim;
  std::vector<double> fisher_p0n2;
  std::vector<double> povm_success;
  std::vector<std::optional<double>> delta_phi_recovered;
  std::vector<bool> excluded;

  std::size_t size() const { return phi.size(); }
};

inline LossSweepResult loss_sweep(const AdaptedProtocolSpec& spec, const LossSpec& loss, int n_points, int jobs = 1,
                                  DerivativeRule rule = {}) {
  LossSweepResult r;
  const int n = spec.base().n();
  r.n = n;
  r.phi = phase_grid(n_points);
  const auto m = r.phi.size();
  r.mean_n.resize(m);
  r.delta_phi_sim.resize(m);
  r.delta_phi_eq17.resize(m);
  r.fisher_sim.resize(m);
  r.fisher_p0n2.resize(m);
  r.povm_success.resize(m);
  r.delta_phi_recovered.resize(m);
  std::vector<char> excluded(m, 0);
  parallel_for(m, jobs, [&](std::size_t i) {
    const double phi = r.phi[i];
    const auto est = loss_photon_stats_and_uncertainty(spec, loss, phi, rule);
    const auto decayed = decayed_protocol_with_derivatives(spec.base(), loss, phi);
    const double p0 = decayed.probabilities.p0;
    r.mean_n[i] = est.stats.mean_n;
    r.delta_phi_sim[i] = est.delta_phi;
    r.delta_phi_eq17[i] = is_singular_phase(n, phi) ? 0.0 : loss_uncertainty_closed_form(n, p0, phi);
    r.fisher_sim[i] = fisher_decayed(spec, loss, phi);
    r.fisher_p0n2[i] = p0 * n * n;
    r.povm_success[i] = povm_select(decayed.rho).success_probability;
    r.delta_phi_recovered[i] = recovered_uncertainty(spec, loss, phi);
    excluded[i] = !(est.delta_phi && r.delta_phi_recovered[i]);
  });
  r.excluded.assign(excluded.begin(), excluded.end());
  return r;
}

// CSV: phi,mean_N,delta_phi_sim,delta_phi_eq17,fisher_sim,fisher_p0N2,povm_success,delta_phi_recovered,excluded
inline void write_loss_csv(std::ostream& os, const LossSweepResult& r) {
  os << std::setprecision(17);
  os << "phi,mean_N,delta_phi_sim,delta_phi_eq17,fisher_sim,fisher_p0N2,povm_success,delta_phi_recovered,excluded\n";
  auto opt = [&](const std::optional<double>& v) {
    if (v) os << *v;
  };
  for (std::size_t i = 0; i < r.size(); ++i) {
    os << r.phi[i] << ',' << r.mean_n[i] << ',';
    opt(r.excluded[i] ? std::nullopt : r.delta_phi_sim[i]);
    os << ',';
    if (!r.excluded[i]) os << r.delta_phi_eq17[i];
    os << ',' << r.fisher_sim[i] << ',' << r.fisher_p0n2[i] << ',' << r.povm_success[i] << ',';
    opt(r.excluded[i] ? std::nullopt : r.delta_phi_recovered[i]);
    os << ',' << (r.excluded[i] ? 1 : 0) << '\n';
  }
}

}  // namespace revmetro
