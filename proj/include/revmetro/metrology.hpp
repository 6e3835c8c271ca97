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

// Time-reversal phase estimation: psi_R(phi) = U^dag U_phi U |0,0,0>, with
// U_phi = exp(i phi a2^dag a2), read out by counting the total photon number.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "revmetro/dynamics.hpp"
#include "revmetro/errors.hpp"
#include "revmetro/hilbert.hpp"
#include "revmetro/krotov.hpp"

namespace revmetro {

/// Phases with |sin(N phi)| below this are excluded from the uncertainty (0/0 points).
inline constexpr double kSingularThreshold = 1e-3;

/// The two transfers that define U: |0,0,0> -> NOON(+) and |0,0,N_x> -> NOON(-).
inline std::vector<StatePair> noon_pairs(const SpaceDescriptor& space, int n, int n_x) {
  if (n_x == 0) throw InvalidArgument("auxiliary occupation N_x must be non-zero");
  if (n_x < 0 || n_x >= space.cutoff2()) throw InvalidArgument("N_x does not fit below the mode-2 cutoff");
  return {{fock_state(space, 0, 0, 0), noon_state(space, n, +1)},
          {fock_state(space, 0, 0, n_x), noon_state(space, n, -1)}};
}

inline ControlProblem noon_control_problem(const SpaceDescriptor& space, int n, int n_x, const DriftSpec& drift,
                                           double t_final, int n_steps) {
  return ControlProblem(noon_pairs(space, n, n_x), drift, t_final, n_steps);
}

/// U_phi = exp(i phi a2^dag a2), diagonal.
inline OperatorMatrix phase_gate(const SpaceDescriptor& space, double phi) {
  CMatrix m = CMatrix::Zero(space.dim(), space.dim());
  for (Eigen::Index i = 0; i < space.dim(); ++i) m(i, i) = std::polar(1.0, phi * space.label(i).n2);
  return OperatorMatrix(space, std::move(m));
}

namespace detail {
/// Orthonormal basis whose first columns are `lead` (assumed orthonormal),
/// completed with Gram-Schmidt over the standard basis.
inline CMatrix complete_basis(const std::vector<const CVector*>& lead, Eigen::Index dim) {
  CMatrix basis(dim, dim);
  Eigen::Index filled = 0;
  for (const auto* v : lead) basis.col(filled++) = *v;
  for (Eigen::Index e = 0; e < dim && filled < dim; ++e) {
    CVector cand = CVector::Unit(dim, e);
    for (int pass = 0; pass < 2; ++pass) {
      for (Eigen::Index j = 0; j < filled; ++j) cand -= basis.col(j).dot(cand) * basis.col(j);
    }
    const double n = cand.norm();
    if (n > 1e-6) basis.col(filled++) = cand / n;
  }
  if (filled != dim) throw NumericalError("basis completion failed");
  return basis;
}

inline CMatrix random_unitary(Eigen::Index dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  CMatrix z(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i) {
    for (Eigen::Index j = 0; j < dim; ++j) z(i, j) = Complex(g(rng), g(rng));
  }
  Eigen::HouseholderQR<CMatrix> qr(z);
  CMatrix q = qr.householderQ() * CMatrix::Identity(dim, dim);
  const CMatrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < dim; ++j) {
    const Complex d = r(j, j);
    if (std::abs(d) > 0.0) q.col(j) *= d / std::abs(d);
  }
  return q;
}
}  // namespace detail

/// A unitary with U|initial_j> = |target_j> exactly. `variant` = 0 maps the
/// completed complements onto each other directly; any other value inserts a
/// seeded random unitary on the complement, giving a different completion.
inline OperatorMatrix exact_completion_unitary(const std::vector<StatePair>& pairs, std::uint64_t variant = 0) {
  if (pairs.empty()) throw InvalidArgument("exact completion needs at least one pair");
  std::vector<const PureState*> init, tgt;
  std::vector<const CVector*> init_v, tgt_v;
  for (const auto& p : pairs) {
    require_same_space(pairs.front().initial.space(), p.initial.space(), "exact_completion_unitary");
    require_same_space(pairs.front().initial.space(), p.target.space(), "exact_completion_unitary");
    init.push_back(&p.initial);
    tgt.push_back(&p.target);
    init_v.push_back(&p.initial.amplitudes());
    tgt_v.push_back(&p.target.amplitudes());
  }
  if (detail::gram_defect(init) > kPairOrthonormalityTolerance || detail::gram_defect(tgt) > kPairOrthonormalityTolerance) {
    throw InvalidArgument("exact completion requires orthonormal initial and target sets");
  }
  const auto& space = pairs.front().initial.space();
  const auto dim = space.dim();
  const auto k = static_cast<Eigen::Index>(pairs.size());
  const CMatrix a = detail::complete_basis(init_v, dim);
  const CMatrix b = detail::complete_basis(tgt_v, dim);
  CMatrix mid = CMatrix::Identity(dim, dim);
  if (variant != 0 && dim > k) mid.bottomRightCorner(dim - k, dim - k) = detail::random_unitary(dim - k, variant);
  OperatorMatrix u(space, b * mid * a.adjoint());
  if (u.unitarity_defect() >= 1e-12) throw NumericalError("exact completion is not unitary");
  return u;
}

class ProtocolSpec {
 public:
  ProtocolSpec(int n, int n_x, OperatorMatrix unitary) : n_(n), n_x_(n_x), unitary_(std::move(unitary)) {
    const auto& s = unitary_.space();
    if (n_ < 1) throw InvalidArgument("resource photon number N must be >= 1");
    if (n_x_ == 0) throw InvalidArgument("N_x must be non-zero");
    if (n_ >= s.cutoff1() || n_ >= s.cutoff2() || n_x_ < 0 || n_x_ >= s.cutoff2()) {
      throw InvalidArgument("N or N_x does not fit below the Fock cutoffs");
    }
    adjoint_ = unitary_.entries().adjoint();
    forward_vacuum_ = unitary_.entries().col(s.index({0, 0, 0}));
    n2_.resize(s.dim());
    for (Eigen::Index i = 0; i < s.dim(); ++i) n2_(i) = s.label(i).n2;
  }

  /// Exact-completion protocol for resource number N with the default auxiliary N_x = N.
  static ProtocolSpec exact(const SpaceDescriptor& space, int n, int n_x = 0, std::uint64_t variant = 0) {
    if (n_x == 0) n_x = n;
    return ProtocolSpec(n, n_x, exact_completion_unitary(noon_pairs(space, n, n_x), variant));
  }

  int n() const { return n_; }
  int n_x() const { return n_x_; }
  const SpaceDescriptor& space() const { return unitary_.space(); }
  const OperatorMatrix& unitary() const { return unitary_; }

  /// U_phi U |0,0,0>
  CVector phase_acquired(double phi) const {
    CVector v = forward_vacuum_;
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) *= std::polar(1.0, phi * n2_(i));
    return v;
  }

  /// d/dphi of U_phi U |0,0,0>, i.e. i a2^dag a2 U_phi U |0,0,0>
  CVector phase_acquired_derivative(double phi) const {
    CVector v = phase_acquired(phi);
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) *= Complex(0.0, n2_(i));
    return v;
  }

  const CMatrix& adjoint() const { return adjoint_; }

 private:
  int n_;
  int n_x_;
  OperatorMatrix unitary_;
  CMatrix adjoint_;
  CVector forward_vacuum_;
  RVector n2_;
};

inline PureState run_protocol(const ProtocolSpec& spec, double phi) {
  return PureState::normalized(spec.space(), spec.adjoint() * spec.phase_acquired(phi));
}

/// d psi_R / d phi = U^dag (i a2^dag a2 U_phi) U |0,0,0>
inline CVector protocol_derivative(const ProtocolSpec& spec, double phi) {
  return spec.adjoint() * spec.phase_acquired_derivative(phi);
}

struct PhotonStats {
  double mean_n = 0.0;
  double mean_n2 = 0.0;
  double variance() const { return std::max(mean_n2 - mean_n * mean_n, 0.0); }
};

namespace detail {
inline PhotonStats photon_stats(const SpaceDescriptor& space, const CVector& v, double weight = 1.0) {
  PhotonStats s;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const auto l = space.label(i);
    const double n = l.n1 + l.n2;
    const double p = weight * std::norm(v(i));
    s.mean_n += p * n;
    s.mean_n2 += p * n * n;
  }
  return s;
}

/// d<N>/dphi = 2 Re <d psi| N |psi>
inline double photon_mean_derivative(const SpaceDescriptor& space, const CVector& v, const CVector& dv) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const auto l = space.label(i);
    acc += 2.0 * (l.n1 + l.n2) * (std::conj(dv(i)) * v(i)).real();
  }
  return acc;
}
}  // namespace detail

inline PhotonStats photon_stats(const PureState& state) { return detail::photon_stats(state.space(), state.amplitudes()); }

inline PhotonStats photon_stats(const Ensemble& rho) {
  PhotonStats s;
  for (const auto& c : rho.components()) {
    const auto p = detail::photon_stats(c.state.space(), c.state.amplitudes(), c.weight);
    s.mean_n += p.mean_n;
    s.mean_n2 += p.mean_n2;
  }
  return s;
}

/// How d<N>/dphi is obtained for the uncertainty estimate.
struct DerivativeRule {
  enum class Kind { kAnalytic, kCentralDifference };
  Kind kind = Kind::kAnalytic;
  double step = 1e-4;

  static DerivativeRule central(double h = 1e-4) { return {Kind::kCentralDifference, h}; }
};

inline bool is_singular_phase(int n, double phi) { return std::abs(std::sin(n * phi)) < kSingularThreshold; }

/// delta_phi = Delta N / |d<N>/dphi|; empty at excluded (singular) phases.
inline std::optional<double> uncertainty(const ProtocolSpec& spec, double phi, DerivativeRule rule = {}) {
  if (is_singular_phase(spec.n(), phi)) return std::nullopt;
  const CVector psi = spec.adjoint() * spec.phase_acquired(phi);
  const auto stats = detail::photon_stats(spec.space(), psi);
  double slope = 0.0;
  if (rule.kind == DerivativeRule::Kind::kAnalytic) {
    slope = detail::photon_mean_derivative(spec.space(), psi, protocol_derivative(spec, phi));
  } else {
    const double up = photon_stats(run_protocol(spec, phi + rule.step)).mean_n;
    const double down = photon_stats(run_protocol(spec, phi - rule.step)).mean_n;
    slope = (up - down) / (2.0 * rule.step);
  }
  if (slope == 0.0) return std::nullopt;
  return std::sqrt(stats.variance()) / std::abs(slope);
}

/// F = 4 (<d psi|d psi> - |<d psi|psi>|^2) with the exact derivative.
inline double fisher_pure(const ProtocolSpec& spec, double phi) {
  const CVector psi = spec.adjoint() * spec.phase_acquired(phi);
  const CVector dpsi = protocol_derivative(spec, phi);
  return 4.0 * (dpsi.squaredNorm() - std::norm(dpsi.dot(psi)));
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepResult {
  int n = 0;
  std::vector<double> phi;
  std::vector<double> mean_n;
  std::vector<double> mean_n2;
  std::vector<std::optional<double>> delta_phi;
  std::vector<double> fisher;
  std::vector<bool> excluded;

  std::size_t size() const { return phi.size(); }
  std::vector<double> inverse_uncertainties() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < size(); ++i) {
      if (!excluded[i]) out.push_back(1.0 / *delta_phi[i]);
    }
    return out;
  }
};

/// Uniform grid of n points on [-pi, pi).
inline std::vector<double> phase_grid(int n_points) {
  if (n_points < 2) throw InvalidArgument("a phase sweep needs at least 2 points");
  std::vector<double> grid(static_cast<std::size_t>(n_points));
  for (int j = 0; j < n_points; ++j) grid[j] = -std::numbers::pi + 2.0 * std::numbers::pi * j / n_points;
  return grid;
}

/// Runs fn(i) for i in [0, count) on up to `jobs` threads; fn writes only slot i.
template <typename Fn>
void parallel_for(std::size_t count, int jobs, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::clamp(jobs, 1, 256));
  if (workers == 1 || count < 2) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline SweepResult sweep(const ProtocolSpec& spec, int n_points, int jobs = 1, DerivativeRule rule = {}) {
  SweepResult r;
  r.n = spec.n();
  r.phi = phase_grid(n_points);
  const auto m = r.phi.size();
  r.mean_n.resize(m);
  r.mean_n2.resize(m);
  r.delta_phi.resize(m);
  r.fisher.resize(m);
  std::vector<char> excluded(m, 0);
  parallel_for(m, jobs, [&](std::size_t i) {
    const auto stats = photon_stats(run_protocol(spec, r.phi[i]));
    r.mean_n[i] = stats.mean_n;
    r.mean_n2[i] = stats.mean_n2;
    r.delta_phi[i] = uncertainty(spec, r.phi[i], rule);
    r.fisher[i] = fisher_pure(spec, r.phi[i]);
    excluded[i] = !r.delta_phi[i].has_value();
  });
  r.excluded.assign(excluded.begin(), excluded.end());
  return r;
}

namespace detail {
inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of an empty set");
  std::sort(v.begin(), v.end());
  const auto m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}
inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw InvalidArgument("mean of an empty set");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}
}  // namespace detail

struct InverseUncertaintySummary {
  double max = 0.0;
  double median = 0.0;
  double mean = 0.0;
  std::size_t excluded = 0;
};

inline InverseUncertaintySummary summarize(const SweepResult& r) {
  const auto inv = r.inverse_uncertainties();
  InverseUncertaintySummary s;
  s.max = *std::max_element(inv.begin(), inv.end());
  s.median = detail::median(inv);
  s.mean = detail::mean(inv);
  s.excluded = r.size() - inv.size();
  return s;
}

/// Least-squares fit y = slope * x through the origin.
struct ProportionalFit {
  double slope = 0.0;
  double rms_residual = 0.0;
};

inline ProportionalFit fit_proportional(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidArgument("proportional fit needs >= 2 matched points");
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += x[i] * y[i];
    sxx += x[i] * x[i];
  }
  ProportionalFit f;
  f.slope = sxy / sxx;
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) ss += std::pow(y[i] - f.slope * x[i], 2);
  f.rms_residual = std::sqrt(ss / static_cast<double>(x.size()));
  return f;
}

struct ScalingFit {
  std::vector<int> n_values;
  ProportionalFit max_inverse;     // max 1/delta_phi vs N
  ProportionalFit median_inverse;  // median 1/delta_phi vs N
  ProportionalFit mean_inverse;    // mean 1/delta_phi vs N
  ProportionalFit fisher;          // mean F vs N^2
};

inline ScalingFit scaling_fit(const std::vector<SweepResult>& results) {
  if (results.size() < 2) throw InvalidArgument("scaling fit needs results for at least two values of N");
  ScalingFit fit;
  std::vector<double> ns, n2s, mx, md, mn, fs;
  for (const auto& r : results) {
    const auto s = summarize(r);
    fit.n_values.push_back(r.n);
    ns.push_back(r.n);
    n2s.push_back(static_cast<double>(r.n) * r.n);
    mx.push_back(s.max);
    md.push_back(s.median);
    mn.push_back(s.mean);
    fs.push_back(detail::mean(r.fisher));
  }
  fit.max_inverse = fit_proportional(ns, mx);
  fit.median_inverse = fit_proportional(ns, md);
  fit.mean_inverse = fit_proportional(ns, mn);
  fit.fisher = fit_proportional(n2s, fs);
  return fit;
}

// ---------------------------------------------------------------------------
// CSV: phi,mean_N,mean_N2,delta_phi,inv_delta_phi,fisher,excluded
// Excluded rows leave delta_phi and inv_delta_phi empty.

inline void write_sweep_csv(std::ostream& os, const SweepResult& r) {
  os << std::setprecision(17);
  os << "phi,mean_N,mean_N2,delta_phi,inv_delta_phi,fisher,excluded\n";
  for (std::size_t i = 0; i < r.size(); ++i) {
    os << r.phi[i] << ',' << r.mean_n[i] << ',' << r.mean_n2[i] << ',';
    if (r.excluded[i]) {
      os << ",,";
    } else {
      os << *r.delta_phi[i] << ',' << 1.0 / *r.delta_phi[i] << ',';
    }
    os << r.fisher[i] << ',' << (r.excluded[i] ? 1 : 0) << '\n';
  }
}

}  // namespace revmetro
