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

// Controlled Hamiltonian
//
//   H(t) = w1 a1^dag a1 + w2 a2^dag a2 + f_x sigma_x + f_z sigma_z
//          + sum_j g_j (sigma_plus a_j + sigma_minus a_j^dag)
//
// with piecewise-constant controls (sample k holds on [k dt, (k+1) dt)),
// propagated with exact per-interval exponentials.

#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "revmetro/errors.hpp"
#include "revmetro/hilbert.hpp"

namespace revmetro {

using RMatrix = Eigen::MatrixXd;
using RVector = Eigen::VectorXd;

inline constexpr int kNumChannels = 4;
enum class Channel : int { kFx = 0, kFz = 1, kG1 = 2, kG2 = 3 };
inline constexpr std::array<std::string_view, kNumChannels> kChannelNames = {"f_x", "f_z", "g1", "g2"};

inline constexpr double kLeakageWarning = 1e-6;

struct DriftSpec {
  double omega1 = 1.0;
  double omega2 = 2.0;

  void validate() const {
    if (!std::isfinite(omega1) || !std::isfinite(omega2)) throw InvalidArgument("drift frequencies must be finite");
  }
  friend bool operator==(const DriftSpec&, const DriftSpec&) = default;
};

struct PulseSet {
  double t_final = 40.0;
  int n_steps = 2000;
  std::array<std::vector<double>, kNumChannels> channels;

  static PulseSet zeros(double t_final, int n_steps) {
    PulseSet p;
    p.t_final = t_final;
    p.n_steps = n_steps;
    for (auto& c : p.channels) c.assign(static_cast<std::size_t>(std::max(n_steps, 0)), 0.0);
    p.validate();
    return p;
  }

  double dt() const { return t_final / n_steps; }
  /// Midpoint of interval k.
  double t_mid(int k) const { return (k + 0.5) * dt(); }

  std::vector<double>& channel(Channel c) { return channels[static_cast<int>(c)]; }
  const std::vector<double>& channel(Channel c) const { return channels[static_cast<int>(c)]; }

  std::array<double, kNumChannels> samples(int k) const {
    return {channels[0][k], channels[1][k], channels[2][k], channels[3][k]};
  }

  void validate() const {
    if (n_steps <= 0 || !(t_final > 0.0) || !std::isfinite(t_final)) {
      throw InvalidArgument("pulse grid needs t_final > 0 and n_steps > 0");
    }
    for (int c = 0; c < kNumChannels; ++c) {
      if (channels[c].size() != static_cast<std::size_t>(n_steps)) {
        throw InvalidArgument("channel " + std::string(kChannelNames[c]) + " has " +
                              std::to_string(channels[c].size()) + " samples, expected " + std::to_string(n_steps));
      }
      for (double v : channels[c]) {
        if (!std::isfinite(v)) throw InvalidArgument("non-finite sample in channel " + std::string(kChannelNames[c]));
      }
    }
  }

  friend bool operator==(const PulseSet&, const PulseSet&) = default;
};

struct Trajectory {
  std::vector<PureState> states;  // grid points t_0 .. t_{n_steps}
  double leak_max = 0.0;

  bool leakage_warning() const { return leak_max > kLeakageWarning; }
};

/// Population in the highest retained Fock level of either mode.
inline double top_level_population(const SpaceDescriptor& space, const CVector& v) {
  double pop = 0.0;
  for (Eigen::Index i = 0; i < space.dim(); ++i) {
    const auto l = space.label(i);
    if (l.n1 == space.cutoff1() - 1 || l.n2 == space.cutoff2() - 1) pop += std::norm(v(i));
  }
  return pop;
}

// ---------------------------------------------------------------------------
// Operators

/// [sigma_x, sigma_z, sigma_plus a1 + sigma_minus a1^dag, sigma_plus a2 + sigma_minus a2^dag]
inline std::array<OperatorMatrix, kNumChannels> control_generators(const SpaceDescriptor& space) {
  const auto sx = embed(pauli_x(), Slot::kTls, space);
  const auto sz = embed(pauli_z(), Slot::kTls, space);
  const auto sp = embed(sigma_plus(), Slot::kTls, space).entries();
  const auto sm = embed(sigma_minus(), Slot::kTls, space).entries();
  auto coupling = [&](Slot mode) {
    const int d = space.slot_dim(mode);
    const CMatrix a = embed(annihilation(d), mode, space).entries();
    const CMatrix ad = embed(creation(d), mode, space).entries();
    return OperatorMatrix(space, sp * a + sm * ad, true);
  };
  return {sx, sz, coupling(Slot::kMode1), coupling(Slot::kMode2)};
}

inline OperatorMatrix drift_operator(const SpaceDescriptor& space, const DriftSpec& drift) {
  drift.validate();
  CMatrix h = CMatrix::Zero(space.dim(), space.dim());
  for (Eigen::Index i = 0; i < space.dim(); ++i) {
    const auto l = space.label(i);
    h(i, i) = drift.omega1 * l.n1 + drift.omega2 * l.n2;
  }
  return OperatorMatrix(space, std::move(h), true);
}

/// H_k for interval k of `pulse`.
inline OperatorMatrix assemble(const OperatorMatrix& drift, const std::array<OperatorMatrix, kNumChannels>& generators,
                               const PulseSet& pulse, int k) {
  if (k < 0 || k >= pulse.n_steps) {
    throw InvalidArgument("interval index " + std::to_string(k) + " outside [0, " + std::to_string(pulse.n_steps) + ")");
  }
  CMatrix h = drift.entries();
  for (int c = 0; c < kNumChannels; ++c) {
    require_same_space(drift.space(), generators[c].space(), "assemble");
    h += pulse.channels[c][k] * generators[c].entries();
  }
  return OperatorMatrix(drift.space(), std::move(h), true);
}

/// Real-valued copy of H(t) = H_0 + sum_l c_l H_l for the fast propagation path.
/// Every operator in the controlled model has real matrix elements in the Fock basis.
class RealHamiltonian {
 public:
  RealHamiltonian(const SpaceDescriptor& space, const DriftSpec& drift) : space_(space) {
    drift_ = drift_operator(space, drift).entries().real();
    const auto gens = control_generators(space);
    for (int c = 0; c < kNumChannels; ++c) {
      dense_[c] = gens[c].entries().real();
      sparse_[c] = dense_[c].sparseView();
    }
  }

  const SpaceDescriptor& space() const { return space_; }
  const RMatrix& drift() const { return drift_; }
  const RMatrix& generator(int c) const { return dense_[c]; }
  const Eigen::SparseMatrix<double>& sparse_generator(int c) const { return sparse_[c]; }

  RMatrix at(const std::array<double, kNumChannels>& samples) const {
    RMatrix h = drift_;
    for (int c = 0; c < kNumChannels; ++c) {
      if (samples[c] != 0.0) h += samples[c] * dense_[c];
    }
    return h;
  }

 private:
  SpaceDescriptor space_;
  RMatrix drift_;
  std::array<RMatrix, kNumChannels> dense_;
  std::array<Eigen::SparseMatrix<double>, kNumChannels> sparse_;
};

/// Eigendecomposition H = V diag(E) V^dag of a Hermitian matrix, used to apply
/// exp(-i H t) exactly for any t. Real symmetric input keeps V real.
class SpectralPropagator {
 public:
  SpectralPropagator() = default;

  explicit SpectralPropagator(const RMatrix& h) : real_(true) {
    Eigen::SelfAdjointEigenSolver<RMatrix> es(h);
    if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    energies_ = es.eigenvalues();
    rvec_ = es.eigenvectors();
  }

  explicit SpectralPropagator(const OperatorMatrix& h) {
    if (!h.hermitian_hint()) throw NumericalError("exponential step requires a Hermitian generator");
    const CMatrix& m = h.entries();
    if (m.imag().cwiseAbs().maxCoeff() == 0.0) {
      *this = SpectralPropagator(RMatrix(m.real()));
      return;
    }
    Eigen::SelfAdjointEigenSolver<CMatrix> es(m);
    if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    energies_ = es.eigenvalues();
    cvec_ = es.eigenvectors();
  }

  bool is_real() const { return real_; }
  const RVector& energies() const { return energies_; }
  Eigen::Index dim() const { return energies_.size(); }

  /// V^dag v
  CVector to_eigenbasis(const CVector& v) const {
    if (real_) return mul_transpose(rvec_, v);
    return cvec_.adjoint() * v;
  }

  /// V y
  CVector from_eigenbasis(const CVector& y) const {
    if (real_) return mul(rvec_, y);
    return cvec_ * y;
  }

  /// y_b -> exp(-i E_b t) y_b
  void apply_phases(CVector& y, double t) const {
    for (Eigen::Index b = 0; b < y.size(); ++b) y(b) *= std::polar(1.0, -energies_(b) * t);
  }

  /// exp(-i H t) v
  CVector apply(const CVector& v, double t) const {
    CVector y = to_eigenbasis(v);
    apply_phases(y, t);
    return from_eigenbasis(y);
  }

  /// exp(-i H t) X
  CMatrix apply(const CMatrix& x, double t) const {
    CMatrix y;
    if (real_) {
      y = mul_transpose(rvec_, x);
    } else {
      y = cvec_.adjoint() * x;
    }
    for (Eigen::Index b = 0; b < y.rows(); ++b) y.row(b) *= std::polar(1.0, -energies_(b) * t);
    if (real_) return mul(rvec_, y);
    return cvec_ * y;
  }

  CMatrix exponential(double t) const {
    const auto d = dim();
    return apply(CMatrix(CMatrix::Identity(d, d)), t);
  }

 private:
  template <typename Derived>
  using ComplexLike = Eigen::Matrix<Complex, Eigen::Dynamic, Derived::ColsAtCompileTime>;

  template <typename Derived>
  static ComplexLike<Derived> mul(const RMatrix& r, const Eigen::MatrixBase<Derived>& z) {
    ComplexLike<Derived> out(r.rows(), z.cols());
    out.real() = r * z.real();
    out.imag() = r * z.imag();
    return out;
  }
  template <typename Derived>
  static ComplexLike<Derived> mul_transpose(const RMatrix& r, const Eigen::MatrixBase<Derived>& z) {
    ComplexLike<Derived> out(r.cols(), z.cols());
    out.real() = r.transpose() * z.real();
    out.imag() = r.transpose() * z.imag();
    return out;
  }

  bool real_ = false;
  RVector energies_;
  RMatrix rvec_;
  CMatrix cvec_;
};

/// exp(-i H dt) psi
inline PureState expm_step(const OperatorMatrix& h, double dt, const PureState& psi) {
  require_same_space(h.space(), psi.space(), "expm_step");
  const SpectralPropagator prop(h);
  return PureState::normalized(psi.space(), prop.apply(psi.amplitudes(), dt));
}

namespace detail {
inline constexpr double kPropagationNormDrift = 1e-8;

inline PureState checked_state(const SpaceDescriptor& space, CVector v, int step) {
  const double n = v.norm();
  if (!std::isfinite(n) || std::abs(n - 1.0) > kPropagationNormDrift) {
    throw NumericalError("norm drifted to " + std::to_string(n) + " at grid point " + std::to_string(step));
  }
  return PureState::normalized(space, std::move(v));
}
}  // namespace detail

inline Trajectory propagate(const PureState& initial, const DriftSpec& drift, const PulseSet& pulse) {
  pulse.validate();
  const RealHamiltonian ham(initial.space(), drift);
  const double dt = pulse.dt();
  Trajectory traj;
  traj.states.reserve(static_cast<std::size_t>(pulse.n_steps) + 1);
  traj.states.push_back(initial);
  traj.leak_max = top_level_population(initial.space(), initial.amplitudes());
  CVector v = initial.amplitudes();
  for (int k = 0; k < pulse.n_steps; ++k) {
    v = SpectralPropagator(ham.at(pulse.samples(k))).apply(v, dt);
    traj.states.push_back(detail::checked_state(initial.space(), v, k + 1));
    traj.leak_max = std::max(traj.leak_max, top_level_population(initial.space(), v));
  }
  return traj;
}

inline constexpr double kUnitarityTolerance = 1e-10;

/// Time-ordered product exp(-i H_{n-1} dt) ... exp(-i H_0 dt).
inline OperatorMatrix build_unitary(const SpaceDescriptor& space, const DriftSpec& drift, const PulseSet& pulse) {
  pulse.validate();
  const RealHamiltonian ham(space, drift);
  const double dt = pulse.dt();
  CMatrix u = CMatrix::Identity(space.dim(), space.dim());
  for (int k = 0; k < pulse.n_steps; ++k) u = SpectralPropagator(ham.at(pulse.samples(k))).apply(u, dt);
  OperatorMatrix out(space, std::move(u));
  if (const double defect = out.unitarity_defect(); defect >= kUnitarityTolerance) {
    throw NumericalError("propagator unitarity defect " + std::to_string(defect));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pulse CSV
//
//   # revmetro-pulse v1
//   # t_final=40
//   # n_steps=2000
//   # channels=f_x,f_z,g1,g2
//   t,f_x,f_z,g1,g2
//   0,<f_x[0]>,<f_z[0]>,<g1[0]>,<g2[0]>
//   ...
//
// t is the left edge of each interval; all values use 17 significant digits.

inline void write_pulse_csv(std::ostream& os, const PulseSet& pulse,
                            const std::vector<std::pair<std::string, std::string>>& extra_meta = {}) {
  pulse.validate();
  os << "# revmetro-pulse v1\n";
  os << std::setprecision(17);
  os << "# t_final=" << pulse.t_final << "\n";
  os << "# n_steps=" << pulse.n_steps << "\n";
  os << "# channels=f_x,f_z,g1,g2\n";
  for (const auto& [k, v] : extra_meta) os << "# " << k << "=" << v << "\n";
  os << "t,f_x,f_z,g1,g2\n";
  const double dt = pulse.dt();
  for (int k = 0; k < pulse.n_steps; ++k) {
    os << k * dt;
    for (int c = 0; c < kNumChannels; ++c) os << ',' << pulse.channels[c][k];
    os << '\n';
  }
}

namespace detail {
inline double parse_double(std::string_view s, std::size_t line) {
  std::string tmp(s);
  try {
    std::size_t pos = 0;
    const double v = std::stod(tmp, &pos);
    while (pos < tmp.size() && std::isspace(static_cast<unsigned char>(tmp[pos]))) ++pos;
    if (pos != tmp.size()) throw ParseError("trailing characters in number '" + tmp + "'", line);
    return v;
  } catch (const std::logic_error&) {
    throw ParseError("not a number: '" + tmp + "'", line);
  }
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}
}  // namespace detail

inline PulseSet read_pulse_csv(std::istream& is) {
  PulseSet pulse;
  pulse.t_final = std::numeric_limits<double>::quiet_NaN();
  pulse.n_steps = -1;
  bool header_seen = false;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(is, raw)) {
    ++line;
    const auto text = detail::trim(raw);
    if (text.empty()) continue;
    if (text.front() == '#') {
      const auto body = detail::trim(text.substr(1));
      const auto eq = body.find('=');
      if (eq == std::string_view::npos) continue;
      const auto key = detail::trim(body.substr(0, eq));
      const auto value = detail::trim(body.substr(eq + 1));
      if (key == "t_final") {
        pulse.t_final = detail::parse_double(value, line);
      } else if (key == "n_steps") {
        const double n = detail::parse_double(value, line);
        if (n != std::floor(n) || n <= 0 || n > 1e9) throw ParseError("n_steps must be a positive integer", line);
        pulse.n_steps = static_cast<int>(n);
      } else if (key == "channels" && value != "f_x,f_z,g1,g2") {
        throw ParseError("unsupported channel list '" + std::string(value) + "'", line);
      }
      continue;
    }
    const auto cols = detail::split(text, ',');
    if (cols.size() != kNumChannels + 1) {
      throw ParseError("expected 5 columns, found " + std::to_string(cols.size()), line);
    }
    if (!header_seen) {
      if (detail::trim(cols[0]) != "t") throw ParseError("missing column header row", line);
      for (int c = 0; c < kNumChannels; ++c) {
        if (detail::trim(cols[c + 1]) != kChannelNames[c]) throw ParseError("unexpected column name", line);
      }
      header_seen = true;
      continue;
    }
    detail::parse_double(cols[0], line);
    for (int c = 0; c < kNumChannels; ++c) pulse.channels[c].push_back(detail::parse_double(cols[c + 1], line));
  }
  if (!header_seen) throw ParseError("no data header found", line);
  if (!(pulse.t_final > 0.0)) throw ParseError("missing or invalid '# t_final=' metadata", 0);
  if (pulse.n_steps <= 0) throw ParseError("missing '# n_steps=' metadata", 0);
  if (pulse.channels[0].size() != static_cast<std::size_t>(pulse.n_steps)) {
    throw ParseError("found " + std::to_string(pulse.channels[0].size()) + " rows, header declares n_steps=" +
                         std::to_string(pulse.n_steps),
                     line);
  }
  try {
    pulse.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError(e.what(), 0);
  }
  return pulse;
}

inline PulseSet read_pulse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open pulse file " + path, 0);
  return read_pulse_csv(in);
}

}  // namespace revmetro
