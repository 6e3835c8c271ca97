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

// Truncated composite space TLS (x) Fock_1 (x) Fock_2, its canonical operators
// and the named states used by the protocol.
//
// Basis convention: |s, n1, n2> lives at index s*c1*c2 + n1*c2 + n2 (TLS
// slowest). TLS level 0 is the ground/ancilla state with sigma_z|0> = +|0>,
// and sigma_plus raises |0> -> |1>.

#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "revmetro/errors.hpp"

namespace revmetro {

using Complex = std::complex<double>;
using CVector = Eigen::VectorXcd;
using CMatrix = Eigen::MatrixXcd;

inline constexpr double kStateNormTolerance = 1e-10;
inline constexpr double kHermitianTolerance = 1e-12;

enum class Slot { kTls, kMode1, kMode2 };

struct BasisLabel {
  int tls = 0;
  int n1 = 0;
  int n2 = 0;
  friend bool operator==(const BasisLabel&, const BasisLabel&) = default;
};

class SpaceDescriptor {
 public:
  static constexpr int kTlsDim = 2;

  SpaceDescriptor(int cutoff1, int cutoff2) : cutoff1_(cutoff1), cutoff2_(cutoff2) {
    if (cutoff1 < 2 || cutoff2 < 2) {
      throw InvalidArgument("Fock cutoffs must be >= 2, got (" + std::to_string(cutoff1) + ", " +
                            std::to_string(cutoff2) + ")");
    }
  }

  /// Default truncation for resource photon number N: levels 0..N+1 in both modes.
  static SpaceDescriptor for_photon_number(int n, int headroom = 2) {
    if (n < 0 || headroom < 1) throw InvalidArgument("photon number must be >= 0 and headroom >= 1");
    return SpaceDescriptor(n + headroom, n + headroom);
  }

  int tls_dim() const { return kTlsDim; }
  int cutoff1() const { return cutoff1_; }
  int cutoff2() const { return cutoff2_; }
  Eigen::Index dim() const { return Eigen::Index{kTlsDim} * cutoff1_ * cutoff2_; }

  int slot_dim(Slot slot) const {
    switch (slot) {
      case Slot::kTls: return kTlsDim;
      case Slot::kMode1: return cutoff1_;
      case Slot::kMode2: return cutoff2_;
    }
    return 0;
  }

  bool contains(const BasisLabel& l) const {
    return l.tls >= 0 && l.tls < kTlsDim && l.n1 >= 0 && l.n1 < cutoff1_ && l.n2 >= 0 && l.n2 < cutoff2_;
  }

  Eigen::Index index(const BasisLabel& l) const {
    if (!contains(l)) {
      throw InvalidArgument("basis label |" + std::to_string(l.tls) + "," + std::to_string(l.n1) + "," +
                            std::to_string(l.n2) + "> outside space with cutoffs (" +
                            std::to_string(cutoff1_) + ", " + std::to_string(cutoff2_) + ")");
    }
    return (Eigen::Index{l.tls} * cutoff1_ + l.n1) * cutoff2_ + l.n2;
  }

  BasisLabel label(Eigen::Index idx) const {
    if (idx < 0 || idx >= dim()) throw InvalidArgument("basis index out of range");
    const auto c2 = static_cast<Eigen::Index>(cutoff2_);
    const auto c12 = static_cast<Eigen::Index>(cutoff1_) * c2;
    return {static_cast<int>(idx / c12), static_cast<int>((idx % c12) / c2), static_cast<int>(idx % c2)};
  }

  friend bool operator==(const SpaceDescriptor&, const SpaceDescriptor&) = default;

 private:
  int cutoff1_;
  int cutoff2_;
};

inline void require_same_space(const SpaceDescriptor& a, const SpaceDescriptor& b, const char* what) {
  if (!(a == b)) throw InvalidArgument(std::string(what) + ": mismatched spaces");
}

/// Unit-norm state vector on a SpaceDescriptor.
class PureState {
 public:
  PureState(SpaceDescriptor space, CVector amplitudes) : space_(space), amplitudes_(std::move(amplitudes)) {
    if (amplitudes_.size() != space_.dim()) throw InvalidArgument("amplitude vector length != space dimension");
    const double n = amplitudes_.norm();
    if (!std::isfinite(n) || std::abs(n - 1.0) > kStateNormTolerance) {
      throw NumericalError("state norm " + std::to_string(n) + " deviates from 1");
    }
  }

  /// Rescales `v` to unit norm. Zero vectors are rejected.
  static PureState normalized(SpaceDescriptor space, CVector v) {
    const double n = v.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericalError("cannot normalize a zero or non-finite vector");
    v /= n;
    return PureState(space, std::move(v));
  }

  const SpaceDescriptor& space() const { return space_; }
  const CVector& amplitudes() const { return amplitudes_; }
  Complex amplitude(const BasisLabel& l) const { return amplitudes_(space_.index(l)); }
  double norm() const { return amplitudes_.norm(); }

 private:
  SpaceDescriptor space_;
  CVector amplitudes_;
};

inline Complex inner(const PureState& bra, const PureState& ket) {
  require_same_space(bra.space(), ket.space(), "inner");
  return bra.amplitudes().dot(ket.amplitudes());
}

/// |<a|b>|, the global-phase-insensitive overlap.
inline double overlap_abs(const PureState& a, const PureState& b) { return std::abs(inner(a, b)); }

class OperatorMatrix {
 public:
  OperatorMatrix(SpaceDescriptor space, CMatrix entries, bool hermitian_hint = false)
      : space_(space), entries_(std::move(entries)), hermitian_(hermitian_hint) {
    if (entries_.rows() != space_.dim() || entries_.cols() != space_.dim()) {
      throw InvalidArgument("operator shape does not match space dimension");
    }
    if (hermitian_ && hermiticity_defect() >= kHermitianTolerance) {
      throw NumericalError("operator flagged Hermitian has |M - M^dag|_max = " +
                           std::to_string(hermiticity_defect()));
    }
  }

  static OperatorMatrix identity(SpaceDescriptor space) {
    return OperatorMatrix(space, CMatrix::Identity(space.dim(), space.dim()), true);
  }

  const SpaceDescriptor& space() const { return space_; }
  const CMatrix& entries() const { return entries_; }
  bool hermitian_hint() const { return hermitian_; }

  double hermiticity_defect() const { return (entries_ - entries_.adjoint()).cwiseAbs().maxCoeff(); }

  /// |M^dag M - I|_max
  double unitarity_defect() const {
    return (entries_.adjoint() * entries_ - CMatrix::Identity(entries_.rows(), entries_.cols())).cwiseAbs().maxCoeff();
  }

  OperatorMatrix adjoint() const { return OperatorMatrix(space_, entries_.adjoint(), hermitian_); }

  CVector apply(const CVector& v) const { return entries_ * v; }
  CVector apply(const PureState& psi) const {
    require_same_space(space_, psi.space(), "OperatorMatrix::apply");
    return entries_ * psi.amplitudes();
  }

  friend OperatorMatrix operator*(const OperatorMatrix& a, const OperatorMatrix& b) {
    require_same_space(a.space_, b.space_, "operator product");
    return OperatorMatrix(a.space_, a.entries_ * b.entries_);
  }

 private:
  SpaceDescriptor space_;
  CMatrix entries_;
  bool hermitian_;
};

/// Applies a (near-)unitary operator and returns the result as a state.
/// Fails if the norm drifts by more than kStateNormTolerance.
inline PureState evolve(const OperatorMatrix& u, const PureState& psi) { return PureState(psi.space(), u.apply(psi)); }

/// Weighted list of pure states; rho = sum_k w_k |psi_k><psi_k|.
class Ensemble {
 public:
  struct Component {
    double weight;
    PureState state;
  };

  explicit Ensemble(std::vector<Component> components) : components_(std::move(components)) {
    if (components_.empty()) throw InvalidArgument("ensemble needs at least one component");
    double total = 0.0;
    for (const auto& c : components_) {
      if (!(c.weight >= 0.0)) throw InvalidArgument("ensemble weights must be >= 0");
      require_same_space(components_.front().state.space(), c.state.space(), "Ensemble");
      total += c.weight;
    }
    if (std::abs(total - 1.0) > kStateNormTolerance) {
      throw InvalidArgument("ensemble weights sum to " + std::to_string(total) + ", expected 1");
    }
  }

  static Ensemble pure(const PureState& psi) { return Ensemble({{1.0, psi}}); }

  const std::vector<Component>& components() const { return components_; }
  const SpaceDescriptor& space() const { return components_.front().state.space(); }

  CMatrix density_matrix() const {
    const auto d = space().dim();
    CMatrix rho = CMatrix::Zero(d, d);
    for (const auto& c : components_) {
      rho.noalias() += c.weight * c.state.amplitudes() * c.state.amplitudes().adjoint();
    }
    return rho;
  }

 private:
  std::vector<Component> components_;
};

// ---------------------------------------------------------------------------
// Single-subsystem operators

/// Truncated annihilation operator on levels 0..d-1: a_{n-1,n} = sqrt(n).
inline CMatrix annihilation(int d) {
  if (d < 2) throw InvalidArgument("Fock cutoff must be >= 2, got " + std::to_string(d));
  CMatrix a = CMatrix::Zero(d, d);
  for (int n = 1; n < d; ++n) a(n - 1, n) = std::sqrt(static_cast<double>(n));
  return a;
}

inline CMatrix creation(int d) { return annihilation(d).adjoint(); }

inline CMatrix number_operator(int d) {
  CMatrix n = CMatrix::Zero(d, d);
  for (int k = 0; k < d; ++k) n(k, k) = static_cast<double>(k);
  return n;
}

inline CMatrix pauli_x() {
  CMatrix m(2, 2);
  m << 0.0, 1.0, 1.0, 0.0;
  return m;
}

inline CMatrix pauli_z() {
  CMatrix m(2, 2);
  m << 1.0, 0.0, 0.0, -1.0;
  return m;
}

/// |1><0|
inline CMatrix sigma_plus() {
  CMatrix m = CMatrix::Zero(2, 2);
  m(1, 0) = 1.0;
  return m;
}

/// |0><1|
inline CMatrix sigma_minus() { return sigma_plus().adjoint(); }

/// |s><s| on the TLS.
inline CMatrix tls_projector(int s) {
  if (s != 0 && s != 1) throw InvalidArgument("TLS level must be 0 or 1");
  CMatrix m = CMatrix::Zero(2, 2);
  m(s, s) = 1.0;
  return m;
}

inline CMatrix kron(const CMatrix& a, const CMatrix& b) {
  CMatrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

/// Places a single-subsystem operator in the full space, identity elsewhere.
inline OperatorMatrix embed(const CMatrix& op, Slot slot, const SpaceDescriptor& space) {
  const int d = space.slot_dim(slot);
  if (op.rows() != d || op.cols() != d) {
    throw InvalidArgument("embed: operator is " + std::to_string(op.rows()) + "x" + std::to_string(op.cols()) +
                          " but slot has dimension " + std::to_string(d));
  }
  const CMatrix id_tls = CMatrix::Identity(2, 2);
  const CMatrix id1 = CMatrix::Identity(space.cutoff1(), space.cutoff1());
  const CMatrix id2 = CMatrix::Identity(space.cutoff2(), space.cutoff2());
  CMatrix full;
  switch (slot) {
    case Slot::kTls: full = kron(op, kron(id1, id2)); break;
    case Slot::kMode1: full = kron(id_tls, kron(op, id2)); break;
    case Slot::kMode2: full = kron(id_tls, kron(id1, op)); break;
  }
  const bool herm = (op - op.adjoint()).cwiseAbs().maxCoeff() < kHermitianTolerance;
  return OperatorMatrix(space, std::move(full), herm);
}

// ---------------------------------------------------------------------------
// Named states and observables

inline PureState fock_state(const SpaceDescriptor& space, int s, int n1, int n2) {
  CVector v = CVector::Zero(space.dim());
  v(space.index({s, n1, n2})) = 1.0;
  return PureState(space, std::move(v));
}

/// |0>(|N,0> + sign |0,N>)/sqrt(2)
inline PureState noon_state(const SpaceDescriptor& space, int n, int sign) {
  if (sign != 1 && sign != -1) throw InvalidArgument("NOON sign must be +1 or -1");
  if (n < 1) throw InvalidArgument("NOON photon number must be >= 1");
  if (n >= space.cutoff1() || n >= space.cutoff2()) {
    throw InvalidArgument("NOON photon number " + std::to_string(n) + " does not fit below the Fock cutoffs");
  }
  CVector v = CVector::Zero(space.dim());
  const double h = 1.0 / std::sqrt(2.0);
  v(space.index({0, n, 0})) = h;
  v(space.index({0, 0, n})) = sign * h;
  return PureState(space, std::move(v));
}

inline OperatorMatrix mode_number_operator(const SpaceDescriptor& space, Slot mode) {
  if (mode == Slot::kTls) throw InvalidArgument("mode_number_operator needs a photonic slot");
  return embed(number_operator(space.slot_dim(mode)), mode, space);
}

/// N = a1^dag a1 + a2^dag a2 (diagonal).
inline OperatorMatrix total_photon_operator(const SpaceDescriptor& space) {
  CMatrix n = CMatrix::Zero(space.dim(), space.dim());
  for (Eigen::Index i = 0; i < space.dim(); ++i) {
    const auto l = space.label(i);
    n(i, i) = static_cast<double>(l.n1 + l.n2);
  }
  return OperatorMatrix(space, std::move(n), true);
}

/// <psi|O|psi> without any Hermiticity assumption.
inline Complex expectation_value(const PureState& psi, const OperatorMatrix& op) {
  require_same_space(psi.space(), op.space(), "expectation");
  return psi.amplitudes().dot(op.entries() * psi.amplitudes());
}

inline Complex expectation_value(const Ensemble& rho, const OperatorMatrix& op) {
  Complex acc = 0.0;
  for (const auto& c : rho.components()) acc += c.weight * expectation_value(c.state, op);
  return acc;
}

namespace detail {
inline double real_expectation(Complex v, const OperatorMatrix& op) {
  if (!op.hermitian_hint()) throw InvalidArgument("real expectation requested for an operator without hermitian_hint");
  if (std::abs(v.imag()) >= 1e-10) {
    throw NumericalError("expectation of a Hermitian operator has imaginary part " + std::to_string(v.imag()));
  }
  return v.real();
}
}  // namespace detail

/// Real expectation of a Hermitian observable.
inline double expectation(const PureState& psi, const OperatorMatrix& op) {
  return detail::real_expectation(expectation_value(psi, op), op);
}

inline double expectation(const Ensemble& rho, const OperatorMatrix& op) {
  return detail::real_expectation(expectation_value(rho, op), op);
}

}  // namespace revmetro
