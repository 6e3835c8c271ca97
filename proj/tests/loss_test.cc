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

#include "revmetro/loss.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "gtest/gtest.h"

using namespace revmetro;

namespace {

constexpr double kPi = std::numbers::pi;

PureState probe_state() {
  const SpaceDescriptor s(4, 5);
  CVector v = CVector::Zero(s.dim());
  v(s.index({0, 0, 0})) = 1.0;
  v(s.index({0, 2, 1})) = 1.0;
  v(s.index({1, 1, 3})) = 1.0;
  return PureState::normalized(s, v);
}

const LossSpec kFig5 = LossSpec::from_probabilities(0.9, 0.05, 0.05);

}  // namespace

TEST(loss_spec, validation) {
  EXPECT_THROW(LossSpec::from_probabilities(0.9, 0.05, 0.06), InvalidArgument);
  EXPECT_THROW(LossSpec::from_probabilities(1.1, -0.05, -0.05), InvalidArgument);
  EXPECT_THROW(LossSpec::from_rates(-0.1, 0.1, 0.01), InvalidArgument);
  EXPECT_THROW(LossSpec::from_rates(0.1, 0.1, 0.0), InvalidArgument);
  EXPECT_TRUE(LossSpec::from_rates(0.1, 0.1, 0.01).has_rates());
  EXPECT_FALSE(kFig5.has_rates());
}

TEST(effective_hamiltonian, anti_hermitian_diagonal) {
  const SpaceDescriptor s(3, 3);
  const auto h = effective_hamiltonian(s, 0.1, 0.2);
  EXPECT_FALSE(h.hermitian_hint());
  EXPECT_NEAR(h.entries()(s.index({0, 2, 1}), s.index({0, 2, 1})).imag(), -0.5 * (0.01 * 2 + 0.04 * 1), 1e-15);
  EXPECT_LT((h.entries() + h.entries().adjoint()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(effective_hamiltonian, noon_is_eigenvector_only_for_equal_rates) {
  const auto s = SpaceDescriptor::for_photon_number(3);
  const auto noon = noon_state(s, 3, 1).amplitudes();
  auto residual = [&](double l1, double l2) {
    const CVector hv = effective_hamiltonian(s, l1, l2).entries() * noon;
    const Complex ev = noon.dot(hv);
    return (hv - ev * noon).norm();
  };
  EXPECT_LT(residual(0.1, 0.1), 1e-15);
  EXPECT_GT(residual(0.1, 0.2), 1e-3);
}

TEST(jump, vacuum_has_no_jumps) {
  const auto s = SpaceDescriptor::for_photon_number(2);
  const auto rho = jump_decompose(fock_state(s, 0, 0, 0), LossSpec::from_rates(0.1, 0.1, 0.01));
  ASSERT_EQ(rho.components().size(), 1u);
  EXPECT_DOUBLE_EQ(rho.components()[0].weight, 1.0);
}

TEST(jump, probabilities_include_dt) {
  const auto s = SpaceDescriptor::for_photon_number(3);
  const double lam = 0.1, dt = 0.01;
  const auto rho = jump_decompose(noon_state(s, 3, 1), LossSpec::from_rates(lam, lam, dt));
  ASSERT_EQ(rho.components().size(), 3u);
  // p_j = dt lambda^2 <n_j> = dt lambda^2 N / 2
  EXPECT_NEAR(rho.components()[1].weight, dt * lam * lam * 1.5, 1e-15);
  EXPECT_NEAR(rho.components()[2].weight, dt * lam * lam * 1.5, 1e-15);
  EXPECT_NEAR(std::abs(rho.components()[1].state.amplitude({0, 2, 0})), 1.0, 1e-12);
  EXPECT_NEAR(std::abs(rho.components()[2].state.amplitude({0, 0, 2})), 1.0, 1e-12);
  EXPECT_NEAR(std::abs(inner(rho.components()[0].state, noon_state(s, 3, 1))), 1.0, 1e-12);
}

TEST(jump, first_order_guard) {
  const auto s = SpaceDescriptor::for_photon_number(3);
  EXPECT_THROW(jump_decompose(noon_state(s, 3, 1), LossSpec::from_rates(1.0, 1.0, 0.1)), InvalidArgument);
}

TEST(jump, lindblad_agreement_scales_as_dt_squared) {
  const auto psi = probe_state();
  auto err = [&](double dt) {
    const auto loss = LossSpec::from_rates(0.1, 0.1, dt);
    return (jump_decompose(psi, loss).density_matrix() - lindblad_euler_oracle(psi, loss)).cwiseAbs().maxCoeff();
  };
  const double ratio = err(1e-2) / err(5e-3);
  EXPECT_GT(ratio, 3.5);
  EXPECT_LT(ratio, 4.5);
  EXPECT_LT(err(1e-2), 1e-6);
}

TEST(jump, trace_preserved) {
  const auto psi = probe_state();
  const auto loss = LossSpec::from_rates(0.2, 0.1, 0.01);
  EXPECT_NEAR(jump_decompose(psi, loss).density_matrix().trace().real(), 1.0, 1e-12);
  EXPECT_NEAR(lindblad_euler_oracle(psi, loss).trace().real(), 1.0, 1e-12);
  EXPECT_THROW(lindblad_euler_oracle(psi, kFig5), InvalidArgument);
}

TEST(adapted, pairs_need_n_at_least_two) {
  EXPECT_THROW(adapted_pairs(SpaceDescriptor::for_photon_number(1), 1), InvalidArgument);
  const auto s = SpaceDescriptor::for_photon_number(3);
  const auto p = adapted_pairs(s, 3);
  ASSERT_EQ(p.size(), 4u);
  EXPECT_EQ(p[2].initial.amplitude({1, 3, 0}), Complex(1.0));
  EXPECT_EQ(p[2].target.amplitude({0, 2, 0}), Complex(1.0));
  EXPECT_EQ(p[3].initial.amplitude({1, 0, 3}), Complex(1.0));
  EXPECT_EQ(p[3].target.amplitude({0, 0, 2}), Complex(1.0));
  EXPECT_NO_THROW(adapted_control_problem(s, 3, DriftSpec{}, 40.0, 10));
}

TEST(adapted, spec_checks_jump_transfers) {
  const auto s = SpaceDescriptor::for_photon_number(3);
  EXPECT_THROW(AdaptedProtocolSpec(ProtocolSpec::exact(s, 3)), InvalidArgument);
  const auto spec = AdaptedProtocolSpec::exact(s, 3);
  EXPECT_NEAR(spec.worst_jump_overlap2(), 1.0, 1e-12);
}

TEST(decayed, tls_excited_population_equals_jump_probability) {
  const auto s = SpaceDescriptor::for_photon_number(3);
  const auto spec = AdaptedProtocolSpec::exact(s, 3);
  for (double phi : {-1.0, 0.2, 2.0}) {
    const auto rho = decayed_protocol(spec, kFig5, phi);
    const auto tls1 = embed(tls_projector(1), Slot::kTls, s);
    EXPECT_NEAR(expectation(rho, tls1), 0.1, 1e-12);
  }
}

TEST(decayed, mean_photon_closed_form) {
  const int n = 3;
  const auto spec = AdaptedProtocolSpec::exact(SpaceDescriptor::for_photon_number(n), n);
  for (double phi : phase_grid(50)) {
    const auto e = loss_photon_stats_and_uncertainty(spec, kFig5, phi);
    const double s2 = std::pow(std::sin(n * phi / 2), 2);
    EXPECT_NEAR(e.stats.mean_n, n * (0.9 * s2 + 0.1), 1e-10);
    if (e.delta_phi) EXPECT_NEAR(*e.delta_phi, loss_uncertainty_closed_form(n, 0.9, phi), 1e-8 * *e.delta_phi);
  }
}

TEST(decayed, minimum_uncertainty) {
  const int n = 3;
  const auto spec = AdaptedProtocolSpec::exact(SpaceDescriptor::for_photon_number(n), n);
  const auto e = loss_photon_stats_and_uncertainty(spec, kFig5, kPi / n);
  EXPECT_FALSE(e.delta_phi.has_value());
  // cos(N phi) = -1 is excluded; the infimum is approached nearby.
  EXPECT_NEAR(loss_uncertainty_closed_form(n, 0.9, kPi / n), 1.0 / (n * std::sqrt(0.9)), 1e-15);
  const auto near = loss_photon_stats_and_uncertainty(spec, kFig5, kPi / n + 0.01);
  EXPECT_NEAR(*near.delta_phi, 1.0 / (n * std::sqrt(0.9)), 1e-3);
}

TEST(decayed, no_loss_matches_lossless_protocol) {
  const int n = 2;
  const auto s = SpaceDescriptor::for_photon_number(n);
  const auto spec = AdaptedProtocolSpec::exact(s, n);
  const auto none = LossSpec::from_probabilities(1.0, 0.0, 0.0);
  for (double phi : {0.3, 1.2}) {
    const auto e = loss_photon_stats_and_uncertainty(spec, none, phi);
    EXPECT_NEAR(*e.delta_phi, 1.0 / n, 1e-10);
    EXPECT_NEAR(*recovered_uncertainty(spec, none, phi), *e.delta_phi, 1e-12);
  }
}

TEST(decayed, central_difference_rule_agrees) {
  const auto spec = AdaptedProtocolSpec::exact(SpaceDescriptor::for_photon_number(3), 3);
  const auto a = loss_photon_stats_and_uncertainty(spec, kFig5, 0.7);
  const auto b = loss_photon_stats_and_uncertainty(spec, kFig5, 0.7, DerivativeRule::central(1e-4));
  EXPECT_NEAR(*a.delta_phi, *b.delta_phi, 1e-6 * *a.delta_phi);
}

TEST(fisher, mixed_equals_p0_n_squared) {
  for (int n = 2; n <= 4; ++n) {
    const auto spec = AdaptedProtocolSpec::exact(SpaceDescriptor::for_photon_number(n), n);
    for (double phi : {-2.0, 0.3, 1.4}) {
      const auto d = decayed_protocol_with_derivatives(spec.base(), kFig5, phi);
      EXPECT_NEAR(*fisher_mixed(d), 0.9 * n * n, 1e-9 * n * n);
    }
  }
}

TEST(fisher, dense_sld_oracle_agrees) {
  const auto spec = AdaptedProtocolSpec::exact(SpaceDescriptor::for_photon_number(3), 3);
  for (double phi : {-1.1, 0.5}) {
    const double sld = fisher_sld_dense([&](double x) { return decayed_protocol(spec, kFig5, x).density_matrix(); }, phi);
    EXPECT_NEAR(sld, 8.1, 1e-5 * 8.1);
    EXPECT_NEAR(fisher_decayed(spec, kFig5, phi), 8.1, 1e-9);
  }
}

TEST(fisher, rate_mode_with_unequal_rates_matches_oracle) {
  // Weights depend on phi here; the analytic form must keep the dw^2/w term.
  const auto spec = AdaptedProtocolSpec::exact(SpaceDescriptor::for_photon_number(2), 2, 2, 7);
  const auto loss = LossSpec::from_rates(0.3, 0.1, 0.2);
  const double phi = 0.8;
  const auto d = decayed_protocol_with_derivatives(spec.base(), loss, phi);
  const auto analytic = fisher_mixed(d);
  ASSERT_TRUE(analytic.has_value());
  const double sld = fisher_sld_dense([&](double x) { return decayed_protocol(spec, loss, x).density_matrix(); }, phi);
  EXPECT_NEAR(*analytic, sld, 1e-5 * sld);
}

TEST(fisher, non_orthogonal_components_fall_back) {
  const SpaceDescriptor s(2, 2);
  const auto a = fock_state(s, 0, 0, 0);
  const auto b = PureState::normalized(s, a.amplitudes() + fock_state(s, 0, 1, 0).amplitudes());
  DecayedState d{Ensemble({{0.5, a}, {0.5, b}}), {0.0, 0.0}, {CVector::Zero(s.dim()), CVector::Zero(s.dim())}, {}};
  EXPECT_FALSE(fisher_mixed(d).has_value());
}

TEST(povm, recovers_heisenberg_limit) {
  const int n = 3;
  const auto spec = AdaptedProtocolSpec::exact(SpaceDescriptor::for_photon_number(n), n);
  for (double phi : {-2.5, -0.7, 0.4, 1.9}) {
    const auto out = povm_select(decayed_protocol(spec, kFig5, phi));
    EXPECT_NEAR(out.success_probability, 0.9, 1e-12);
    double total = 0.0;
    for (const auto& c : out.post_state.components()) total += c.weight;
    EXPECT_NEAR(total, 1.0, 1e-15);
    EXPECT_NEAR(1.0 / *recovered_uncertainty(spec, kFig5, phi), 3.0, 1e-9);
  }
}

TEST(povm, zero_success_is_an_error) {
  const SpaceDescriptor s(2, 2);
  EXPECT_THROW(povm_select(Ensemble::pure(fock_state(s, 1, 0, 0))), NumericalError);
}

TEST(sweep, loss_csv_columns_and_p0_one) {
  const auto spec = AdaptedProtocolSpec::exact(SpaceDescriptor::for_photon_number(2), 2);
  const auto r = loss_sweep(spec, LossSpec::from_probabilities(1.0, 0.0, 0.0), 40, 2);
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (r.excluded[i]) continue;
    EXPECT_NEAR(*r.delta_phi_sim[i], *r.delta_phi_recovered[i], 1e-12);
    EXPECT_NEAR(r.povm_success[i], 1.0, 1e-12);
  }
  std::ostringstream os;
  write_loss_csv(os, r);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
            "phi,mean_N,delta_phi_sim,delta_phi_eq17,fisher_sim,fisher_p0N2,povm_success,delta_phi_recovered,excluded");
}
