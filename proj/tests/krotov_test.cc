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

#include "revmetro/krotov.hpp"

#include <cmath>
#include <random>

#include "gtest/gtest.h"
#include "revmetro/metrology.hpp"

using namespace revmetro;

namespace {

// |0,0,0> -> |1,0,0> with only sigma_x active.
ControlProblem tls_toy(int n_steps = 100) {
  const SpaceDescriptor s(2, 2);
  return ControlProblem({{fock_state(s, 0, 0, 0), fock_state(s, 1, 0, 0)}}, DriftSpec{}, 5.0, n_steps);
}

KrotovConfig tls_config() {
  KrotovConfig c;
  c.active = {true, false, false, false};
  c.lambda_a.fill(5.0);
  c.max_iters = 200;
  return c;
}

double j_of(const ControlProblem& p, const PulseSet& pulse) {
  const RealHamiltonian ham(p.space(), p.drift());
  std::vector<PureState> init, tgt;
  for (const auto& pr : p.pairs()) {
    init.push_back(pr.initial);
    tgt.push_back(pr.target);
  }
  return infidelity(propagate_final(init, interval_propagators(ham, pulse), pulse.dt()), tgt);
}

}  // namespace

TEST(infidelity, examples) {
  const SpaceDescriptor s(2, 2);
  const auto a = fock_state(s, 0, 0, 0), b = fock_state(s, 1, 0, 0);
  EXPECT_DOUBLE_EQ(infidelity({a}, {a}), 0.0);
  EXPECT_DOUBLE_EQ(infidelity({a}, {b}), 1.0);
  const auto h = PureState::normalized(s, a.amplitudes() + b.amplitudes());
  EXPECT_NEAR(infidelity({h}, {a}), 0.5, 1e-15);
  EXPECT_THROW(infidelity({a, b}, {a}), InvalidArgument);
}

TEST(problem, orthonormality_enforced) {
  const SpaceDescriptor s(3, 3);
  const auto a = fock_state(s, 0, 0, 0);
  EXPECT_THROW(ControlProblem({{a, a}, {a, fock_state(s, 0, 1, 0)}}, {}, 1.0, 10), InvalidArgument);
  EXPECT_THROW(ControlProblem({{a, a}, {fock_state(s, 0, 1, 0), a}}, {}, 1.0, 10), InvalidArgument);
  EXPECT_THROW(ControlProblem({}, {}, 1.0, 10), InvalidArgument);
  EXPECT_NO_THROW(ControlProblem({{a, a}, {fock_state(s, 0, 1, 0), fock_state(s, 0, 0, 1)}}, {}, 1.0, 10));
}

TEST(shape, examples) {
  EXPECT_EQ(shape_function(0.1, 0.0, 40.0), 0.0);
  EXPECT_EQ(shape_function(0.1, 40.0, 40.0), 0.0);
  EXPECT_DOUBLE_EQ(shape_function(0.1, 20.0, 40.0), 1.0);
  EXPECT_NEAR(shape_function(0.1, 2.0, 40.0), 0.5, 1e-15);
  EXPECT_NEAR(shape_function(0.1, 38.0, 40.0), 0.5, 1e-15);
  EXPECT_THROW(shape_function(0.5, 1.0, 40.0), InvalidArgument);
  EXPECT_THROW(shape_function(0.0, 1.0, 40.0), InvalidArgument);
  for (double t = 0; t <= 40; t += 0.37) {
    const double v = shape_function(0.2, t, 40.0);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(config, validation) {
  KrotovConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lambda_a[2] = 0.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = KrotovConfig{};
  c.target_infidelity = 1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = KrotovConfig{};
  c.ramp_fraction = 0.6;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(guess, deterministic_and_shaped) {
  KrotovConfig c;
  const auto a = guess_pulse(40.0, 400, c);
  const auto b = guess_pulse(40.0, 400, c);
  EXPECT_EQ(a, b);
  EXPECT_NEAR(a.channel(Channel::kG1)[0], 0.0, 1e-3);
  EXPECT_NEAR(a.channel(Channel::kG1)[200], c.guess.coupling_amplitude, 1e-12);
  EXPECT_NEAR(a.channel(Channel::kFz)[200], c.guess.bias, 1e-12);
  c.guess.seed = 3;
  const auto p = guess_pulse(40.0, 400, c);
  const auto q = guess_pulse(40.0, 400, c);
  EXPECT_EQ(p, q);
  EXPECT_NE(p, a);
  c.active = {false, true, true, true};
  EXPECT_EQ(guess_pulse(40.0, 400, c).channel(Channel::kFx), std::vector<double>(400, 0.0));
}

TEST(costate, terminal_examples) {
  const SpaceDescriptor s(2, 2);
  const auto a = fock_state(s, 0, 0, 0), b = fock_state(s, 1, 0, 0);
  EXPECT_LT((terminal_costate(a, a, 1) - a.amplitudes()).norm(), 1e-15);
  EXPECT_EQ(terminal_costate(a, b, 1).norm(), 0.0);
  EXPECT_NEAR(terminal_costate(a, a, 4).norm(), 0.25, 1e-15);
}

TEST(costate, finite_difference_of_terminal_functional) {
  // J(phi + d) - J(phi) = -2 Re <d|chi> + O(|d|^2) for a single pair.
  const SpaceDescriptor s(2, 3);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  CVector phi(s.dim()), tgt(s.dim()), d(s.dim());
  for (Eigen::Index i = 0; i < s.dim(); ++i) {
    phi(i) = Complex(g(rng), g(rng));
    tgt(i) = Complex(g(rng), g(rng));
    d(i) = Complex(g(rng), g(rng));
  }
  phi.normalize();
  tgt.normalize();
  d *= 1e-6;
  auto j = [&](const CVector& v) { return 1.0 - std::norm(tgt.dot(v)); };
  const CVector chi = terminal_costate(phi, tgt, 1);
  EXPECT_NEAR(j(phi + d) - j(phi), -2.0 * d.dot(chi).real(), 1e-11);
}

TEST(costate, backward_invariants) {
  const auto problem = tls_toy(50);
  auto pulse = PulseSet::zeros(5.0, 50);
  for (int k = 0; k < 50; ++k) pulse.channel(Channel::kFx)[k] = 0.2 * std::sin(0.3 * k);
  const RealHamiltonian ham(problem.space(), problem.drift());
  const auto steps = interval_propagators(ham, pulse);
  const CVector chi_t = 0.7 * problem.pairs()[0].target.amplitudes();
  const auto chi = backward_propagate(chi_t, steps, pulse.dt());
  const auto phi = propagate(problem.pairs()[0].initial, problem.drift(), pulse);
  const Complex c0 = chi[0].dot(phi.states[0].amplitudes());
  for (int k = 0; k <= 50; ++k) {
    EXPECT_NEAR(chi[k].norm(), 0.7, 1e-12);
    EXPECT_LT(std::abs(chi[k].dot(phi.states[k].amplitudes()) - c0), 1e-12);
  }
}

TEST(costate, zero_pulse_only_drift_phase) {
  const SpaceDescriptor s(3, 3);
  const auto pulse = PulseSet::zeros(2.0, 10);
  const CVector chi_t = fock_state(s, 0, 1, 1).amplitudes();
  const auto chi = backward_propagate(chi_t, s, DriftSpec{1.0, 2.0}, pulse);
  EXPECT_NEAR(std::arg(chi[0](s.index({0, 1, 1})) / std::polar(1.0, 3.0 * 2.0)), 0.0, 1e-12);
}

TEST(gradient, interval_coupling_matches_finite_difference) {
  const auto problem = tls_toy(40);
  auto pulse = PulseSet::zeros(5.0, 40);
  for (int k = 0; k < 40; ++k) {
    pulse.channel(Channel::kFx)[k] = 0.15 + 0.1 * std::cos(0.2 * k);
    pulse.channel(Channel::kFz)[k] = 0.3;
  }
  const RealHamiltonian ham(problem.space(), problem.drift());
  const auto steps = interval_propagators(ham, pulse);
  const auto& pair = problem.pairs()[0];
  const auto fwd = propagate(pair.initial, problem.drift(), pulse);
  const auto chi = backward_propagate(terminal_costate(fwd.states.back(), pair.target, 1), steps, pulse.dt());
  const double dt = pulse.dt();
  for (int n : {0, 7, 20, 39}) {
    const auto c = interval_coupling(steps[n], dt, chi[n + 1], fwd.states[n].amplitudes(), ham, {true, true, true, true});
    for (int l : {0, 1}) {
      const double analytic = -2.0 * dt * c[l].imag();
      const double h = 1e-5;
      auto up = pulse, dn = pulse;
      up.channels[l][n] += h;
      dn.channels[l][n] -= h;
      const double fd = (j_of(problem, up) - j_of(problem, dn)) / (2 * h);
      EXPECT_NEAR(analytic, fd, 1e-6 * std::abs(fd)) << "n=" << n << " l=" << l;
    }
  }
}

TEST(update, zero_costates_or_shape_leave_pulse) {
  const auto problem = tls_toy(20);
  const RealHamiltonian ham(problem.space(), problem.drift());
  auto pulse = PulseSet::zeros(5.0, 20);
  for (auto& x : pulse.channel(Channel::kFx)) x = 0.1;
  const auto steps = interval_propagators(ham, pulse);
  const std::vector<std::vector<CVector>> zero(1, std::vector<CVector>(21, CVector::Zero(problem.space().dim())));
  const auto out = krotov_update({problem.pairs()[0].initial}, pulse, steps, zero, ham, tls_config());
  EXPECT_EQ(out.pulse, pulse);
  EXPECT_EQ(out.max_update, 0.0);
}

TEST(optimize, tls_toy_monotone_and_converges) {
  const auto problem = tls_toy();
  auto cfg = tls_config();
  cfg.guess.drive_amplitude = 0.05;
  cfg.guess.bias = 0.0;
  const auto rec = optimize(problem, cfg);
  ASSERT_TRUE(rec.converged);
  EXPECT_LE(rec.final_infidelity(), cfg.target_infidelity);
  for (std::size_t i = 1; i < rec.iterations.size(); ++i) {
    EXPECT_LE(rec.iterations[i].infidelity, rec.iterations[i - 1].infidelity + kMonotonicityTolerance);
  }
  // Mapping correctness at convergence.
  const auto u = build_unitary(problem.space(), problem.drift(), rec.final_pulse);
  const auto& pr = problem.pairs()[0];
  EXPECT_GE(std::norm(pr.target.amplitudes().dot(u.apply(pr.initial))), 1.0 - rec.final_infidelity() - 1e-12);
}

TEST(optimize, satisfied_guess_converges_at_iteration_zero) {
  const SpaceDescriptor s(2, 2);
  const auto a = fock_state(s, 0, 0, 0);
  KrotovConfig cfg;
  cfg.guess.drive_amplitude = 0.0;
  cfg.guess.bias = 0.0;
  const auto rec = optimize(ControlProblem({{a, a}}, {}, 1.0, 10), cfg);
  EXPECT_TRUE(rec.converged);
  EXPECT_EQ(rec.iterations.size(), 1u);
}

TEST(optimize, observer_can_stop_and_grid_checked) {
  const auto problem = tls_toy();
  int calls = 0;
  const auto rec = optimize(problem, tls_config(), std::nullopt, [&](const IterationInfo&) { return ++calls < 3; });
  EXPECT_EQ(calls, 3);
  EXPECT_FALSE(rec.converged);
  EXPECT_THROW(optimize(problem, tls_config(), PulseSet::zeros(5.0, 99)), InvalidArgument);
}

TEST(optimize, tiny_lambda_reports_non_monotone_step) {
  const auto problem = tls_toy(50);
  auto cfg = tls_config();
  cfg.lambda_a.fill(1e-4);
  EXPECT_THROW(optimize(problem, cfg), ConvergenceError);
}

TEST(optimize, noon_n1_defaults) {
  const auto space = SpaceDescriptor::for_photon_number(1);
  const auto problem = noon_control_problem(space, 1, 1, DriftSpec{}, 40.0, 400);
  const auto rec = optimize(problem, KrotovConfig{});
  EXPECT_TRUE(rec.converged);
  for (std::size_t i = 1; i < rec.iterations.size(); ++i) {
    EXPECT_LE(rec.iterations[i].infidelity, rec.iterations[i - 1].infidelity + kMonotonicityTolerance);
  }
}
