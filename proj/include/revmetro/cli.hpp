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

// Experiment runner: run configuration, pulse cache and the command bodies
// behind tools/revmetro.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "revmetro/dynamics.hpp"
#include "revmetro/errors.hpp"
#include "revmetro/hilbert.hpp"
#include "revmetro/krotov.hpp"
#include "revmetro/loss.hpp"
#include "revmetro/metrology.hpp"

namespace revmetro::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitValidation = 2,
  kExitConvergence = 3,
  kExitNumerical = 4,
};

inline const KrotovConfig kOptimizerDefaults{};

struct RunConfig {
  int n = 1;
  int n_x = 0;  // 0 means N
  double omega1 = 1.0;
  double omega2 = 2.0;
  double t_final = 40.0;
  int n_steps = PulseSet{}.n_steps;
  int cutoff_headroom = 2;
  std::array<double, kNumChannels> lambda_a = kOptimizerDefaults.lambda_a;
  double ramp_fraction = kOptimizerDefaults.ramp_fraction;
  double target_infidelity = kOptimizerDefaults.target_infidelity;
  int max_iters = kOptimizerDefaults.max_iters;
  double guess_coupling = kOptimizerDefaults.guess.coupling_amplitude;
  double guess_drive = kOptimizerDefaults.guess.drive_amplitude;
  double guess_frequency = kOptimizerDefaults.guess.drive_frequency;
  double guess_bias = kOptimizerDefaults.guess.bias;
  std::optional<std::uint64_t> guess_seed;
  double guess_perturbation = kOptimizerDefaults.guess.perturbation;
  int phi_points = 6000;
  double p0 = 0.9;
  double p1 = 0.05;
  double p2 = 0.05;
  std::optional<double> loss_lambda1;
  std::optional<double> loss_lambda2;
  std::optional<double> loss_dt;
  int n_min = 1;
  int n_max = 10;
  std::string out_dir = "out";
  std::string pulse_cache = "pulse_cache";
  int jobs = 1;

  int resolved_n_x() const { return n_x == 0 ? n : n_x; }
  SpaceDescriptor space() const { return SpaceDescriptor::for_photon_number(n, cutoff_headroom); }
  DriftSpec drift() const { return DriftSpec{omega1, omega2}; }

  KrotovConfig krotov() const {
    KrotovConfig k;
    k.lambda_a = lambda_a;
    k.ramp_fraction = ramp_fraction;
    k.max_iters = max_iters;
    k.target_infidelity = target_infidelity;
    k.guess.coupling_amplitude = guess_coupling;
    k.guess.drive_amplitude = guess_drive;
    k.guess.drive_frequency = guess_frequency;
    k.guess.bias = guess_bias;
    k.guess.seed = guess_seed;
    k.guess.perturbation = guess_perturbation;
    return k;
  }

  bool uses_rates() const { return loss_lambda1 || loss_lambda2 || loss_dt; }

  LossSpec loss() const {
    if (uses_rates()) {
      if (!(loss_lambda1 && loss_lambda2 && loss_dt)) {
        throw InvalidArgument("rate-based loss needs loss_lambda1, loss_lambda2 and loss_dt");
      }
      return LossSpec::from_rates(*loss_lambda1, *loss_lambda2, *loss_dt);
    }
    return LossSpec::from_probabilities(p0, p1, p2);
  }

  void validate() const {
    if (n < 1) throw InvalidArgument("N must be >= 1");
    if (cutoff_headroom < 1) {
      throw InvalidArgument("cutoff_headroom must be >= 1 (N must lie below the Fock cutoff N + cutoff_headroom)");
    }
    const int cutoff = n + cutoff_headroom;
    if (n_x < 0 || resolved_n_x() >= cutoff) {
      throw InvalidArgument("N_x = " + std::to_string(resolved_n_x()) + " must lie in [1, " + std::to_string(cutoff - 1) + "]");
    }
    if (!(omega1 > 0.0) || !(omega2 > 0.0)) throw InvalidArgument("omega1 and omega2 must be > 0");
    if (!(t_final > 0.0) || !std::isfinite(t_final)) throw InvalidArgument("t_final must be > 0");
    if (n_steps < 1) throw InvalidArgument("n_steps must be >= 1");
    krotov().validate();
    if (!(guess_coupling >= 0.0) || !(guess_drive >= 0.0) || !(guess_perturbation >= 0.0)) {
      throw InvalidArgument("guess amplitudes must be >= 0");
    }
    if (phi_points < 2) throw InvalidArgument("phi_points must be >= 2");
    if (n_min < 1 || n_max < n_min) throw InvalidArgument("scaling range needs 1 <= n_min <= n_max");
    if (jobs < 1) throw InvalidArgument("jobs must be >= 1");
    if (out_dir.empty() || pulse_cache.empty()) throw InvalidArgument("out_dir and pulse_cache must be non-empty");
    (void)loss();
  }
};

namespace detail {

inline std::string trim_copy(std::string_view s) { return std::string(revmetro::detail::trim(s)); }

inline double to_double(const std::string& key, const std::string& v, std::size_t line) {
  try {
    return revmetro::detail::parse_double(v, line);
  } catch (const ParseError&) {
    throw ParseError("key '" + key + "': expected a number, got '" + v + "'", line);
  }
}

inline long long to_integer(const std::string& key, const std::string& v, std::size_t line) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ParseError("key '" + key + "': expected an integer, got '" + v + "'", line);
  return out;
}

}  // namespace detail

/// Sets one key. Unknown keys are rejected by name.
inline void set_key(RunConfig& c, const std::string& key, const std::string& value, std::size_t line = 0) {
  const auto num = [&] { return detail::to_double(key, value, line); };
  const auto integer = [&] { return static_cast<int>(detail::to_integer(key, value, line)); };
  if (key == "N") c.n = integer();
  else if (key == "N_x") c.n_x = integer();
  else if (key == "omega1") c.omega1 = num();
  else if (key == "omega2") c.omega2 = num();
  else if (key == "t_final") c.t_final = num();
  else if (key == "n_steps") c.n_steps = integer();
  else if (key == "cutoff_headroom") c.cutoff_headroom = integer();
  else if (key == "lambda_a") {
    const auto parts = revmetro::detail::split(value, ',');
    if (parts.size() == 1) {
      c.lambda_a.fill(num());
    } else if (parts.size() == kNumChannels) {
      for (int i = 0; i < kNumChannels; ++i) c.lambda_a[i] = detail::to_double(key, detail::trim_copy(parts[i]), line);
    } else {
      throw ParseError("key 'lambda_a': expected 1 or 4 comma-separated values", line);
    }
  } else if (key == "ramp_fraction") c.ramp_fraction = num();
  else if (key == "target_infidelity") c.target_infidelity = num();
  else if (key == "max_iters") c.max_iters = integer();
  else if (key == "guess_coupling") c.guess_coupling = num();
  else if (key == "guess_drive") c.guess_drive = num();
  else if (key == "guess_frequency") c.guess_frequency = num();
  else if (key == "guess_bias") c.guess_bias = num();
  else if (key == "guess_seed") {
    const auto s = detail::to_integer(key, value, line);
    if (s < 0) throw ParseError("key 'guess_seed' must be >= 0", line);
    c.guess_seed = s == 0 ? std::nullopt : std::optional<std::uint64_t>(static_cast<std::uint64_t>(s));
  } else if (key == "guess_perturbation") c.guess_perturbation = num();
  else if (key == "phi_points") c.phi_points = integer();
  else if (key == "p0") c.p0 = num();
  else if (key == "p1") c.p1 = num();
  else if (key == "p2") c.p2 = num();
  else if (key == "loss_lambda1") c.loss_lambda1 = num();
  else if (key == "loss_lambda2") c.loss_lambda2 = num();
  else if (key == "loss_dt") c.loss_dt = num();
  else if (key == "n_min") c.n_min = integer();
  else if (key == "n_max") c.n_max = integer();
  else if (key == "out_dir") c.out_dir = value;
  else if (key == "pulse_cache") c.pulse_cache = value;
  else if (key == "jobs") c.jobs = integer();
  else throw InvalidArgument("unknown config key '" + key + "'" + (line ? " (line " + std::to_string(line) + ")" : ""));
}

/// "key = value" per line; '#' starts a comment.
inline void apply_config_text(RunConfig& c, std::istream& is) {
  std::string raw;
  std::size_t line = 0;
  std::set<std::string> seen;
  while (std::getline(is, raw)) {
    ++line;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const auto text = detail::trim_copy(raw);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value', got '" + text + "'", line);
    const auto key = detail::trim_copy(std::string_view(text).substr(0, eq));
    const auto value = detail::trim_copy(std::string_view(text).substr(eq + 1));
    if (key.empty() || value.empty()) throw ParseError("empty key or value", line);
    if (!seen.insert(key).second) throw ParseError("duplicate key '" + key + "'", line);
    set_key(c, key, value, line);
  }
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InvalidArgument("cannot open config file '" + path + "'");
  RunConfig c;
  apply_config_text(c, f);
  return c;
}

/// "key=value"
inline void apply_override(RunConfig& c, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw InvalidArgument("override must look like key=value, got '" + kv + "'");
  set_key(c, detail::trim_copy(std::string_view(kv).substr(0, eq)), detail::trim_copy(std::string_view(kv).substr(eq + 1)));
}

// ---------------------------------------------------------------------------
// Files

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Writes through a temporary sibling and renames it into place.
inline void write_atomic(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw InvalidArgument("cannot write '" + tmp.string() + "'");
    body(f);
    f.flush();
    if (!f) throw NumericalError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  write_atomic(path, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
}

enum class PairSet { kNoon, kAdapted };

inline std::string pair_set_name(PairSet p) { return p == PairSet::kNoon ? "noon" : "adapted"; }

inline std::vector<StatePair> pairs_for(const RunConfig& c, PairSet p) {
  return p == PairSet::kNoon ? noon_pairs(c.space(), c.n, c.resolved_n_x()) : adapted_pairs(c.space(), c.n, c.resolved_n_x());
}

/// Everything that shapes the optimized pulse, in canonical text form.
inline std::string cache_descriptor(const RunConfig& c, PairSet p) {
  std::ostringstream os;
  os << "revmetro-pulse-cache v1\n";
  os << "pairs=" << pair_set_name(p) << "\nN=" << c.n << "\nN_x=" << c.resolved_n_x();
  os << "\ncutoff=" << c.space().cutoff1() << "," << c.space().cutoff2();
  os << "\nomega1=" << format_double(c.omega1) << "\nomega2=" << format_double(c.omega2);
  os << "\nt_final=" << format_double(c.t_final) << "\nn_steps=" << c.n_steps;
  os << "\nlambda_a=";
  for (int i = 0; i < kNumChannels; ++i) os << (i ? "," : "") << format_double(c.lambda_a[i]);
  os << "\nramp_fraction=" << format_double(c.ramp_fraction);
  os << "\ntarget_infidelity=" << format_double(c.target_infidelity) << "\nmax_iters=" << c.max_iters;
  os << "\nguess=" << format_double(c.guess_coupling) << "," << format_double(c.guess_drive) << ","
     << format_double(c.guess_frequency) << "," << format_double(c.guess_bias) << ","
     << (c.guess_seed ? std::to_string(*c.guess_seed) : "none") << "," << format_double(c.guess_perturbation);
  os << "\n";
  return os.str();
}

inline std::string cache_key(const RunConfig& c, PairSet p) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(cache_descriptor(c, p));
  return os.str();
}

inline std::filesystem::path pulse_path(const RunConfig& c, PairSet p) {
  return std::filesystem::path(c.pulse_cache) /
         ("pulse_N" + std::to_string(c.n) + "_" + pair_set_name(p) + "_" + cache_key(c, p) + ".csv");
}

inline std::filesystem::path history_path(const RunConfig& c, PairSet p) {
  auto path = pulse_path(c, p);
  path.replace_extension(".history.csv");
  return path;
}

inline std::filesystem::path with_failed_suffix(std::filesystem::path p) {
  p += ".failed";
  return p;
}

inline void write_history(std::ostream& os, const OptimizationRecord& rec) {
  os << std::setprecision(17) << "iteration,infidelity,max_update\n";
  for (const auto& it : rec.iterations) os << it.iteration << ',' << it.infidelity << ',' << it.max_update << '\n';
}

// ---------------------------------------------------------------------------
// Commands

struct CommandContext {
  std::ostream* log = &std::cerr;
  std::mutex log_mutex;

  void say(const std::string& s) {
    std::lock_guard<std::mutex> lock(log_mutex);
    *log << s << '\n';
  }
};

inline std::string stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::kConverged: return "converged";
    case StopReason::kMaxIterations: return "max_iterations";
    case StopReason::kStagnated: return "stagnated";
  }
  return "unknown";
}

inline int cmd_synthesize(const RunConfig& c, PairSet p, CommandContext& ctx) {
  c.validate();
  const auto pulse_file = pulse_path(c, p);
  const auto history_file = history_path(c, p);
  const auto summary_file = std::filesystem::path(c.out_dir) / ("synthesize_N" + std::to_string(c.n) + "_" + pair_set_name(p) + ".json");
  const auto problem = ControlProblem(pairs_for(c, p), c.drift(), c.t_final, c.n_steps);

  if (std::filesystem::exists(pulse_file) && std::filesystem::exists(history_file)) {
    ctx.say("cache hit: " + pulse_file.string());
  } else {
    ctx.say("optimizing N=" + std::to_string(c.n) + " (" + pair_set_name(p) + ", key " + cache_key(c, p) + ")");
    const auto rec = optimize(problem, c.krotov(), std::nullopt, [&](const IterationInfo& it) {
      if (it.iteration % 100 == 0) {
        ctx.say("  iter " + std::to_string(it.iteration) + "  J_T " + format_double(it.infidelity));
      }
      return true;
    });
    const std::vector<std::pair<std::string, std::string>> meta = {
        {"pairs", pair_set_name(p)},
        {"N", std::to_string(c.n)},
        {"N_x", std::to_string(c.resolved_n_x())},
        {"cache_key", cache_key(c, p)},
        {"iterations", std::to_string(rec.iterations.size() - 1)},
        {"final_infidelity", format_double(rec.final_infidelity())},
    };
    const bool ok = rec.converged;
    write_atomic(ok ? pulse_file : with_failed_suffix(pulse_file),
                 [&](std::ostream& os) { write_pulse_csv(os, rec.final_pulse, meta); });
    write_atomic(ok ? history_file : with_failed_suffix(history_file), [&](std::ostream& os) { write_history(os, rec); });
    if (!ok) {
      ctx.say("not converged (" + stop_reason_name(rec.reason) + ", J_T " + format_double(rec.final_infidelity()) +
              "); partial pulse kept at " + with_failed_suffix(pulse_file).string());
      return kExitConvergence;
    }
  }

  // The summary is rebuilt from the cached files so a cache hit reproduces it exactly.
  const auto pulse = read_pulse_file(pulse_file.string());
  const auto u = build_unitary(c.space(), c.drift(), pulse);
  std::vector<double> mapping;
  for (const auto& pair : problem.pairs()) mapping.push_back(std::norm(pair.target.amplitudes().dot(u.apply(pair.initial.amplitudes()))));
  std::ifstream hist(history_file);
  std::string line, last;
  std::size_t rows = 0;
  std::getline(hist, line);
  while (std::getline(hist, line)) {
    if (!line.empty()) {
      last = line;
      ++rows;
    }
  }
  const auto fields = revmetro::detail::split(last, ',');
  nlohmann::ordered_json j;
  j["command"] = "synthesize";
  j["N"] = c.n;
  j["N_x"] = c.resolved_n_x();
  j["pairs"] = pair_set_name(p);
  j["cache_key"] = cache_key(c, p);
  j["pulse_file"] = pulse_file.filename().string();
  j["history_file"] = history_file.filename().string();
  j["iterations"] = rows == 0 ? 0 : rows - 1;
  j["final_infidelity"] = fields.size() == 3 ? revmetro::detail::parse_double(fields[1], 0) : 1.0;
  j["pair_overlap2"] = mapping;
  write_json(summary_file, j);
  ctx.say("wrote " + summary_file.string());
  return kExitOk;
}

/// U from the cached pulse, or the exact completion.
inline OperatorMatrix protocol_unitary(const RunConfig& c, PairSet p, bool exact) {
  if (exact) return exact_completion_unitary(pairs_for(c, p));
  const auto file = pulse_path(c, p);
  if (!std::filesystem::exists(file)) {
    throw InvalidArgument("no optimized pulse for this configuration (" + file.string() + "); run `revmetro synthesize --n " +
                          std::to_string(c.n) + (p == PairSet::kAdapted ? " --adapted" : "") +
                          "` with the same config first, or pass --exact");
  }
  return build_unitary(c.space(), c.drift(), read_pulse_file(file.string()));
}

inline nlohmann::ordered_json protocol_summary(const RunConfig& c, const SweepResult& r, bool exact) {
  const auto inv = summarize(r);
  double fmin = r.fisher.front(), fmax = r.fisher.front(), fsum = 0.0;
  for (double f : r.fisher) {
    fmin = std::min(fmin, f);
    fmax = std::max(fmax, f);
    fsum += f;
  }
  const int nx = c.resolved_n_x();
  double dev1 = 0.0, dev2 = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double s = std::pow(std::sin(c.n * r.phi[i] / 2.0), 2);
    dev1 = std::max(dev1, std::abs(r.mean_n[i] - nx * s));
    dev2 = std::max(dev2, std::abs(r.mean_n2[i] - double(nx) * nx * s));
  }
  nlohmann::ordered_json j;
  j["command"] = "protocol";
  j["N"] = c.n;
  j["N_x"] = nx;
  j["source"] = exact ? std::string("exact") : "pulse:" + cache_key(c, PairSet::kNoon);
  j["phi_points"] = r.size();
  j["excluded"] = inv.excluded;
  j["fisher"] = {{"min", fmin}, {"max", fmax}, {"mean", fsum / double(r.size())}, {"N2", double(c.n) * c.n}};
  j["inverse_uncertainty"] = {{"max", inv.max}, {"median", inv.median}, {"mean", inv.mean}};
  j["closed_form_max_abs_dev"] = {{"mean_N", dev1}, {"mean_N2", dev2}};
  return j;
}

inline SweepResult run_protocol_sweep(const RunConfig& c, bool exact, int jobs) {
  c.validate();
  const ProtocolSpec spec(c.n, c.resolved_n_x(), protocol_unitary(c, PairSet::kNoon, exact));
  return sweep(spec, c.phi_points, jobs);
}

inline int cmd_protocol(const RunConfig& c, bool exact, CommandContext& ctx) {
  const auto r = run_protocol_sweep(c, exact, c.jobs);
  const auto dir = std::filesystem::path(c.out_dir);
  const auto stem = "protocol_N" + std::to_string(c.n);
  write_atomic(dir / (stem + ".csv"), [&](std::ostream& os) { write_sweep_csv(os, r); });
  write_json(dir / (stem + ".json"), protocol_summary(c, r, exact));
  ctx.say("wrote " + (dir / (stem + ".csv")).string());
  return kExitOk;
}

inline int cmd_loss(const RunConfig& c, bool exact, CommandContext& ctx) {
  c.validate();
  const auto loss = c.loss();
  const AdaptedProtocolSpec spec(ProtocolSpec(c.n, c.resolved_n_x(), protocol_unitary(c, PairSet::kAdapted, exact)));
  const auto r = loss_sweep(spec, loss, c.phi_points, c.jobs);
  const auto dir = std::filesystem::path(c.out_dir);
  const auto stem = "loss_N" + std::to_string(c.n);
  write_atomic(dir / (stem + ".csv"), [&](std::ostream& os) { write_loss_csv(os, r); });

  std::vector<double> inv_sim, inv_rec;
  double eq17_dev = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (r.excluded[i]) continue;
    inv_sim.push_back(1.0 / *r.delta_phi_sim[i]);
    inv_rec.push_back(1.0 / *r.delta_phi_recovered[i]);
    eq17_dev = std::max(eq17_dev, std::abs(*r.delta_phi_sim[i] - r.delta_phi_eq17[i]));
  }
  if (inv_sim.empty()) throw NumericalError("every phase point was excluded");
  const auto [smin, smax] = std::minmax_element(inv_sim.begin(), inv_sim.end());
  const auto [rmin, rmax] = std::minmax_element(inv_rec.begin(), inv_rec.end());
  const auto [fmin, fmax] = std::minmax_element(r.fisher_sim.begin(), r.fisher_sim.end());
  const auto [qmin, qmax] = std::minmax_element(r.povm_success.begin(), r.povm_success.end());
  nlohmann::ordered_json j;
  j["command"] = "loss";
  j["N"] = c.n;
  j["N_x"] = c.resolved_n_x();
  j["source"] = exact ? std::string("exact") : "pulse:" + cache_key(c, PairSet::kAdapted);
  if (loss.has_rates()) {
    j["loss"] = {{"mode", "rates"}, {"lambda1", loss.lambda1()}, {"lambda2", loss.lambda2()}, {"dt", loss.dt()}};
  } else {
    j["loss"] = {{"mode", "probabilities"}, {"p0", c.p0}, {"p1", c.p1}, {"p2", c.p2}};
  }
  j["phi_points"] = r.size();
  j["excluded"] = r.size() - inv_sim.size();
  j["inverse_uncertainty_sim"] = {{"min", *smin}, {"max", *smax}};
  j["max_abs_dev_delta_phi_vs_closed_form"] = eq17_dev;
  j["fisher_sim"] = {{"min", *fmin}, {"max", *fmax}};
  j["fisher_p0N2"] = r.fisher_p0n2.front();
  j["povm_success"] = {{"min", *qmin}, {"max", *qmax}};
  j["inverse_uncertainty_recovered"] = {{"min", *rmin}, {"max", *rmax}};
  write_json(dir / (stem + ".json"), j);
  ctx.say("wrote " + (dir / (stem + ".csv")).string());
  return kExitOk;
}

/// Maps an exception from a command body to its exit code.
inline int exit_code_for(std::exception_ptr e, std::string* message = nullptr) {
  try {
    std::rethrow_exception(e);
  } catch (const InvalidArgument& x) {
    if (message) *message = x.what();
    return kExitValidation;
  } catch (const ParseError& x) {
    if (message) *message = x.what();
    return kExitValidation;
  } catch (const ConvergenceError& x) {
    if (message) *message = x.what();
    return kExitConvergence;
  } catch (const NumericalError& x) {
    if (message) *message = x.what();
    return kExitNumerical;
  } catch (const std::exception& x) {
    if (message) *message = x.what();
    return 1;
  }
}

inline int cmd_scaling(const RunConfig& c, bool exact, CommandContext& ctx) {
  c.validate();
  std::vector<int> ns;
  for (int n = c.n_min; n <= c.n_max; ++n) ns.push_back(n);
  std::vector<std::optional<SweepResult>> results(ns.size());
  std::vector<std::string> errors(ns.size());
  std::vector<int> codes(ns.size(), kExitOk);
  std::vector<RunConfig> members(ns.size(), c);
  for (std::size_t i = 0; i < ns.size(); ++i) {
    members[i].n = ns[i];
    members[i].n_x = 0;
  }
  parallel_for(ns.size(), c.jobs, [&](std::size_t i) {
    try {
      results[i] = run_protocol_sweep(members[i], exact, 1);
      ctx.say("N=" + std::to_string(ns[i]) + " done");
    } catch (...) {
      codes[i] = exit_code_for(std::current_exception(), &errors[i]);
      ctx.say("N=" + std::to_string(ns[i]) + " failed: " + errors[i]);
    }
  });

  const auto dir = std::filesystem::path(c.out_dir);
  std::vector<SweepResult> ok;
  nlohmann::ordered_json j;
  j["command"] = "scaling";
  j["source"] = exact ? "exact" : "pulses";
  j["members"] = nlohmann::ordered_json::array();
  int code = kExitOk;
  for (std::size_t i = 0; i < ns.size(); ++i) {
    if (results[i]) {
      ok.push_back(*results[i]);
      j["members"].push_back(protocol_summary(members[i], *results[i], exact));
    } else {
      j["members"].push_back({{"N", ns[i]}, {"error", errors[i]}, {"exit_code", codes[i]}});
      if (code == kExitOk) code = codes[i];
    }
  }
  j["partial"] = ok.size() != ns.size();
  if (ok.size() >= 2) {
    const auto fit = scaling_fit(ok);
    auto fj = [](const ProportionalFit& f) { return nlohmann::ordered_json{{"slope", f.slope}, {"rms_residual", f.rms_residual}}; };
    j["fits"] = {{"max_inverse_vs_N", fj(fit.max_inverse)},
                 {"median_inverse_vs_N", fj(fit.median_inverse)},
                 {"mean_inverse_vs_N", fj(fit.mean_inverse)},
                 {"fisher_vs_N2", fj(fit.fisher)}};
  }
  write_atomic(dir / "scaling.csv", [&](std::ostream& os) {
    os << "N,phi,mean_N,mean_N2,delta_phi,inv_delta_phi,fisher,excluded\n";
    for (const auto& r : ok) {
      std::ostringstream body;
      write_sweep_csv(body, r);
      std::istringstream lines(body.str());
      std::string row;
      std::getline(lines, row);
      while (std::getline(lines, row)) os << r.n << ',' << row << '\n';
    }
  });
  write_json(dir / "scaling.json", j);
  ctx.say("wrote " + (dir / "scaling.json").string());
  return code;
}

// ---------------------------------------------------------------------------
// Oracle cross-checks

struct CheckResult {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double bound = 0.0;
  std::string detail;
};

/// (|0,0,0> + |0,2,1> + |1,1,3>)/sqrt(3): not an eigenvector of sum L^dag L,
/// so the jump unraveling and the Euler step differ at O(dt^2).
inline PureState lindblad_probe_state() {
  const SpaceDescriptor space(4, 5);
  CVector v = CVector::Zero(space.dim());
  v(space.index({0, 0, 0})) = 1.0;
  v(space.index({0, 2, 1})) = 1.0;
  v(space.index({1, 1, 3})) = 1.0;
  return PureState::normalized(space, v);
}

inline double jump_vs_euler_max_error(const PureState& psi, const LossSpec& loss) {
  return (jump_decompose(psi, loss).density_matrix() - lindblad_euler_oracle(psi, loss)).cwiseAbs().maxCoeff();
}

inline std::vector<CheckResult> run_verification(const RunConfig& c) {
  c.validate();
  std::vector<CheckResult> out;
  {
    const auto psi = lindblad_probe_state();
    const double lam1 = c.loss_lambda1.value_or(0.1), lam2 = c.loss_lambda2.value_or(0.1);
    const double e1 = jump_vs_euler_max_error(psi, LossSpec::from_rates(lam1, lam2, 1e-2));
    const double e2 = jump_vs_euler_max_error(psi, LossSpec::from_rates(lam1, lam2, 5e-3));
    const double ratio = e1 / e2;
    out.push_back({"lindblad_vs_jump_dt2_ratio", ratio >= 3.5 && ratio <= 4.5, ratio, 4.0,
                   "max error " + format_double(e1) + " at dt=1e-2, " + format_double(e2) + " at dt=5e-3"});
  }
  {
    const auto space = c.space();
    const ProtocolSpec spec = ProtocolSpec::exact(space, c.n, c.resolved_n_x());
    double worst = 0.0;
    for (double phi : {-2.1, -0.4, 0.3, 1.7}) {
      const double analytic = fisher_pure(spec, phi);
      const double fd = fisher_sld_dense(
          [&](double x) {
            const auto s = run_protocol(spec, x);
            return CMatrix(s.amplitudes() * s.amplitudes().adjoint());
          },
          phi);
      worst = std::max(worst, std::abs(analytic - fd) / analytic);
    }
    out.push_back({"pure_fisher_vs_finite_difference_sld", worst <= 1e-5, worst, 1e-5, "relative, N=" + std::to_string(c.n)});
  }
  {
    const int n = std::max(c.n, 2);
    const auto space = SpaceDescriptor::for_photon_number(n, c.cutoff_headroom);
    const auto spec = AdaptedProtocolSpec::exact(space, n);
    const auto loss = c.loss();
    double worst = 0.0;
    for (double phi : {-2.1, -0.4, 0.3, 1.7}) {
      const double analytic = *fisher_mixed(decayed_protocol_with_derivatives(spec.base(), loss, phi));
      const double fd = fisher_sld_dense([&](double x) { return decayed_protocol(spec, loss, x).density_matrix(); }, phi);
      worst = std::max(worst, std::abs(analytic - fd) / analytic);
    }
    out.push_back({"mixed_fisher_vs_finite_difference_sld", worst <= 1e-5, worst, 1e-5, "relative, N=" + std::to_string(n)});
  }
  {
    const auto space = c.space();
    const auto pairs = noon_pairs(space, c.n, c.resolved_n_x());
    const ProtocolSpec a(c.n, c.resolved_n_x(), exact_completion_unitary(pairs, 0));
    const ProtocolSpec b(c.n, c.resolved_n_x(), exact_completion_unitary(pairs, 12345));
    double worst = 0.0;
    for (double phi : phase_grid(64)) {
      worst = std::max(worst, (run_protocol(a, phi).amplitudes() - run_protocol(b, phi).amplitudes()).cwiseAbs().maxCoeff());
    }
    out.push_back({"completion_invariance", worst <= 1e-10, worst, 1e-10, "max amplitude difference"});
  }
  return out;
}

inline int cmd_verify(const RunConfig& c, CommandContext& ctx) {
  const auto checks = run_verification(c);
  nlohmann::ordered_json j;
  j["command"] = "verify";
  j["checks"] = nlohmann::ordered_json::array();
  bool all = true;
  for (const auto& r : checks) {
    all = all && r.pass;
    ctx.say(std::string(r.pass ? "PASS " : "FAIL ") + r.name + "  value=" + format_double(r.value) + "  (" + r.detail + ")");
    j["checks"].push_back({{"name", r.name}, {"pass", r.pass}, {"value", r.value}, {"bound", r.bound}, {"detail", r.detail}});
  }
  j["pass"] = all;
  write_json(std::filesystem::path(c.out_dir) / "verify.json", j);
  return all ? kExitOk : kExitNumerical;
}

}  // namespace revmetro::cli
