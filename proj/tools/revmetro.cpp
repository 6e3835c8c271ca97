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

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "revmetro/cli.hpp"

namespace {

struct Flags {
  std::string config;
  bool exact = false;
  bool adapted = false;
  std::optional<int> n;
  std::optional<std::string> out;
  std::optional<int> jobs;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Flags& f, bool with_exact, bool with_adapted) {
  cmd->add_option("--config", f.config, "run configuration file (key = value per line)");
  cmd->add_option("--n", f.n, "resource photon number N");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--jobs", f.jobs, "worker threads");
  cmd->add_option("--set", f.sets, "override a config key, key=value (repeatable)");
  if (with_exact) cmd->add_flag("--exact", f.exact, "use the exact unitary completion instead of an optimized pulse");
  if (with_adapted) cmd->add_flag("--adapted", f.adapted, "optimize the loss-adapted 4-pair problem");
}

revmetro::cli::RunConfig resolve(const Flags& f) {
  revmetro::cli::RunConfig c = f.config.empty() ? revmetro::cli::RunConfig{} : revmetro::cli::load_config_file(f.config);
  for (const auto& kv : f.sets) revmetro::cli::apply_override(c, kv);
  if (f.n) c.n = *f.n;
  if (f.out) c.out_dir = *f.out;
  if (f.jobs) c.jobs = *f.jobs;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace revmetro::cli;
  CLI::App app{"revmetro: NOON-state time-reversal metrology experiments"};
  app.require_subcommand(1);
  Flags f;
  auto* synth = app.add_subcommand("synthesize", "optimize control pulses (cached by content hash)");
  auto* proto = app.add_subcommand("protocol", "phase sweep of the time-reversal protocol");
  auto* loss = app.add_subcommand("loss", "phase sweep with single-photon loss and TLS post-selection");
  auto* scaling = app.add_subcommand("scaling", "protocol sweeps for N = n_min..n_max and slope fits");
  auto* verify = app.add_subcommand("verify", "oracle cross-checks");
  add_common(synth, f, false, true);
  add_common(proto, f, true, false);
  add_common(loss, f, true, false);
  add_common(scaling, f, true, false);
  add_common(verify, f, false, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }

  CommandContext ctx;
  try {
    const auto c = resolve(f);
    if (synth->parsed()) return cmd_synthesize(c, f.adapted ? PairSet::kAdapted : PairSet::kNoon, ctx);
    if (proto->parsed()) return cmd_protocol(c, f.exact, ctx);
    if (loss->parsed()) return cmd_loss(c, f.exact, ctx);
    if (scaling->parsed()) return cmd_scaling(c, f.exact, ctx);
    if (verify->parsed()) return cmd_verify(c, ctx);
  } catch (...) {
    std::string msg;
    const int rc = exit_code_for(std::current_exception(), &msg);
    std::cerr << "error: " << msg << '\n';
    return rc;
  }
  return kExitValidation;
}
