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

#include "revmetro/cli.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gtest/gtest.h"

using namespace revmetro;
using namespace revmetro::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("revmetro_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_tool(const std::string& args) {
  const std::string cmd = std::string(REVMETRO_TOOL_PATH) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

RunConfig parse(const std::string& text) {
  RunConfig c;
  std::istringstream is(text);
  apply_config_text(c, is);
  return c;
}

}  // namespace

TEST(config, parses_keys_and_comments) {
  const auto c = parse("# header\nN = 3\n  t_final=20 # trailing\n\nlambda_a = 0.5\np0 = 0.8\np1=0.1\np2 = 0.1\n");
  EXPECT_EQ(c.n, 3);
  EXPECT_DOUBLE_EQ(c.t_final, 20.0);
  for (double l : c.lambda_a) EXPECT_DOUBLE_EQ(l, 0.5);
  EXPECT_NO_THROW(c.validate());
  const auto d = parse("lambda_a = 1, 2, 3, 4\n");
  EXPECT_DOUBLE_EQ(d.lambda_a[3], 4.0);
}

TEST(config, defaults) {
  const RunConfig c;
  EXPECT_EQ(c.n_steps, 2000);
  EXPECT_DOUBLE_EQ(c.t_final, 40.0);
  EXPECT_EQ(c.phi_points, 6000);
  EXPECT_EQ(c.resolved_n_x(), 1);
  EXPECT_NO_THROW(c.validate());
}

TEST(config, unknown_key_is_named) {
  try {
    parse("N = 2\nlamda = 3\n");
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("lamda"), std::string::npos);
  }
  RunConfig c;
  EXPECT_THROW(apply_override(c, "bogus=1"), InvalidArgument);
  EXPECT_THROW(apply_override(c, "noequals"), InvalidArgument);
}

TEST(config, malformed_lines) {
  EXPECT_THROW(parse("N 3\n"), ParseError);
  EXPECT_THROW(parse("N = 3\nN = 4\n"), ParseError);
  EXPECT_THROW(parse("N = three\n"), ParseError);
  EXPECT_THROW(parse("N = 2.5\n"), ParseError);
  EXPECT_THROW(parse("lambda_a = 1,2\n"), ParseError);
  EXPECT_THROW(parse("t_final =\n"), ParseError);
  try {
    parse("N = 2\n\nomega1 = x\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(config, validation) {
  auto bad = [](const std::string& kv) {
    RunConfig c;
    apply_override(c, kv);
    EXPECT_THROW(c.validate(), InvalidArgument) << kv;
  };
  bad("N=0");
  bad("N_x=5");
  bad("omega1=0");
  bad("n_steps=0");
  bad("jobs=0");
  bad("p0=0.5");
  bad("loss_lambda1=0.1");
  bad("n_min=11");
  bad("ramp_fraction=0.6");
  RunConfig c;
  apply_override(c, "loss_lambda1=0.1");
  apply_override(c, "loss_lambda2=0.1");
  apply_override(c, "loss_dt=0.01");
  EXPECT_NO_THROW(c.validate());
  EXPECT_TRUE(c.loss().has_rates());
}

TEST(cache, key_tracks_every_pulse_parameter) {
  const RunConfig base;
  const auto k0 = cache_key(base, PairSet::kNoon);
  EXPECT_EQ(k0.size(), 16u);
  EXPECT_EQ(k0, cache_key(base, PairSet::kNoon));
  EXPECT_NE(k0, cache_key(base, PairSet::kAdapted));
  for (const std::string kv : {"N=2", "N_x=2", "omega1=1.5", "omega2=2.5", "t_final=30", "n_steps=100", "cutoff_headroom=3",
                               "lambda_a=0.31", "ramp_fraction=0.2", "target_infidelity=1e-4", "max_iters=10",
                               "guess_coupling=0.2", "guess_drive=0.1", "guess_frequency=1.1", "guess_bias=-0.4",
                               "guess_seed=7", "guess_perturbation=0.02"}) {
    RunConfig c;
    apply_override(c, kv);
    EXPECT_NE(cache_key(c, PairSet::kNoon), k0) << kv;
  }
  for (const std::string kv : {"phi_points=100", "p0=0.8", "out_dir=x", "jobs=3", "n_max=4"}) {
    RunConfig c;
    apply_override(c, kv);
    EXPECT_EQ(cache_key(c, PairSet::kNoon), k0) << kv;
  }
}

TEST(files, atomic_write_leaves_no_temporary) {
  const auto dir = scratch("atomic");
  const auto p = dir / "sub" / "a.txt";
  write_atomic(p, [](std::ostream& os) { os << "hello\n"; });
  EXPECT_EQ(slurp(p), "hello\n");
  write_atomic(p, [](std::ostream& os) { os << "again\n"; });
  EXPECT_EQ(slurp(p), "again\n");
  EXPECT_FALSE(fs::exists(dir / "sub" / "a.txt.tmp"));
  EXPECT_EQ(format_double(0.1), "0.10000000000000001");
}

TEST(exit_codes, mapping) {
  auto code = [](auto ex) { return exit_code_for(std::make_exception_ptr(ex)); };
  EXPECT_EQ(code(InvalidArgument("x")), 2);
  EXPECT_EQ(code(ParseError("x", 1)), 2);
  EXPECT_EQ(code(ConvergenceError("x")), 3);
  EXPECT_EQ(code(NumericalError("x")), 4);
}

TEST(tool, validation_errors_exit_2) {
  const auto dir = scratch("validation");
  EXPECT_EQ(run_tool("protocol --exact --n 0 --out " + dir.string()), 2);
  EXPECT_EQ(run_tool("protocol --exact --set bogus=1 --out " + dir.string()), 2);
  EXPECT_EQ(run_tool("protocol --no-such-flag"), 2);
  EXPECT_EQ(run_tool(""), 2);
  EXPECT_EQ(run_tool("protocol --config " + (dir / "missing.cfg").string()), 2);
  // Adapted pairs need N >= 2.
  EXPECT_EQ(run_tool("loss --exact --n 1 --out " + dir.string()), 2);
  // No cached pulse for this configuration.
  EXPECT_EQ(run_tool("protocol --n 2 --set pulse_cache=" + (dir / "cache").string() + " --out " + dir.string()), 2);
}

TEST(tool, protocol_exact_outputs_are_deterministic) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  const auto cfg = a / "run.cfg";
  {
    std::ofstream f(cfg);
    f << "N = 2\nphi_points = 300\n";
  }
  EXPECT_EQ(run_tool("protocol --exact --config " + cfg.string() + " --out " + a.string()), 0);
  EXPECT_EQ(run_tool("protocol --exact --config " + cfg.string() + " --jobs 3 --out " + b.string()), 0);
  EXPECT_EQ(slurp(a / "protocol_N2.csv"), slurp(b / "protocol_N2.csv"));
  EXPECT_EQ(slurp(a / "protocol_N2.json"), slurp(b / "protocol_N2.json"));
  const auto j = nlohmann::json::parse(slurp(a / "protocol_N2.json"));
  EXPECT_EQ(j["phi_points"], 300);
  EXPECT_NEAR(j["fisher"]["min"].get<double>(), 4.0, 1e-9);
  EXPECT_NEAR(j["inverse_uncertainty"]["median"].get<double>(), 2.0, 1e-9);
}

TEST(tool, loss_exact) {
  const auto dir = scratch("loss");
  EXPECT_EQ(run_tool("loss --exact --n 3 --set phi_points=120 --out " + dir.string()), 0);
  const auto j = nlohmann::json::parse(slurp(dir / "loss_N3.json"));
  EXPECT_NEAR(j["povm_success"]["min"].get<double>(), 0.9, 1e-10);
  EXPECT_NEAR(j["inverse_uncertainty_recovered"]["max"].get<double>(), 3.0, 1e-6);
  EXPECT_NEAR(j["fisher_p0N2"].get<double>(), 8.1, 1e-12);
}

TEST(tool, scaling_exact_and_partial) {
  const auto dir = scratch("scaling");
  EXPECT_EQ(run_tool("scaling --exact --set n_max=4 --set phi_points=100 --out " + dir.string()), 0);
  auto j = nlohmann::json::parse(slurp(dir / "scaling.json"));
  EXPECT_FALSE(j["partial"].get<bool>());
  EXPECT_NEAR(j["fits"]["median_inverse_vs_N"]["slope"].get<double>(), 1.0, 1e-9);
  EXPECT_NEAR(j["fits"]["fisher_vs_N2"]["slope"].get<double>(), 1.0, 1e-9);

  // No pulses in an empty cache: every member fails, the aggregate is partial.
  EXPECT_EQ(run_tool("scaling --set n_max=2 --set phi_points=50 --set pulse_cache=" + (dir / "empty").string() +
                     " --out " + dir.string()),
            2);
  j = nlohmann::json::parse(slurp(dir / "scaling.json"));
  EXPECT_TRUE(j["partial"].get<bool>());
  EXPECT_EQ(j["members"].size(), 2u);
}

TEST(tool, synthesize_failure_exits_3_and_keeps_partial_pulse) {
  const auto dir = scratch("synth_fail");
  const std::string args = "synthesize --n 1 --set max_iters=2 --set n_steps=50 --set pulse_cache=" +
                           (dir / "cache").string() + " --out " + dir.string();
  EXPECT_EQ(run_tool(args), 3);
  RunConfig c;
  apply_override(c, "max_iters=2");
  apply_override(c, "n_steps=50");
  c.pulse_cache = (dir / "cache").string();
  EXPECT_TRUE(fs::exists(with_failed_suffix(pulse_path(c, PairSet::kNoon))));
  EXPECT_FALSE(fs::exists(pulse_path(c, PairSet::kNoon)));
}

TEST(tool, synthesize_cache_hit_reproduces_summary) {
  // TLS-only problem converges in a few iterations on a coarse grid.
  const auto dir = scratch("synth_ok");
  const std::string common = " --n 1 --set n_steps=200 --set target_infidelity=0.5 --set pulse_cache=" +
                             (dir / "cache").string() + " --out " + dir.string();
  ASSERT_EQ(run_tool("synthesize" + common), 0);
  const auto first = slurp(dir / "synthesize_N1_noon.json");
  ASSERT_EQ(run_tool("synthesize" + common), 0);
  EXPECT_EQ(slurp(dir / "synthesize_N1_noon.json"), first);
  EXPECT_EQ(run_tool("protocol" + common + " --set phi_points=50"), 0);
}

TEST(tool, verify_passes) {
  const auto dir = scratch("verify");
  EXPECT_EQ(run_tool("verify --n 2 --out " + dir.string()), 0);
  const auto j = nlohmann::json::parse(slurp(dir / "verify.json"));
  EXPECT_TRUE(j["pass"].get<bool>());
  EXPECT_EQ(j["checks"].size(), 4u);
}
