#include <gtest/gtest.h>

#include <cstdlib>

#include "semgrad/cli.hpp"
#include "support.hpp"

using namespace semgrad;
namespace fs = std::filesystem;

namespace {

cli::RunConfig fixture(const fs::path &out) {
  auto cfg = cli::load_run_config(support::source_path("data/gqa_scripted.json"));
  cfg.out = out.string();
  return cfg;
}

std::vector<std::string> lines(const std::string &s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);)
    if (!l.empty())
      out.push_back(l);
  return out;
}

} // namespace

TEST(Config, ResolvesPathsAgainstConfigDirectory) {
  auto cfg = cli::load_run_config(support::source_path("data/gqa_scripted.json"));
  EXPECT_EQ(cfg.builder, "gqa");
  EXPECT_EQ(cfg.matcher, Matcher::answer_tag);
  EXPECT_EQ(cfg.descent.seed, 7u);
  EXPECT_TRUE(fs::exists(cfg.train));
  EXPECT_TRUE(fs::exists(cfg.backend.script));
}

TEST(Config, RejectsUnknownKeysAndValues) {
  EXPECT_THROW(cli::parse_run_config(nlohmann::json::parse(R"({"descent": {"gate": "lt"}})")),
               ConfigError);
  EXPECT_THROW(cli::parse_run_config(nlohmann::json::parse("[1]")), ConfigError);
  EXPECT_THROW(cli::load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, OverridesAreExclusive) {
  auto cfg = cli::load_run_config(support::source_path("data/gqa_scripted.json"));
  cli::Overrides o;
  o.no_gradient = true;
  o.no_neighbor = true;
  EXPECT_THROW(cli::apply(cfg, o), ConfigError);
  cli::Overrides g;
  g.no_gate = true;
  g.iterations = 2;
  cli::apply(cfg, g);
  EXPECT_EQ(cfg.descent.gate, Gate::off);
  EXPECT_EQ(cfg.descent.max_iterations, 2u);
}

TEST(Optimize, ScriptedFixtureWritesArtifacts) {
  auto dir = support::fresh_dir("cli_optimize");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_optimize(fixture(dir), out, err), 0) << err.str();
  auto log = cli::read_runlog(dir / "runlog.jsonl");
  ASSERT_EQ(log.size(), 4u);
  for (std::size_t i = 0; i < log.size(); ++i)
    EXPECT_EQ(log[i].iteration, i + 1);
  EXPECT_TRUE(fs::exists(dir / "params.json"));
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
  EXPECT_TRUE(fs::exists(dir / "traces" / "iter_001.jsonl"));
  auto metrics = lines(support::slurp((dir / "metrics.csv").string()));
  ASSERT_EQ(metrics.size(), 5u);
  EXPECT_EQ(metrics[0].rfind("iteration,status,l_val_current", 0), 0u);
  EXPECT_NE(out.str().find("optimized 4 iterations"), std::string::npos);
}

TEST(Optimize, MissingApiKeyFailsBeforeAnyIteration) {
  auto dir = support::fresh_dir("cli_nokey");
  auto cfg = cli::load_run_config(support::source_path("data/gqa_live.json"));
  cfg.out = dir.string();
  cfg.backend.cache.clear();
  cfg.backend.http.api_key_env = "SEMGRAD_TEST_ABSENT_KEY";
  ::unsetenv("SEMGRAD_TEST_ABSENT_KEY");
  std::ostringstream out, err;
  EXPECT_EQ(cli::cmd_optimize(cfg, out, err), 2);
  EXPECT_NE(err.str().find("SEMGRAD_TEST_ABSENT_KEY"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "runlog.jsonl"));
}

TEST(Optimize, NoNeighborMarksEveryRecord) {
  auto dir = support::fresh_dir("cli_noneighbor");
  auto cfg = fixture(dir);
  cli::Overrides o;
  o.no_neighbor = true;
  cli::apply(cfg, o);
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_optimize(cfg, out, err), 0) << err.str();
  auto log = cli::read_runlog(dir / "runlog.jsonl");
  ASSERT_FALSE(log.empty());
  for (auto &r : log)
    EXPECT_EQ(r.mode, "no-neighbor");
  auto summary = nlohmann::json::parse(support::slurp((dir / "summary.json").string()));
  EXPECT_EQ(summary["ablation"], "no-neighbor");
}

TEST(Eval, SavedParamsReproduceFinalLoss) {
  auto dir = support::fresh_dir("cli_eval");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_optimize(fixture(dir), out, err), 0) << err.str();
  auto summary = nlohmann::json::parse(support::slurp((dir / "summary.json").string()));
  std::ostringstream eout, eerr;
  ASSERT_EQ(cli::cmd_eval(fixture(dir), (dir / "params.json").string(), "val", eout, eerr), 0)
      << eerr.str();
  auto report = nlohmann::json::parse(support::slurp((dir / "eval_val.json").string()));
  EXPECT_DOUBLE_EQ(report["loss_sum"].get<double>(), summary["final_val_loss"].get<double>());

  ASSERT_EQ(cli::cmd_eval(fixture(dir), (dir / "params.json").string(), "test", eout, eerr), 0);
  auto test = nlohmann::json::parse(support::slurp((dir / "eval_test.json").string()));
  EXPECT_DOUBLE_EQ(test["accuracy"].get<double>(), 1.0);
  EXPECT_EQ(lines(support::slurp((dir / "eval_test.csv").string())).size(), 5u);
}

TEST(Eval, RejectsBadInputs) {
  auto dir = support::fresh_dir("cli_eval_bad");
  auto params = dir / "params.json";
  cli::write_params_file(params.string(), build_gqa_graph().initial_params());
  std::ostringstream out, err;
  EXPECT_EQ(cli::cmd_eval(fixture(dir), params.string(), "dev", out, err), 2);

  auto cfg = fixture(dir);
  cfg.test.clear();
  EXPECT_EQ(cli::cmd_eval(cfg, params.string(), "test", out, err), 2);
  EXPECT_NE(err.str().find("empty"), std::string::npos);

  auto wrong = dir / "wrong.json";
  cli::write_params_file(wrong.string(), build_single_prompt_graph().initial_params());
  EXPECT_EQ(cli::cmd_eval(fixture(dir), wrong.string(), "test", out, err), 2);
}

TEST(Trace, SummarizesEveryIteration) {
  auto dir = support::fresh_dir("cli_trace");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_optimize(fixture(dir), out, err), 0) << err.str();
  std::ostringstream t;
  ASSERT_EQ(cli::cmd_trace(dir.string(), t, err), 0);
  const std::string s = t.str();
  for (int k = 1; k <= 4; ++k)
    EXPECT_NE(s.find("iteration " + std::to_string(k) + ":"), std::string::npos) << s;
  EXPECT_NE(s.find("role"), std::string::npos);
  EXPECT_NE(s.find("optimizer"), std::string::npos);
  EXPECT_NE(s.find("total"), std::string::npos);
}

TEST(Trace, ShowsRejectedProposals) {
  // swap the optimizer rule for one that never helps
  auto dir = support::fresh_dir("cli_trace_rejected");
  auto rules = nlohmann::json::parse(support::slurp(support::source_path("data/gqa_rules.json")));
  for (auto &r : rules)
    if (r.value("role", "") == "optimizer")
      r["response"] = "<prompt>Think harder</prompt>";
  std::ofstream(dir / "rules.json") << rules.dump();
  auto cfg = fixture(dir / "run");
  cfg.backend.script = (dir / "rules.json").string();
  cfg.descent.max_iterations = 2;
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_optimize(cfg, out, err), 0) << err.str();
  std::ostringstream t;
  ASSERT_EQ(cli::cmd_trace((dir / "run").string(), t, err), 0);
  EXPECT_NE(t.str().find("iteration 1: rejected"), std::string::npos) << t.str();
  EXPECT_NE(t.str().find("theta3: proposed (rejected)"), std::string::npos);
  EXPECT_NE(t.str().find("    + Think harder"), std::string::npos);
  EXPECT_EQ(cli::cmd_trace((dir / "missing").string(), t, err), 2);
}

TEST(Binary, ExitCodes) {
  auto dir = support::fresh_dir("cli_binary");
  const std::string cli = SEMGRAD_CLI;
  std::string ok = cli + " optimize " + support::source_path("data/gqa_scripted.json") +
                   " --iterations 1 --out " + dir.string() + " > /dev/null 2>&1";
  EXPECT_EQ(WEXITSTATUS(std::system(ok.c_str())), 0);
  std::string bad = cli + " optimize " + support::source_path("data/gqa_scripted.json") +
                    " --gate sideways --out " + dir.string() + " > /dev/null 2>&1";
  EXPECT_NE(WEXITSTATUS(std::system(bad.c_str())), 0);
}
