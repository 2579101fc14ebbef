#include "doctest.h"

#include "kenmpc/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

using namespace kenmpc;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kenmpc_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

/// Small everything: a few seconds per command.
json tiny_config() {
  return json{
      {"prices", {{"reference_days", 30}}},
      {"model", {{"n_latent", 4}, {"hidden", {8}}}},
      {"env", {{"episode_steps", 16}}},
      {"ocp", {{"horizon", 4}}},
      {"fit", {{"epochs", 5}, {"batch_size", 32}, {"horizon", 4}, {"patience", 5}}},
      {"sysid", {{"random_samples", 300}, {"rollout_steps", 8}, {"max_iterations", 2}, {"patience", 1}}},
      {"ppo", {{"n_actors", 2}, {"steps_per_actor", 8}, {"minibatch", 8}, {"epochs", 1}, {"critic_hidden", {8}}}},
      {"train", {{"total_steps", 16}, {"eval_steps", 8}, {"seeds", {1}}}},
      {"eval", {{"steps", 16}}},
  };
}

std::string first_line(const fs::path& p) {
  std::ifstream f(p);
  std::string line;
  std::getline(f, line);
  return line;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(KENMPC_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config: defaults round-trip and hash is stable") {
  const cli::RunConfig a;
  const cli::RunConfig b = cli::config_from_json(cli::to_json(a));
  CHECK(cli::to_json(b) == cli::to_json(a));
  CHECK(cli::config_hash(a) == cli::config_hash(b));
  CHECK(cli::config_hash(a).size() == 16);

  cli::RunConfig moved = a;
  moved.out_dir = "elsewhere";
  CHECK(cli::config_hash(moved) == cli::config_hash(a));
  moved.seed = 99;
  CHECK(cli::config_hash(moved) != cli::config_hash(a));
}

TEST_CASE("config: unknown keys and bad values are rejected") {
  CHECK_THROWS_AS(cli::config_from_json(json{{"sead", 1}}), ContractViolation);
  CHECK_THROWS_AS(cli::config_from_json(json{{"ppo", {{"gama", 0.9}}}}), ContractViolation);
  CHECK_THROWS_AS(cli::config_from_json(json{{"ppo", {{"gamma", "x"}}}}), ContractViolation);
  CHECK_THROWS_AS(cli::config_from_json(json{{"ppo", 3}}), ContractViolation);
  CHECK_THROWS_AS(cli::config_from_json(json{{"ocp", {{"horizon", 0}}}}), ContractViolation);
  CHECK_THROWS_AS(cli::config_from_json(json{{"train", {{"seeds", {1, 1}}}}}), ContractViolation);
  CHECK_THROWS_AS(cli::config_from_json(json{{"sysid", {{"constraint_mode", "soft"}}}}), ContractViolation);
  CHECK_THROWS_AS(cli::config_from_json(json{{"env", {{"input_lower", {1, 2}}}}}), ContractViolation);
  CHECK_NOTHROW(cli::config_from_json(tiny_config()));
}

TEST_CASE("config: the OCP is derived from env, reward and ocp sections") {
  json j = tiny_config();
  j["reward"] = {{"beta", 2e-5}};
  j["env"]["demand_rate"] = 1.2;
  const cli::RunConfig c = cli::config_from_json(j);
  const ocp::OcpConfig o = c.ocp_config();
  CHECK(o.cost_scale == 2e-5);
  CHECK(o.demand_rate == 1.2);
  CHECK(o.horizon == 4);
  CHECK(o.path.lower == c.env.observations.lower.head(3));
  CHECK(o.path.upper == c.env.observations.upper.head(3));
  CHECK(c.sysid_config().ocp.horizon == 4);
}

TEST_CASE("prices: generate and validate") {
  const fs::path dir = scratch("prices");

  SUBCASE("constant reference gives constant output") {
    env::PriceSeries flat;
    flat.start = env::parse_timestamp("2023-01-01T00:00:00");
    flat.hourly.assign(24 * 30, 80.0);
    env::save_prices(flat, (dir / "flat.csv").string());
    json j = tiny_config();
    j["prices"]["reference_file"] = (dir / "flat.csv").string();
    const cli::RunConfig c = cli::config_from_json(j);
    cli::cmd_prices_generate(c, 72, 3, (dir / "gen.csv").string());
    const env::PriceSeries g = cli::cmd_prices_validate((dir / "gen.csv").string());
    CHECK(g.size() == 72);
    for (double p : g.hourly) CHECK(p == doctest::Approx(80.0).epsilon(1e-12));
  }

  SUBCASE("generated mean within 5% of the reference") {
    const cli::RunConfig c = cli::config_from_json(json{{"prices", {{"reference_days", 120}}}});
    const auto ref = cli::make_prices(c).training;
    cli::cmd_prices_generate(c, 24 * 60, 11, (dir / "gen.csv").string());
    const env::PriceSeries g = cli::cmd_prices_validate((dir / "gen.csv").string());
    CHECK(std::abs(g.mean() - ref->mean()) <= 0.05 * std::abs(ref->mean()));
    CHECK(first_line(dir / "gen.csv") == "# config_hash " + cli::config_hash(c));
  }

  SUBCASE("malformed file names the line") {
    write_file(dir / "bad.csv", "timestamp,price_eur_mwh\n2023-01-01T00:00:00,50\n2023-01-01T02:00:00,51\n");
    try {
      cli::cmd_prices_validate((dir / "bad.csv").string());
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
  }
}

TEST_CASE("sysid: loadable model, one history row per iteration, reproducible") {
  const cli::RunConfig c = cli::config_from_json(tiny_config());
  const fs::path a = scratch("sysid_a"), b = scratch("sysid_b");
  const auto ra = cli::cmd_sysid(c, a.string());
  const auto rb = cli::cmd_sysid(c, b.string());

  const koopman::Model m = koopman::load_model(ra.model_path);
  CHECK(m.dims == c.dims);
  CHECK(m.dt_minutes == c.env.record_minutes);

  const std::string hist = slurp(ra.history_path);
  CHECK(hist == slurp(rb.history_path));
  std::istringstream in(hist);
  std::string line;
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#' && line.rfind("iteration", 0) != 0) ++rows;
  CHECK(rows == static_cast<int>(ra.result.history.size()));
  CHECK(first_line(ra.history_path) == "# config_hash " + cli::config_hash(c));
  CHECK(slurp(ra.dataset_path) == slurp(rb.dataset_path));
  CHECK(sysid::load_dataset(ra.dataset_path).total_samples() == ra.result.dataset.total_samples());
}

TEST_CASE("train: per-seed curves and a summary whose maxima match the curves") {
  json j = tiny_config();
  const fs::path dir = scratch("train");
  const cli::RunConfig c0 = cli::config_from_json(j);
  Rng rng(5);
  const koopman::Model m = koopman::init_model(c0.dims, c0.env.record_minutes, rng);
  koopman::save_model(m, (dir / "si.json").string());

  SUBCASE("one seed, one curve") {
    const auto r = cli::cmd_train(c0, (dir / "si.json").string(), (dir / "one").string());
    REQUIRE(r.seeds.size() == 1);
    CHECK(r.seeds[0].ok);
    CHECK(fs::exists(r.seeds[0].curve_path));
    CHECK(koopman::load_model(r.seeds[0].best_model_path).dt_minutes == c0.env.dt_minutes);
  }

  SUBCASE("several seeds") {
    j["train"]["seeds"] = {1, 2, 3};
    const cli::RunConfig c = cli::config_from_json(j);
    const auto r = cli::cmd_train(c, (dir / "si.json").string(), (dir / "many").string());
    const json summary = json::parse(slurp(r.summary_path));
    CHECK(summary["config_hash"] == cli::config_hash(c));
    REQUIRE(summary["seeds"].size() == 3);
    int files = 0;
    for (const auto& e : fs::directory_iterator(dir / "many"))
      if (e.path().filename().string().rfind("curve_", 0) == 0) ++files;
    CHECK(files == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& s = r.seeds[i];
      REQUIRE(s.ok);
      const auto curve = rl::read_learning_curve(s.curve_path);
      double best = curve.front().eval_reward;
      for (const auto& p : curve) best = std::max(best, p.eval_reward);
      CHECK(summary["seeds"][i]["max_reward"].get<double>() == best);
      CHECK(first_line(s.curve_path) == "# config_hash " + cli::config_hash(c));
    }
  }

  SUBCASE("missing model") {
    CHECK_THROWS(cli::cmd_train(c0, (dir / "missing.json").string(), (dir / "bad").string()));
  }
}

TEST_CASE("eval: steady reference, recount oracles and reproducibility") {
  const cli::RunConfig c = cli::config_from_json(tiny_config());
  const fs::path dir = scratch("eval");

  const auto steady = cli::cmd_eval(c, cli::EvalPolicy::Steady, "", (dir / "s").string());
  CHECK(std::abs(steady.result.savings_fraction) <= 1e-12);
  CHECK(steady.result.violation_fraction == 0.0);
  CHECK(steady.result.steps == 16);

  Rng rng(3);
  const koopman::Model m = koopman::init_model(c.dims, c.env.record_minutes, rng);
  koopman::save_model(m, (dir / "m.json").string());
  const auto a = cli::cmd_eval(c, cli::EvalPolicy::KoopmanSi, (dir / "m.json").string(), (dir / "a").string());
  const auto b = cli::cmd_eval(c, cli::EvalPolicy::KoopmanSi, (dir / "m.json").string(), (dir / "b").string());

  const auto rows = env::read_trajectory_csv(a.trajectory_path);
  REQUIRE(rows.size() == 16);
  int violated = 0;
  double reward = 0.0;
  for (const auto& r : rows) {
    violated += (r.violations.array() > 0.0).any() ? 1 : 0;
    reward += r.reward;
  }
  CHECK(a.result.violation_fraction == doctest::Approx(violated / 16.0).epsilon(1e-15));
  CHECK(a.result.average_reward == doctest::Approx(reward / 16.0).epsilon(1e-12));

  for (const char* key : {"average_reward", "violation_fraction", "cost_savings_fraction", "total_cost",
                          "steady_cost", "storage_identity_error"})
    CHECK(a.metrics[key] == b.metrics[key]);
  CHECK(slurp(a.trajectory_path) == slurp(b.trajectory_path));
  CHECK(a.metrics["config_hash"] == cli::config_hash(c));
  CHECK(first_line(a.trajectory_path) == "# config_hash " + cli::config_hash(c));
  CHECK(a.result.storage_identity_error <= 1e-12);
}

TEST_CASE("binary: exit codes") {
  const fs::path dir = scratch("binary");
  write_file(dir / "cfg.json", tiny_config().dump());
  write_file(dir / "bad.json", R"({"unknown": 1})");
  const std::string cfg = "--config " + (dir / "cfg.json").string();
  CHECK(run_cli("") == 1);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("--config " + (dir / "bad.json").string() + " eval --mode steady") == 1);
  CHECK(run_cli(cfg + " eval --mode koopman-ppo") == 1);
  CHECK(run_cli(cfg + " eval --mode koopman-ppo --model " + (dir / "nope.json").string() + " --out " +
                (dir / "o").string()) == 2);
  CHECK(run_cli(cfg + " eval --mode steady --out " + (dir / "o").string()) == 0);
  CHECK(fs::exists(dir / "o" / "metrics_steady.json"));
  CHECK(run_cli(cfg + " prices validate " + (dir / "cfg.json").string()) == 2);
}
