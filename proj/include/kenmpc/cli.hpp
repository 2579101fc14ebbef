#pragma once

// Run configuration and the pipeline commands behind the command-line tool:
// identification, PPO training over several seeds, evaluation on the test
// episode and price-file utilities.

#include "kenmpc/common.hpp"
#include "kenmpc/envsim.hpp"
#include "kenmpc/koopman.hpp"
#include "kenmpc/ocp.hpp"
#include "kenmpc/rl.hpp"
#include "kenmpc/sysid.hpp"

#include "json.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace kenmpc::cli {

struct PriceSource {
  /// Hourly CSV; empty selects the synthetic reference year.
  std::string reference_file;
  int reference_days = 365;
  std::uint64_t reference_seed = 7;
  /// Seed of the generated test-episode series.
  std::uint64_t eval_seed = 1001;
};

/// Problem-specific OCP settings; bounds, demand and step length come from the environment.
struct OcpSection {
  int horizon = 12;
  double M = 1e4;
  double delta = 0.2;
  Scaling outputs{(Vec(2) << 2000.0, 0.0).finished(), (Vec(2) << 5000.0, 2.0).finished()};
};

struct TrainSection {
  std::size_t total_steps = 50000;
  int eval_every = 1;
  int eval_steps = 288;
  /// Hour offset of the selection episode inside the training prices.
  std::size_t eval_offset = 0;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

struct EvalSection {
  int steps = 288;
  std::size_t offset = 0;
  ocp::ConstraintMode si_constraint_mode = ocp::ConstraintMode::Hard;
  ocp::ConstraintMode ppo_constraint_mode = ocp::ConstraintMode::SlackPenalty;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs";
  PriceSource prices;
  koopman::Dims dims;
  env::EnvConfig env;
  OcpSection ocp;
  ocp::QpSettings qp;
  sysid::SIConfig sysid;  ///< its `ocp` member is filled from ocp_config()
  rl::PpoConfig ppo;
  TrainSection train;
  EvalSection eval;

  /// Full OCP configuration derived from the env, reward and ocp sections.
  ocp::OcpConfig ocp_config() const;
  sysid::SIConfig sysid_config() const;
  void validate() const;
};

/// Missing keys keep their defaults; unknown keys throw ContractViolation.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
RunConfig load_config(const std::string& path);
/// FNV-1a of the canonical dump without out_dir; stamped into every output file.
std::string config_hash(const RunConfig& c);

/// Training (reference) prices and the generated test-episode series.
struct PriceData {
  std::shared_ptr<const env::PriceSeries> training;
  std::shared_ptr<const env::PriceSeries> test;
};
PriceData make_prices(const RunConfig& c);

/// Environment on the surrogate plant.
env::Env make_env(const RunConfig& c, std::shared_ptr<const env::PriceSeries> prices);

/// Brings a stored model to the control step (chains fitted-step models).
koopman::Model control_step_model(const RunConfig& c, const koopman::Model& m);

// ---------------------------------------------------------------------------
// Commands. Each writes into `out_dir` (created if missing).

struct SysidOutput {
  std::string model_path;
  std::string dataset_path;
  std::string history_path;
  sysid::SIResult result;
};
SysidOutput cmd_sysid(const RunConfig& c, const std::string& out_dir);

void write_si_history(const std::string& path, const std::vector<sysid::SIIteration>& history,
                      const std::string& hash);

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double initial_reward = 0.0;
  double best_reward = 0.0;
  int best_update = 0;
  std::size_t env_steps = 0;
  std::string curve_path;
  std::string best_model_path;
  std::string checkpoint_path;
};

struct TrainOutput {
  std::vector<SeedOutcome> seeds;
  std::string summary_path;
};
/// One rl::train run per configured seed; a failing seed is recorded and the rest continue.
TrainOutput cmd_train(const RunConfig& c, const std::string& model_path, const std::string& out_dir);

enum class EvalPolicy { KoopmanSi, KoopmanPpo, Steady };
std::string to_string(EvalPolicy p);
EvalPolicy eval_policy_from_string(const std::string& s);

struct EvalOutput {
  rl::EvalResult result;
  std::string metrics_path;
  std::string trajectory_path;
  nlohmann::json metrics;
};
/// `model_path` is ignored for the steady policy.
EvalOutput cmd_eval(const RunConfig& c, EvalPolicy policy, const std::string& model_path,
                    const std::string& out_dir);

/// Generated series of `hours` hours from the configured reference.
std::string cmd_prices_generate(const RunConfig& c, std::size_t hours, std::uint64_t seed,
                                const std::string& out_path);
/// Parses the file (line-numbered errors) and checks the hourly cadence.
env::PriceSeries cmd_prices_validate(const std::string& path);

}  // namespace kenmpc::cli
