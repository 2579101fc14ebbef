#include "kenmpc/cli.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>

namespace {

using namespace kenmpc;

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Koopman eNMPC: identification, PPO fine-tuning and evaluation on the surrogate plant"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string model_path;
  app.add_option("--config", config_path, "JSON run configuration (defaults when omitted)");
  auto* seed_opt = app.add_option("--seed", seed, "Overrides the seed (train: runs only this seed)");
  app.add_option("--out", out_dir, "Output directory (train/sysid/eval) or file (prices generate)");

  auto* sysid_cmd = app.add_subcommand("sysid", "Iterative random sampling, fitting and closed-loop data collection");

  auto* train_cmd = app.add_subcommand("train", "PPO fine-tuning of an identified model, one run per seed");
  train_cmd->add_option("--model", model_path, "Identified model (JSON)")->required();

  std::string mode = "koopman-ppo";
  auto* eval_cmd = app.add_subcommand("eval", "Deterministic test episode with metrics and trajectory CSV");
  eval_cmd->add_option("--model", model_path, "Model to control with (not needed for --mode steady)");
  eval_cmd->add_option("--mode", mode, "koopman-si | koopman-ppo | steady")
      ->check(CLI::IsMember({"koopman-si", "koopman-ppo", "steady"}));

  auto* prices_cmd = app.add_subcommand("prices", "Price-file utilities");
  prices_cmd->require_subcommand(1);
  prices_cmd->fallthrough();
  std::size_t hours = 72;
  std::uint64_t price_seed = 1;
  auto* gen_cmd = prices_cmd->add_subcommand("generate", "Statistics-preserving series from the reference prices");
  gen_cmd->add_option("--hours", hours, "Length in hours")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--price-seed", price_seed, "Generator seed");
  std::string price_file;
  auto* val_cmd = prices_cmd->add_subcommand("validate", "Parse a price CSV and check its hourly cadence");
  val_cmd->add_option("file", price_file, "Price CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsage;
  }

  cli::RunConfig config;
  try {
    if (!config_path.empty()) config = cli::load_config(config_path);
    if (*seed_opt) {
      config.seed = seed;
      config.train.seeds = {seed};
    }
    if (!out_dir.empty()) config.out_dir = out_dir;
    config.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  if (*eval_cmd && mode != "steady" && model_path.empty()) {
    std::cerr << "error: eval --mode " << mode << " needs --model\n";
    return kUsage;
  }

  try {
    const std::string hash = cli::config_hash(config);
    if (*sysid_cmd) {
      const auto r = cli::cmd_sysid(config, config.out_dir);
      std::cout << "config_hash " << hash << "\nbest iteration " << r.result.best_iteration << " average reward "
                << format_double(r.result.best_reward) << "\nmodel " << r.model_path << '\n';
    } else if (*train_cmd) {
      const auto r = cli::cmd_train(config, model_path, config.out_dir);
      std::cout << "config_hash " << hash << '\n';
      int failed = 0;
      for (const auto& s : r.seeds) {
        if (!s.ok) {
          std::cout << "seed " << s.seed << " failed: " << s.error << '\n';
          ++failed;
          continue;
        }
        std::cout << "seed " << s.seed << " max reward " << format_double(s.best_reward) << " (update "
                  << s.best_update << ", initial " << format_double(s.initial_reward) << ")\n";
      }
      std::cout << "summary " << r.summary_path << '\n';
      if (failed == static_cast<int>(r.seeds.size())) return kRuntime;
    } else if (*eval_cmd) {
      const auto r = cli::cmd_eval(config, cli::eval_policy_from_string(mode), model_path, config.out_dir);
      std::cout << r.metrics.dump(1) << '\n';
    } else if (*gen_cmd) {
      const std::string path = out_dir.empty() ? "prices.csv" : out_dir;
      cli::cmd_prices_generate(config, hours, price_seed, path);
      std::cout << "wrote " << path << '\n';
    } else if (*val_cmd) {
      const auto p = cli::cmd_prices_validate(price_file);
      std::cout << "ok: " << p.size() << " hourly prices from " << env::format_timestamp(p.start) << ", mean "
                << format_double(p.mean()) << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return 0;
}
