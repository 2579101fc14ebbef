#include "kenmpc/cli.hpp"
#include "kenmpc/gradtape.hpp"
#include "kenmpc/koopman.hpp"
#include "kenmpc/ocp.hpp"
#include "kenmpc/qp.hpp"
#include "kenmpc/rl.hpp"
#include "kenmpc/sysid.hpp"

#include "oracles.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

namespace {

using namespace kenmpc;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

double rel_err(const Mat& a, const Mat& b) {
  const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-300);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

Vec uniform_vec(int n, Rng& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> U(-scale, scale);
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = U(rng);
  return v;
}

// ---------------------------------------------------------------------------
// 1. Chaining

Outcome chaining() {
  const auto t0 = Clock::now();
  Rng rng(101);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  double worst_state = 0.0, worst_output = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    koopman::Model m = koopman::init_model(koopman::Dims{}, 5.0, rng);
    m.A = 0.9 * Mat::Identity(10, 10);
    for (Mat* M : {&m.A, &m.B, &m.C, &m.D, &m.E})
      for (Eigen::Index i = 0; i < M->size(); ++i) M->data()[i] += 0.3 * U(rng);
    const koopman::Model coarse = koopman::upscale(m, 3);
    const Vec z = uniform_vec(10, rng), u = uniform_vec(4, rng);
    Vec zf = z;
    for (int k = 0; k < 3; ++k) zf = koopman::step_latent(m, zf, u);
    worst_state = std::max(worst_state, rel_err(koopman::step_latent(coarse, z, u), zf));
    worst_output = std::max(worst_output, rel_err(koopman::decode_output(coarse, z, u), koopman::decode_output(m, zf, u)));
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst_state <= 1e-10 && worst_output <= 1e-10 && secs <= 10.0;
  o.detail = "1000 models: state " + sci(worst_state) + ", output " + sci(worst_output) + " (<= 1e-10); " +
             sci(secs) + " s (<= 10 s)";
  return o;
}

// ---------------------------------------------------------------------------
// 2. QP solver

Outcome qp_solver() {
  const auto t0 = Clock::now();
  Rng rng(202);
  std::uniform_int_distribution<int> N(2, 40), M(0, 10), Pn(0, 4);
  double worst_kkt = 0.0, worst_obj = 0.0;
  int failures = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int n = N(rng);
    const int p = std::min(Pn(rng), n - 1);
    const int m = M(rng);
    const ocp::QpProblem qp = oracles::random_qp(rng, n, p, m);
    const ocp::QpSolution s = ocp::solve_qp(qp);
    const auto ref = oracles::enumerate_active_sets(qp);
    if (!s.ok() || !ref.found) {
      ++failures;
      continue;
    }
    const ocp::KktResiduals r = ocp::kkt_residuals(qp, s.x, s.nu, s.lam);
    worst_kkt = std::max({worst_kkt, r.stationarity, r.primal, r.dual, r.complementarity});
    worst_obj = std::max(worst_obj, std::abs(s.objective - ref.objective) / std::max(1.0, std::abs(ref.objective)));
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failures == 0 && worst_kkt <= 1e-8 && worst_obj <= 1e-6 && secs <= 60.0;
  o.detail = "500 QPs (n <= 40): max KKT residual " + sci(worst_kkt) + " (<= 1e-8), objective gap " + sci(worst_obj) +
             " (<= 1e-6), failures " + std::to_string(failures) + "; " + sci(secs) + " s (<= 60 s)";
  return o;
}

// ---------------------------------------------------------------------------
// 3. Implicit differentiation

Outcome implicit_diff() {
  const auto t0 = Clock::now();
  Rng rng(303);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  ocp::OcpConfig cfg;
  cfg.horizon = 4;
  cfg.M = 1.0;
  cfg.cost_scale = 1e-6;
  std::vector<double> prices;
  for (int t = 0; t < cfg.horizon; ++t) prices.push_back(60.0 + 40.0 * std::sin(0.7 * t));
  int checked = 0, degenerate = 0, ill = 0, trials = 0;
  double worst = 0.0;
  while (checked < 50 && trials < 500) {
    ++trials;
    koopman::Model m = koopman::init_model(koopman::Dims{}, 5.0, rng);
    m.A = 0.9 * Mat::Identity(10, 10);
    for (Eigen::Index i = 0; i < m.A.size(); ++i) m.A.data()[i] += 0.02 * U(rng);
    for (Mat* M : {&m.B, &m.C, &m.D, &m.E})
      for (Eigen::Index i = 0; i < M->size(); ++i) M->data()[i] = (M == &m.B ? 1.0 : 0.5) * U(rng);
    const koopman::Model m15 = koopman::upscale(m, 3);
    const Vec x = uniform_vec(4, rng, 0.8), w = uniform_vec(4, rng);
    const auto r = oracles::check_ocp_gradient(m15, x, 4.5, prices, cfg, w, rng, 30);
    if (!r.solved || r.degenerate) {
      ++degenerate;
      continue;
    }
    if (r.ill_conditioned) ++ill;
    ++checked;
    worst = std::max(worst, r.max_rel_error);
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = checked == 50 && ill == 0 && worst <= 1e-3 && secs <= 300.0;
  o.detail = std::to_string(checked) + " non-degenerate instances (" + std::to_string(degenerate) +
             " degenerate skipped): max rel error " + sci(worst) + " (<= 1e-3); " + sci(secs) + " s (<= 300 s)";
  return o;
}

// ---------------------------------------------------------------------------
// 4. Hinge / epigraph

Outcome hinge_epigraph() {
  Rng rng(404);
  const koopman::Model m = koopman::upscale(koopman::init_model(koopman::Dims{}, 5.0, rng), 3);
  ocp::OcpConfig cfg;
  cfg.horizon = 2;
  const std::vector<double> prices{50.0, 70.0};
  const auto b = ocp::build_ocp(m, Vec::Zero(4), 3.0, prices, cfg, ocp::ConstraintMode::SlackPenalty);
  const Vec hr = cfg.half_ranges();
  double worst = 0.0;
  int points = 0;
  for (int i = 0; i < cfg.num_constrained(); ++i) {
    for (int k = 0; k < 1000; ++k) {
      const double s = (-2.0 + 4.0 * k / 999.0) * hr[i];
      const double want = ocp::hinge_penalty(s, hr[i], cfg.delta, cfg.M);
      worst = std::max(worst, std::abs(ocp::epigraph_penalty(b, i, 1, s) - want));
      ++points;
    }
  }
  Outcome o;
  o.pass = worst <= 1e-9;
  o.detail = std::to_string(points) + " points (1000 per constraint): max |error| " + sci(worst) + " (<= 1e-9)";
  return o;
}

// ---------------------------------------------------------------------------
// 5. Gradtape

Outcome gradtape_checks() {
  Rng rng(505);
  const auto checks = oracles::check_all_primitives(rng, 100, 1e-4);
  double worst = 0.0;
  bool all = !checks.empty();
  std::string failed;
  for (const auto& c : checks) {
    worst = std::max(worst, c.max_rel_error);
    if (!c.passed || c.points < 100) {
      all = false;
      failed += " " + c.name;
    }
  }
  Outcome o;
  o.pass = all && worst <= 1e-4;
  o.detail = std::to_string(checks.size()) + " primitives x 100 points: max rel error " + sci(worst) + " (<= 1e-4)" +
             (failed.empty() ? "" : "; failed:" + failed);
  return o;
}

// ---------------------------------------------------------------------------
// 6. GAE

Outcome gae_oracle() {
  Rng rng(606);
  std::uniform_int_distribution<int> L(1, 50);
  std::uniform_real_distribution<double> U(-1.0, 1.0), P(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = L(rng);
    std::vector<double> r(n), v(n);
    std::vector<char> d(n);
    std::vector<bool> db(n);
    for (int t = 0; t < n; ++t) {
      r[t] = U(rng);
      v[t] = U(rng);
      db[t] = P(rng) < 0.1;
      d[t] = db[t] ? 1 : 0;
    }
    const double boot = U(rng), gamma = 0.9 + 0.1 * P(rng), lambda = P(rng);
    const auto g = rl::gae(r, v, d, boot, gamma, lambda);
    const Vec ref = oracles::gae_bruteforce(Eigen::Map<const Vec>(r.data(), n), Eigen::Map<const Vec>(v.data(), n), db,
                                            boot, gamma, lambda);
    for (int t = 0; t < n; ++t) worst = std::max(worst, std::abs(g.advantages[t] - ref[t]));
  }
  Outcome o;
  o.pass = worst <= 1e-12;
  o.detail = "1000 sequences (length <= 50): max |error| " + sci(worst) + " (<= 1e-12)";
  return o;
}

// ---------------------------------------------------------------------------
// 7. SI recovery on an exactly linear latent plant

env::LinearLatentPlant linear_plant() {
  Mat A(4, 4), B(4, 4), C(4, 4), D(2, 4), E(2, 4);
  A << 0.90, 0.05, 0.00, 0.00, -0.04, 0.85, 0.03, 0.00, 0.00, 0.02, 0.95, 0.01, 0.01, 0.00, -0.02, 0.80;
  B << 0.05, 0.00, 0.01, 0.00, 0.00, 0.04, 0.00, 0.01, 0.02, 0.00, 0.03, 0.00, 0.00, 0.01, 0.00, 0.05;
  C << 0.8, 0.2, 0.0, 0.1, -0.1, 0.9, 0.1, 0.0, 0.0, 0.1, 0.7, -0.2, 0.1, 0.0, 0.2, 0.9;
  D << 0.3, -0.2, 0.1, 0.0, 0.0, 0.1, 0.2, -0.3;
  E << 0.2, 0.0, -0.1, 0.05, 0.0, 0.1, 0.0, 0.1;
  return env::LinearLatentPlant(A, B, C, D, E, 5.0);
}

Outcome si_recovery() {
  const auto t0 = Clock::now();
  const Scaling unit4(Vec::Constant(4, -1.0), Vec::Constant(4, 1.0));
  env::EnvConfig ec;
  ec.inputs = unit4;
  ec.observations = unit4;
  ec.demand_rate = 0.0;
  ec.episode_steps = 16;
  auto prices = std::make_shared<const env::PriceSeries>(env::synthetic_reference(4, 3));
  const env::Env environment(std::make_unique<env::LinearLatentPlant>(linear_plant()), ec, prices);

  sysid::SIConfig cfg;
  cfg.random_samples = 1500;
  cfg.hold_minutes = 10.0;
  cfg.rollout_steps = 24;
  cfg.max_iterations = 1;
  cfg.fit.epochs = 400;
  cfg.fit.patience = 40;
  cfg.fit.batch_size = 64;
  cfg.fit.learning_rate = 5e-3;
  cfg.ocp.horizon = 8;
  cfg.ocp.inputs = unit4;
  cfg.ocp.path = Scaling(Vec::Constant(3, -1.0), Vec::Constant(3, 1.0));
  cfg.ocp.outputs = Scaling(Vec::Constant(2, -1.0), Vec::Constant(2, 1.0));
  cfg.ocp.demand_rate = 0.0;
  cfg.mode = ocp::ConstraintMode::SlackPenalty;
  koopman::Dims dims;
  dims.n_latent = 4;
  dims.hidden = {};
  const auto scaling = sysid::DataScaling::identity(4, 4, 2);
  const auto r = sysid::iterative_si(environment, dims, scaling, cfg, 8);

  auto plant = linear_plant();
  sysid::SIDataset fresh;
  fresh.dt_minutes = 5.0;
  fresh.trajectories.push_back(sysid::sample_random(plant, unit4, 300, 77, 10.0));
  const double err = sysid::open_loop_error(r.model, fresh, scaling, 12);
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = r.history.size() == 1 && err <= 1e-3 && secs <= 300.0;
  o.detail = "1 iteration, 12-step open-loop error on fresh data " + sci(err) + " (<= 1e-3); " + sci(secs) +
             " s (<= 300 s)";
  return o;
}

// ---------------------------------------------------------------------------
// 8-11. Desk-scale pipeline on the surrogate plant

struct Pipeline {
  bool ran = false;
  std::string error;
  double seconds = 0.0;
  std::string config_path;
  std::string si_model;
  std::string best_ppo_model;
  rl::EvalResult si_eval, ppo_eval, steady_eval;
  std::vector<rl::EvalResult> seed_evals;
  std::vector<cli::SeedOutcome> seeds;
  int best_seed_index = -1;
};

cli::RunConfig desk_config(bool quick) {
  cli::RunConfig c;
  if (!quick) return c;
  // Enough to exercise 9-11 when the full run is skipped.
  c.sysid.random_samples = 2000;
  c.sysid.rollout_steps = 96;
  c.sysid.max_iterations = 1;
  c.sysid.fit.epochs = 20;
  c.train.seeds = {1};
  c.train.total_steps = 64;
  c.ppo.n_actors = 2;
  c.ppo.steps_per_actor = 32;
  c.ppo.minibatch = 32;
  c.ppo.epochs = 1;
  c.train.eval_steps = 32;
  return c;
}

Pipeline run_pipeline(const std::string& out_dir, bool quick) {
  Pipeline p;
  const auto t0 = Clock::now();
  try {
    const cli::RunConfig c = desk_config(quick);
    fs::create_directories(out_dir);
    p.config_path = (fs::path(out_dir) / "config.json").string();
    std::ofstream(p.config_path) << cli::to_json(c).dump(1) << '\n';

    std::cout << "  [pipeline] identification..." << std::endl;
    const auto si = cli::cmd_sysid(c, (fs::path(out_dir) / "sysid").string());
    p.si_model = si.model_path;
    std::cout << "  [pipeline] SI done after " << sci(seconds_since(t0)) << " s, best iteration "
              << si.result.best_iteration << " of " << si.result.history.size() << std::endl;

    std::cout << "  [pipeline] training " << c.train.seeds.size() << " seeds x " << c.train.total_steps << " steps..."
              << std::endl;
    const auto tr = cli::cmd_train(c, p.si_model, (fs::path(out_dir) / "train").string());
    p.seeds = tr.seeds;
    for (std::size_t i = 0; i < p.seeds.size(); ++i) {
      const auto& s = p.seeds[i];
      if (!s.ok) continue;
      if (p.best_seed_index < 0 || s.best_reward > p.seeds[p.best_seed_index].best_reward)
        p.best_seed_index = static_cast<int>(i);
    }
    std::cout << "  [pipeline] training done after " << sci(seconds_since(t0)) << " s" << std::endl;

    const std::string eval_dir = (fs::path(out_dir) / "eval").string();
    p.si_eval = cli::cmd_eval(c, cli::EvalPolicy::KoopmanSi, p.si_model, eval_dir).result;
    p.steady_eval = cli::cmd_eval(c, cli::EvalPolicy::Steady, "", eval_dir).result;
    if (p.best_seed_index >= 0) {
      p.best_ppo_model = p.seeds[p.best_seed_index].best_model_path;
      p.ppo_eval = cli::cmd_eval(c, cli::EvalPolicy::KoopmanPpo, p.best_ppo_model, eval_dir).result;
    }
    p.seconds = seconds_since(t0);
    // Every seed's selected policy on the test episode (reported; not part of the runtime budget).
    for (const auto& s : p.seeds) {
      if (!s.ok) continue;
      const auto env_prices = cli::make_prices(c);
      env::EnvConfig ec = c.env;
      ec.episode_steps = std::max(ec.episode_steps, c.eval.steps);
      env::Env e(std::make_unique<env::SurrogatePlant>(), ec, env_prices.test);
      const auto m = cli::control_step_model(c, koopman::load_model(s.best_model_path));
      p.seed_evals.push_back(rl::evaluate(m, c.ocp_config(), c.eval.ppo_constraint_mode, e, c.eval.offset, c.eval.steps));
    }
    p.ran = true;
  } catch (const std::exception& e) {
    p.error = e.what();
    p.seconds = seconds_since(t0);
  }
  return p;
}

std::string eval_line(const std::string& name, const rl::EvalResult& r) {
  return name + ": reward " + sci(r.average_reward) + ", violations " + sci(r.violation_fraction) + ", savings " +
         sci(r.savings_fraction) + ", solve mean " + sci(r.solve_mean) + " s";
}

Outcome end_to_end(const Pipeline& p) {
  Outcome o;
  if (!p.ran) {
    o.detail = "pipeline failed: " + p.error;
    return o;
  }
  int improved = 0;
  std::ostringstream seeds;
  for (const auto& s : p.seeds) {
    if (!s.ok) {
      seeds << " seed " << s.seed << " failed (" << s.error << ");";
      continue;
    }
    const bool up = s.best_reward > s.initial_reward;
    improved += up ? 1 : 0;
    seeds << " seed " << s.seed << " " << sci(s.initial_reward) << " -> " << sci(s.best_reward) << ";";
  }
  const auto& si = p.si_eval;
  const auto& pp = p.ppo_eval;
  const bool violations_ok = pp.violation_fraction <= 0.5 * si.violation_fraction;
  const bool savings_ok = si.savings_fraction > 0.0 && pp.savings_fraction >= 0.5 * si.savings_fraction;
  const bool time_ok = p.seconds <= 4.0 * 3600.0;
  o.pass = improved >= 3 && violations_ok && savings_ok && time_ok && p.best_seed_index >= 0;
  o.detail = std::to_string(improved) + "/5 seeds improve best selection reward over SI (>= 3);" + seeds.str() +
             " test episode " + eval_line("SI", si) + " | " + eval_line("PPO", pp) + " | violation ratio <= 0.5: " +
             (violations_ok ? "yes" : "no") + ", savings retained >= 50%: " + (savings_ok ? "yes" : "no") +
             "; runtime " + sci(p.seconds / 3600.0) + " h (<= 4 h)";
  return o;
}

Outcome inference_speed(const Pipeline& p) {
  Outcome o;
  if (!p.ran) {
    o.detail = "pipeline failed: " + p.error;
    return o;
  }
  const auto& r = p.best_ppo_model.empty() ? p.si_eval : p.ppo_eval;
  o.pass = r.steps == 288 && r.solve_mean <= 1.0;
  o.detail = std::string(p.best_ppo_model.empty() ? "SI" : "PPO") + " policy, " + std::to_string(r.steps) +
             " steps: solve time min " + sci(r.solve_min) + " / mean " + sci(r.solve_mean) + " / max " +
             sci(r.solve_max) + " s (mean <= 1 s)";
  return o;
}

Outcome conservation(const Pipeline& p) {
  Outcome o;
  if (!p.ran) {
    o.detail = "pipeline failed: " + p.error;
    return o;
  }
  std::vector<const rl::EvalResult*> all{&p.si_eval, &p.steady_eval};
  if (!p.best_ppo_model.empty()) all.push_back(&p.ppo_eval);
  for (const auto& r : p.seed_evals) all.push_back(&r);
  double worst = 0.0;
  for (const auto* r : all) worst = std::max(worst, r->storage_identity_error);
  o.pass = worst <= 1e-12;
  o.detail = std::to_string(all.size()) + " evaluation episodes: max |storage identity error| " + sci(worst) +
             " (<= 1e-12)";
  return o;
}

Outcome reproducibility(const Pipeline& p, const std::string& cli_path, const std::string& out_dir) {
  Outcome o;
  if (!p.ran) {
    o.detail = "pipeline failed: " + p.error;
    return o;
  }
  const std::string model = p.best_ppo_model.empty() ? p.si_model : p.best_ppo_model;
  const std::string mode = p.best_ppo_model.empty() ? "koopman-si" : "koopman-ppo";
  nlohmann::json metrics[2];
  std::string traj[2];
  for (int run = 0; run < 2; ++run) {
    const std::string dir = (fs::path(out_dir) / ("repro_" + std::to_string(run))).string();
    const std::string cmd = cli_path + " --config " + p.config_path + " eval --mode " + mode + " --model " + model +
                            " --out " + dir + " > /dev/null 2>&1";
    if (std::system(cmd.c_str()) != 0) {
      o.detail = "cli eval failed: " + cmd;
      return o;
    }
    std::ifstream f(fs::path(dir) / ("metrics_" + mode + ".json"));
    metrics[run] = nlohmann::json::parse(f);
    metrics[run].erase("solve_time_s");
    std::ifstream t(fs::path(dir) / ("trajectory_" + mode + ".csv"));
    std::ostringstream s;
    s << t.rdbuf();
    traj[run] = s.str();
  }
  o.pass = metrics[0] == metrics[1] && traj[0] == traj[1];
  o.detail = "two `kenmpc eval --mode " + mode + "` runs: metrics " + (metrics[0] == metrics[1] ? "identical" : "differ") +
             " (solve times excluded), trajectory CSV " + (traj[0] == traj[1] ? "byte-identical" : "differs");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-11"};
  std::string out_dir = "acceptance_out";
  std::string only;
  std::string cli_path = KENMPC_CLI_PATH;
  app.add_option("--out", out_dir, "Working directory for pipeline artifacts");
  app.add_option("--only", only, "Comma-separated criterion numbers (default: all)");
  app.add_option("--cli", cli_path, "Path of the kenmpc executable");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  if (only.empty()) {
    for (int i = 1; i <= 11; ++i) selected.insert(i);
  } else {
    std::stringstream ss(only);
    std::string tok;
    while (std::getline(ss, tok, ',')) selected.insert(std::stoi(tok));
  }

  const std::vector<std::pair<int, std::string>> names{
      {1, "chaining exactness"},      {2, "QP solver correctness"},  {3, "implicit differentiation"},
      {4, "hinge/epigraph exactness"}, {5, "gradtape primitives"},    {6, "GAE oracle"},
      {7, "SI recovery"},             {8, "end-to-end desk analogue"}, {9, "inference speed"},
      {10, "storage conservation"},   {11, "eval reproducibility"}};

  Pipeline pipeline;
  const bool need_pipeline = selected.count(8) || selected.count(9) || selected.count(10) || selected.count(11);
  if (need_pipeline) {
    const bool quick = !selected.count(8);
    std::cout << "running the " << (quick ? "reduced" : "full") << " surrogate pipeline in " << out_dir << std::endl;
    pipeline = run_pipeline(out_dir, quick);
  }

  int failed = 0;
  for (const auto& [id, name] : names) {
    if (!selected.count(id)) continue;
    Outcome o;
    try {
      switch (id) {
        case 1: o = chaining(); break;
        case 2: o = qp_solver(); break;
        case 3: o = implicit_diff(); break;
        case 4: o = hinge_epigraph(); break;
        case 5: o = gradtape_checks(); break;
        case 6: o = gae_oracle(); break;
        case 7: o = si_recovery(); break;
        case 8: o = end_to_end(pipeline); break;
        case 9: o = inference_speed(pipeline); break;
        case 10: o = conservation(pipeline); break;
        case 11: o = reproducibility(pipeline, cli_path, out_dir); break;
      }
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << name << "): " << o.detail << std::endl;
  }
  std::cout << (failed == 0 ? "all selected criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
