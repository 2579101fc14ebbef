#include "doctest.h"

#include "kenmpc/sysid.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

using namespace kenmpc;
using namespace kenmpc::sysid;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("kenmpc_test_" + name)).string();
}

/// Stable 4-state linear plant observed through a rotation, two outputs.
env::LinearLatentPlant linear_plant() {
  Mat A(4, 4);
  A << 0.90, 0.05, 0.00, 0.00,
       -0.04, 0.85, 0.03, 0.00,
       0.00, 0.02, 0.95, 0.01,
       0.01, 0.00, -0.02, 0.80;
  Mat B(4, 4);
  B << 0.05, 0.00, 0.01, 0.00,
       0.00, 0.04, 0.00, 0.01,
       0.02, 0.00, 0.03, 0.00,
       0.00, 0.01, 0.00, 0.05;
  Mat C(4, 4);
  C << 0.8, 0.2, 0.0, 0.1,
       -0.1, 0.9, 0.1, 0.0,
       0.0, 0.1, 0.7, -0.2,
       0.1, 0.0, 0.2, 0.9;
  Mat D(2, 4);
  D << 0.3, -0.2, 0.1, 0.0,
       0.0, 0.1, 0.2, -0.3;
  Mat E(2, 4);
  E << 0.2, 0.0, -0.1, 0.05,
       0.0, 0.1, 0.0, 0.1;
  return env::LinearLatentPlant(A, B, C, D, E, 5.0);
}

koopman::Dims linear_dims() {
  koopman::Dims d;
  d.n_obs = 4;
  d.n_latent = 4;
  d.n_input = 4;
  d.n_pred = 3;
  d.n_out = 2;
  d.hidden = {};
  return d;
}

SIDataset small_dataset() {
  SIDataset d;
  d.dt_minutes = 5.0;
  Trajectory a;
  a.source = Source::Random;
  for (int k = 0; k < 3; ++k)
    a.push((Vec(2) << k, 0.1 * k).finished(), (Vec(1) << -k).finished(), (Vec(1) << 1.0 / 3.0 + k).finished());
  Trajectory b;
  b.source = Source::EnmpcRollout;
  b.push((Vec(2) << 1e-300, -2.5e17).finished(), (Vec(1) << 0.0).finished(), (Vec(1) << 7.0).finished());
  d.trajectories = {a, b};
  return d;
}

}  // namespace

TEST_CASE("dataset archive: exact round trip") {
  const SIDataset d = small_dataset();
  const SIDataset back = parse_dataset(format_dataset(d, "deadbeef"));
  REQUIRE(back.trajectories.size() == 2);
  CHECK(back.dt_minutes == 5.0);
  CHECK(back.total_samples() == 4);
  for (std::size_t j = 0; j < 2; ++j) {
    const auto& x = d.trajectories[j];
    const auto& y = back.trajectories[j];
    CHECK(x.source == y.source);
    REQUIRE(x.size() == y.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
      CHECK(x.x_obs[k] == y.x_obs[k]);
      CHECK(x.u[k] == y.u[k]);
      CHECK(x.y[k] == y.y[k]);
    }
  }

  const std::string path = tmp_path("dataset.txt");
  save_dataset(d, path);
  CHECK(load_dataset(path).total_samples() == 4);
  std::remove(path.c_str());
}

TEST_CASE("dataset archive: parse errors carry line numbers") {
  auto line_of = [](const std::string& s) -> std::size_t {
    try {
      parse_dataset(s);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  const std::string head = "kenmpc-si-dataset 1\ndt_minutes 5\ntrajectories 1\n";
  CHECK(line_of("something else\n") == 1);
  CHECK(line_of("kenmpc-si-dataset 1\ndt_minutes x\n") == 2);
  CHECK(line_of(head + "trajectory random 1 1 1 1\n1 2\n") == 5);
  CHECK(line_of(head + "trajectory random 1 1 1 1\n1 2 zz\n") == 5);
  CHECK(line_of(head + "trajectory bogus 1 1 1 1\n1 2 3\n") == 4);
  CHECK(line_of(head + "trajectory random 2 1 1 1\n1 2 3\n") == 6);
  CHECK(line_of(head + "trajectory random 1 1 1 1\n1 2 3\n") == 0);
}

TEST_CASE("dataset append only grows") {
  SIDataset d = small_dataset();
  const SIDataset before = d;
  d.append(small_dataset());
  CHECK(d.total_samples() == 2 * before.total_samples());
  for (std::size_t j = 0; j < before.trajectories.size(); ++j)
    CHECK(d.trajectories[j].x_obs == before.trajectories[j].x_obs);
  SIDataset other;
  other.dt_minutes = 15.0;
  other.trajectories = before.trajectories;
  CHECK_THROWS_AS(d.append(other), ContractViolation);
}

TEST_CASE("random sampling: box membership, hold period, determinism") {
  env::SurrogatePlant plant;
  const Scaling box = plant.params().inputs;
  const Trajectory a = sample_random(plant, box, 120, 4);
  const Trajectory b = sample_random(plant, box, 120, 4);
  REQUIRE(a.size() == 120);
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a.x_obs[k] == b.x_obs[k]);
    CHECK(a.u[k] == b.u[k]);
    CHECK(((a.u[k] - box.lower).array() >= 0.0).all());
    CHECK(((box.upper - a.u[k]).array() >= 0.0).all());
    // Redrawn every 6 samples (30 min hold, 5 min record).
    if (k % 6 != 0) CHECK(a.u[k] == a.u[k - 1]);
  }
  CHECK(a.u[6] != a.u[5]);
  CHECK(a.x_obs[0] == env::SurrogatePlant().observe());

  // y_k = h(x_k, u_k).
  env::SurrogatePlant replay;
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK((replay.output(a.u[k]) - a.y[k]).cwiseAbs().maxCoeff() == 0.0);
    replay.advance(a.u[k], 5.0);
  }

  const Trajectory constant = sample_random(plant, box, 30, 9, 30 * 5.0);
  for (const Vec& u : constant.u) CHECK(u == constant.u[0]);
  CHECK(sample_random(plant, box, 20, 5).u[0] != a.u[0]);
}

TEST_CASE("plateau counter") {
  PlateauCounter p(5);
  const std::vector<double> seq{1.0, 2.0, 1.9, 1.8, 1.7, 1.6, 1.5};
  std::vector<bool> stops;
  for (double v : seq) stops.push_back(p.update(v));
  CHECK(stops == std::vector<bool>{false, false, false, false, false, false, true});
  CHECK(p.best_index() == 1);
  CHECK(p.best_value() == 2.0);

  PlateauCounter q(1);
  CHECK_FALSE(q.update(-1.0));
  CHECK_FALSE(q.update(0.0));
  CHECK(q.update(0.0));  // ties do not count as improvement
}

TEST_CASE("window loss: one-step formula by hand") {
  koopman::Dims dims = linear_dims();
  dims.n_obs = 2;
  dims.n_latent = 2;
  dims.n_input = 1;
  dims.n_pred = 1;
  dims.n_out = 1;
  Rng rng(2);
  const koopman::Model m = koopman::init_model(dims, 5.0, rng);
  SIDataset d = small_dataset();
  d.trajectories.resize(1);
  const DataScaling s = DataScaling::identity(2, 1, 1);
  const auto windows = make_windows(d, 1);
  REQUIRE(windows.size() == 2);

  double expected = 0.0;
  const auto& t = d.trajectories[0];
  for (std::size_t k = 0; k < 2; ++k) {
    const Vec z = koopman::encode(m, t.x_obs[k]);
    expected += (koopman::decode_output(m, z, t.u[k]) - t.y[k]).squaredNorm();
    const Vec zn = koopman::step_latent(m, z, t.u[k]);
    expected += (koopman::decode_state(m, zn) - t.x_obs[k + 1].head(1)).squaredNorm();
  }
  expected /= 2.0;
  CHECK(window_loss(m, d, s, windows, 1) == doctest::Approx(expected).epsilon(1e-13));
  CHECK(make_windows(d, 3).empty());
}

TEST_CASE("fit recovers an exactly linear plant") {
  env::LinearLatentPlant plant = linear_plant();
  SIDataset data;
  data.dt_minutes = 5.0;
  const Scaling box(Vec::Constant(4, -1.0), Vec::Constant(4, 1.0));
  data.trajectories.push_back(sample_random(plant, box, 1500, 21, 10.0));
  FitConfig cfg;
  cfg.horizon = 12;
  cfg.epochs = 400;
  cfg.patience = 40;
  cfg.batch_size = 64;
  cfg.learning_rate = 5e-3;
  const DataScaling s = DataScaling::identity(4, 4, 2);
  const FitResult fit = fit_koopman(data, linear_dims(), s, cfg, 3);
  MESSAGE("validation loss " << fit.validation_loss << " after " << fit.epochs_run << " epochs");
  CHECK(fit.validation_loss <= 1e-6);

  SIDataset fresh;
  fresh.dt_minutes = 5.0;
  fresh.trajectories.push_back(sample_random(plant, box, 300, 99, 10.0));
  const double err = open_loop_error(fit.model, fresh, s, 12);
  MESSAGE("open-loop error " << err);
  CHECK(err <= 1e-3);
  CHECK(fit.validation_history.size() == static_cast<std::size_t>(fit.epochs_run));
}

TEST_CASE("fit: bad inputs rejected") {
  SIDataset d = small_dataset();
  d.trajectories.resize(1);
  koopman::Dims dims = linear_dims();
  dims.n_obs = 2;
  dims.n_latent = 2;
  dims.n_input = 1;
  dims.n_pred = 1;
  dims.n_out = 1;
  FitConfig cfg;
  cfg.horizon = 1;
  cfg.epochs = 2;
  const DataScaling s = DataScaling::identity(2, 1, 1);
  CHECK_THROWS_AS(fit_koopman(d, linear_dims(), s, cfg, 1), ContractViolation);
  cfg.horizon = 5;
  CHECK_THROWS_AS(fit_koopman(d, dims, s, cfg, 1), ContractViolation);
  cfg.learning_rate = -1.0;
  CHECK_THROWS_AS(fit_koopman(d, dims, s, cfg, 1), ContractViolation);
}

TEST_CASE("iterative identification, one iteration, linear plant") {
  const Scaling unit4(Vec::Constant(4, -1.0), Vec::Constant(4, 1.0));
  env::EnvConfig ec;
  ec.inputs = unit4;
  ec.observations = unit4;
  ec.demand_rate = 0.0;
  ec.episode_steps = 16;
  auto prices = std::make_shared<const env::PriceSeries>(env::synthetic_reference(4, 3));
  const env::Env environment(std::make_unique<env::LinearLatentPlant>(linear_plant()), ec, prices);

  SIConfig cfg;
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
  const DataScaling s = DataScaling::identity(4, 4, 2);

  const SIResult r = iterative_si(environment, linear_dims(), s, cfg, 8);
  REQUIRE(r.history.size() == 1);
  CHECK(r.best_iteration == 0);
  CHECK(koopman::flatten(r.model).values() == koopman::flatten(r.models[0]).values());
  CHECK_FALSE(r.history[0].fit_failed);
  CHECK(r.dataset.total_samples() == 1500 + 24 * 3);
  CHECK(r.dataset.trajectories[0].source == Source::Random);
  CHECK(r.dataset.trajectories.back().source == Source::EnmpcRollout);
  CHECK(std::isfinite(r.best_reward));

  auto plant = linear_plant();
  SIDataset fresh;
  fresh.dt_minutes = 5.0;
  fresh.trajectories.push_back(sample_random(plant, unit4, 300, 77, 10.0));
  CHECK(open_loop_error(r.model, fresh, s, 12) <= 1e-3);
}
