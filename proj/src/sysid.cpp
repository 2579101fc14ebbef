#include "kenmpc/sysid.hpp"

#include "kenmpc/gradtape.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace kenmpc::sysid {

std::string to_string(Source s) { return s == Source::Random ? "random" : "enmpc_rollout"; }

Source source_from_string(const std::string& s) {
  if (s == "random") return Source::Random;
  if (s == "enmpc_rollout") return Source::EnmpcRollout;
  throw ContractViolation("unknown data source '" + s + "'");
}

void Trajectory::push(const Vec& x, const Vec& u_k, const Vec& y_k) {
  x_obs.push_back(x);
  u.push_back(u_k);
  y.push_back(y_k);
}

std::size_t SIDataset::total_samples() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.size();
  return n;
}

void SIDataset::append(const SIDataset& more) {
  require(trajectories.empty() || more.trajectories.empty() || more.dt_minutes == dt_minutes,
          "SIDataset::append: sample period mismatch");
  if (trajectories.empty()) dt_minutes = more.dt_minutes;
  trajectories.insert(trajectories.end(), more.trajectories.begin(), more.trajectories.end());
}

void SIDataset::validate() const {
  require(dt_minutes > 0.0, "SIDataset: dt must be positive");
  Eigen::Index nx = -1, nu = -1, ny = -1;
  for (const auto& t : trajectories) {
    require(t.x_obs.size() == t.u.size() && t.u.size() == t.y.size(), "SIDataset: ragged trajectory");
    for (std::size_t k = 0; k < t.size(); ++k) {
      if (nx < 0) {
        nx = t.x_obs[k].size();
        nu = t.u[k].size();
        ny = t.y[k].size();
      }
      require(t.x_obs[k].size() == nx && t.u[k].size() == nu && t.y[k].size() == ny,
              "SIDataset: inconsistent sample widths");
      require(t.x_obs[k].allFinite() && t.u[k].allFinite() && t.y[k].allFinite(),
              "SIDataset: non-finite sample");
    }
  }
}

// ---------------------------------------------------------------------------
// Archive

std::string format_dataset(const SIDataset& data, const std::string& config_hash) {
  data.validate();
  std::ostringstream out;
  out << "kenmpc-si-dataset 1\n";
  if (!config_hash.empty()) out << "config_hash " << config_hash << "\n";
  out << "dt_minutes " << format_double(data.dt_minutes) << "\n";
  out << "trajectories " << data.trajectories.size() << "\n";
  for (const auto& t : data.trajectories) {
    const Eigen::Index nx = t.size() ? t.x_obs[0].size() : 0;
    const Eigen::Index nu = t.size() ? t.u[0].size() : 0;
    const Eigen::Index ny = t.size() ? t.y[0].size() : 0;
    out << "trajectory " << to_string(t.source) << ' ' << t.size() << ' ' << nx << ' ' << nu << ' ' << ny << "\n";
    for (std::size_t k = 0; k < t.size(); ++k) {
      bool first = true;
      for (const Vec* v : {&t.x_obs[k], &t.u[k], &t.y[k]}) {
        for (Eigen::Index i = 0; i < v->size(); ++i) {
          if (!first) out << ' ';
          out << format_double((*v)[i]);
          first = false;
        }
      }
      out << "\n";
    }
  }
  return out.str();
}

SIDataset parse_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> std::string {
    if (!std::getline(in, line)) throw ParseError("unexpected end of dataset archive", lineno + 1);
    ++lineno;
    return line;
  };
  if (next() != "kenmpc-si-dataset 1") throw ParseError("expected header 'kenmpc-si-dataset 1'", lineno);
  SIDataset data;
  std::string l = next();
  if (l.rfind("config_hash ", 0) == 0) l = next();
  {
    std::istringstream s(l);
    std::string key, val;
    s >> key >> val;
    if (key != "dt_minutes" || !parse_double(val, data.dt_minutes)) throw ParseError("expected dt_minutes", lineno);
  }
  std::size_t count = 0;
  {
    std::istringstream s(next());
    std::string key;
    if (!(s >> key >> count) || key != "trajectories") throw ParseError("expected trajectory count", lineno);
  }
  for (std::size_t j = 0; j < count; ++j) {
    std::istringstream s(next());
    std::string key, src;
    std::size_t n = 0;
    int nx = 0, nu = 0, ny = 0;
    if (!(s >> key >> src >> n >> nx >> nu >> ny) || key != "trajectory")
      throw ParseError("expected trajectory header", lineno);
    Trajectory t;
    try {
      t.source = source_from_string(src);
    } catch (const ContractViolation& e) {
      throw ParseError(e.what(), lineno);
    }
    for (std::size_t k = 0; k < n; ++k) {
      std::istringstream row(next());
      std::vector<double> vals;
      std::string tok;
      while (row >> tok) {
        double v = 0.0;
        if (!parse_double(tok, v)) throw ParseError("bad number '" + tok + "'", lineno);
        vals.push_back(v);
      }
      if (vals.size() != static_cast<std::size_t>(nx + nu + ny)) throw ParseError("wrong number of columns", lineno);
      t.push(Eigen::Map<Vec>(vals.data(), nx), Eigen::Map<Vec>(vals.data() + nx, nu),
             Eigen::Map<Vec>(vals.data() + nx + nu, ny));
    }
    data.trajectories.push_back(std::move(t));
  }
  data.validate();
  return data;
}

void save_dataset(const SIDataset& data, const std::string& path, const std::string& config_hash) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write dataset " + path);
  f << format_dataset(data, config_hash);
}

SIDataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open dataset " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_dataset(ss.str());
}

// ---------------------------------------------------------------------------
// Scaling and data generation

DataScaling DataScaling::surrogate() {
  const env::EnvConfig e;
  const ocp::OcpConfig o;
  return {e.observations, e.inputs, o.outputs};
}

DataScaling DataScaling::identity(int n_obs, int n_input, int n_output) {
  auto id = [](int n) { return Scaling(Vec::Constant(n, -1.0), Vec::Constant(n, 1.0)); };
  return {id(n_obs), id(n_input), id(n_output)};
}

Trajectory sample_random(env::PlantModel& plant, const Scaling& input_box, int n_samples, std::uint64_t seed,
                         double hold_minutes, double record_minutes) {
  require(n_samples >= 0 && hold_minutes > 0.0 && record_minutes > 0.0, "sample_random: bad arguments");
  require(input_box.size() == plant.n_input(), "sample_random: input box width");
  Rng rng(seed);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  plant.reset();
  Trajectory t;
  t.source = Source::Random;
  Vec u;
  double next_draw = 0.0;
  for (int k = 0; k < n_samples; ++k) {
    const double now = k * record_minutes;
    if (now >= next_draw - 1e-9) {
      Vec v(input_box.size());
      for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = U(rng);
      u = input_box.to_physical(v);
      next_draw += hold_minutes;
    }
    t.push(plant.observe(), u, plant.output(u));
    if (!plant.advance(u, record_minutes)) break;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Fitting

namespace {

struct ScaledTrajectory {
  Mat X, U, Y;  // one column per sample
};

std::vector<ScaledTrajectory> scale_data(const SIDataset& data, const DataScaling& s) {
  std::vector<ScaledTrajectory> out;
  out.reserve(data.trajectories.size());
  for (const auto& t : data.trajectories) {
    ScaledTrajectory st;
    const auto n = static_cast<Eigen::Index>(t.size());
    st.X.resize(s.observations.size(), n);
    st.U.resize(s.inputs.size(), n);
    st.Y.resize(s.outputs.size(), n);
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      st.X.col(k) = s.observations.to_scaled(t.x_obs[kk]);
      st.U.col(k) = s.inputs.to_scaled(t.u[kk]);
      st.Y.col(k) = s.outputs.to_scaled(t.y[kk]);
    }
    out.push_back(std::move(st));
  }
  return out;
}

struct Batch {
  Mat X0;
  std::vector<Mat> U, Xt, Yt;  // U[h], Yt[h] at t+h; Xt[h] at t+h+1
};

Batch gather(const std::vector<ScaledTrajectory>& data, std::span<const Window> windows, int H, int n_pred) {
  const auto b = static_cast<Eigen::Index>(windows.size());
  Batch batch;
  const auto& first = data[windows[0].traj];
  batch.X0.resize(first.X.rows(), b);
  batch.U.assign(static_cast<std::size_t>(H), Mat(first.U.rows(), b));
  batch.Xt.assign(static_cast<std::size_t>(H), Mat(n_pred, b));
  batch.Yt.assign(static_cast<std::size_t>(H), Mat(first.Y.rows(), b));
  for (Eigen::Index j = 0; j < b; ++j) {
    const Window& w = windows[static_cast<std::size_t>(j)];
    const auto& st = data[w.traj];
    const auto s = static_cast<Eigen::Index>(w.start);
    batch.X0.col(j) = st.X.col(s);
    for (int h = 0; h < H; ++h) {
      const auto hh = static_cast<std::size_t>(h);
      batch.U[hh].col(j) = st.U.col(s + h);
      batch.Yt[hh].col(j) = st.Y.col(s + h);
      batch.Xt[hh].col(j) = st.X.col(s + h + 1).head(n_pred);
    }
  }
  return batch;
}

double batch_loss(const koopman::Model& m, const Batch& b, int H) {
  Mat Z = m.encoder.forward_batch(b.X0);
  double loss = 0.0;
  for (int h = 0; h < H; ++h) {
    const auto hh = static_cast<std::size_t>(h);
    loss += (m.D * Z + m.E * b.U[hh] - b.Yt[hh]).squaredNorm();
    Z = m.A * Z + m.B * b.U[hh];
    loss += (m.C * Z - b.Xt[hh]).squaredNorm();
  }
  return loss / (static_cast<double>(b.X0.cols()) * H);
}

/// Loss and gradient of one minibatch through the tape.
double batch_grad(const koopman::Model& m, const Batch& b, int H, Vec& grad) {
  tape::Tape t(koopman::flatten(m).values());
  const tape::ModelNodes nodes = tape::register_model(t, m.dims);
  tape::NodeId z = tape::encode(t, nodes, t.constant(b.X0));
  std::vector<tape::NodeId> terms;
  for (int h = 0; h < H; ++h) {
    const auto hh = static_cast<std::size_t>(h);
    const tape::NodeId u = t.constant(b.U[hh]);
    const tape::NodeId y = tape::decode_output(t, nodes, z, u);
    terms.push_back(t.sum_squares(t.sub(y, t.constant(b.Yt[hh]))));
    z = tape::step_latent(t, nodes, z, u);
    const tape::NodeId x = tape::decode_state(t, nodes, z);
    terms.push_back(t.sum_squares(t.sub(x, t.constant(b.Xt[hh]))));
  }
  tape::NodeId total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = t.add(total, terms[i]);
  const double scale = 1.0 / (static_cast<double>(b.X0.cols()) * H);
  const tape::NodeId loss = t.scale(total, scale);
  const std::pair<tape::NodeId, Mat> seed{loss, Mat::Ones(1, 1)};
  grad = t.backward(std::span(&seed, 1));
  return t.value(loss)(0, 0);
}

double loss_over(const koopman::Model& m, const std::vector<ScaledTrajectory>& data,
                 std::span<const Window> windows, int H) {
  if (windows.empty()) return 0.0;
  constexpr std::size_t chunk = 1024;
  double total = 0.0;
  for (std::size_t i = 0; i < windows.size(); i += chunk) {
    const auto part = windows.subspan(i, std::min(chunk, windows.size() - i));
    total += batch_loss(m, gather(data, part, H, m.dims.n_pred), H) * static_cast<double>(part.size());
  }
  return total / static_cast<double>(windows.size());
}

}  // namespace

void FitConfig::validate() const {
  require(horizon >= 1, "FitConfig: horizon must be >= 1");
  require(learning_rate > 0.0, "FitConfig: learning rate must be positive");
  require(epochs >= 1 && batch_size >= 1 && patience >= 1, "FitConfig: epochs, batch size and patience must be >= 1");
  require(validation_fraction >= 0.0 && validation_fraction < 1.0, "FitConfig: validation fraction in [0, 1)");
}

std::vector<Window> make_windows(const SIDataset& data, int horizon) {
  std::vector<Window> w;
  for (std::size_t j = 0; j < data.trajectories.size(); ++j) {
    const std::size_t n = data.trajectories[j].size();
    for (std::size_t s = 0; s + static_cast<std::size_t>(horizon) < n; ++s) w.push_back({j, s});
  }
  return w;
}

double window_loss(const koopman::Model& model, const SIDataset& data, const DataScaling& scaling,
                   std::span<const Window> windows, int horizon) {
  return loss_over(model, scale_data(data, scaling), windows, horizon);
}

FitResult fit_koopman(const SIDataset& data, const koopman::Dims& dims, const DataScaling& scaling,
                      const FitConfig& config, std::uint64_t seed, const koopman::Model* init) {
  config.validate();
  data.validate();
  const int H = config.horizon;
  require(data.total_samples() > 0, "fit_koopman: empty dataset");
  require(scaling.observations.size() == dims.n_obs && scaling.inputs.size() == dims.n_input &&
              scaling.outputs.size() == dims.n_out && dims.n_pred <= dims.n_obs,
          "fit_koopman: scaling does not match model dimensions");
  Rng rng(seed);
  koopman::Model model = init ? *init : koopman::init_model(dims, data.dt_minutes, rng);
  require(model.dims == dims, "fit_koopman: initial model has different dimensions");
  model.dt_minutes = data.dt_minutes;

  // Chronological split per trajectory: the tail of each one is held out.
  std::vector<Window> train, val;
  for (std::size_t j = 0; j < data.trajectories.size(); ++j) {
    const std::size_t n = data.trajectories[j].size();
    const auto cut = static_cast<std::size_t>(std::floor(static_cast<double>(n) * (1.0 - config.validation_fraction)));
    for (std::size_t s = 0; s + static_cast<std::size_t>(H) < n; ++s) {
      if (s + static_cast<std::size_t>(H) < cut)
        train.push_back({j, s});
      else if (s >= cut)
        val.push_back({j, s});
    }
  }
  if (train.empty()) std::swap(train, val);
  require(!train.empty(), "fit_koopman: no trajectory is longer than the loss horizon");
  if (val.empty()) val = train;

  const auto scaled = scale_data(data, scaling);
  Vec theta = koopman::flatten(model).values();
  Adam adam(static_cast<std::size_t>(theta.size()), config.learning_rate);

  FitResult result;
  result.model = model;
  result.validation_loss = loss_over(model, scaled, val, H);
  if (!std::isfinite(result.validation_loss))
    throw std::runtime_error("fit_koopman: initial validation loss is not finite");
  int since_best = 0;
  Vec grad;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    if (config.shuffle) std::shuffle(train.begin(), train.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t i = 0; i < train.size(); i += static_cast<std::size_t>(config.batch_size)) {
      const auto part = std::span<const Window>(train).subspan(
          i, std::min(static_cast<std::size_t>(config.batch_size), train.size() - i));
      const double l = batch_grad(model, gather(scaled, part, H, dims.n_pred), H, grad);
      if (!std::isfinite(l) || !grad.allFinite()) {
        std::ostringstream msg;
        msg << "fit_koopman: non-finite loss at epoch " << epoch << ", batch " << i / config.batch_size
            << " (best validation loss " << result.validation_loss << " at epoch " << result.best_epoch << ")";
        throw std::runtime_error(msg.str());
      }
      epoch_loss += l * static_cast<double>(part.size());
      adam.step(theta, grad);
      koopman::assign(model, koopman::ParamVector(theta));
    }
    result.train_loss = epoch_loss / static_cast<double>(train.size());
    const double v = loss_over(model, scaled, val, H);
    result.validation_history.push_back(v);
    result.epochs_run = epoch;
    if (!std::isfinite(v)) {
      std::ostringstream msg;
      msg << "fit_koopman: non-finite validation loss at epoch " << epoch << " (best " << result.validation_loss
          << " at epoch " << result.best_epoch << ")";
      throw std::runtime_error(msg.str());
    }
    if (v < result.validation_loss) {
      result.validation_loss = v;
      result.model = model;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  return result;
}

double open_loop_error(const koopman::Model& model, const SIDataset& data, const DataScaling& scaling,
                       int horizon) {
  const auto scaled = scale_data(data, scaling);
  const auto windows = make_windows(data, horizon);
  double worst = 0.0;
  constexpr std::size_t chunk = 1024;
  for (std::size_t i = 0; i < windows.size(); i += chunk) {
    const auto part = std::span<const Window>(windows).subspan(i, std::min(chunk, windows.size() - i));
    const Batch b = gather(scaled, part, horizon, model.dims.n_pred);
    Mat Z = model.encoder.forward_batch(b.X0);
    for (int h = 0; h < horizon; ++h) {
      const auto hh = static_cast<std::size_t>(h);
      worst = std::max(worst, (model.D * Z + model.E * b.U[hh] - b.Yt[hh]).cwiseAbs().maxCoeff());
      Z = model.A * Z + model.B * b.U[hh];
      worst = std::max(worst, (model.C * Z - b.Xt[hh]).cwiseAbs().maxCoeff());
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Iterative loop

bool PlateauCounter::update(double value) {
  if (n_ == 0 || value > best_) {
    best_ = value;
    best_index_ = n_;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  ++n_;
  return since_best_ >= patience_;
}

void SIConfig::validate() const {
  fit.validate();
  ocp.validate();
  require(random_samples > fit.horizon, "SIConfig: random sampling shorter than the loss horizon");
  require(hold_minutes > 0.0, "SIConfig: hold period must be positive");
  require(rollout_steps >= 1 && max_iterations >= 1 && patience >= 1, "SIConfig: counts must be >= 1");
  require(upscale >= 1, "SIConfig: upscale factor must be >= 1");
}

RolloutSummary controller_rollout(env::Env& environment, ocp::EnmpcController& controller, int steps,
                                  std::uint64_t seed) {
  RolloutSummary out;
  std::uint64_t episode = 0;
  env::Observation obs = environment.reset(seed);
  controller.reset();
  Trajectory current;
  current.source = Source::EnmpcRollout;
  Vec last_u = Vec::Zero(environment.config().inputs.size());
  const int N = controller.config().horizon;
  double reward_sum = 0.0;
  int violations = 0;
  for (int k = 0; k < steps; ++k) {
    const ocp::PolicyStep p = controller.act(obs.x_obs_scaled, obs.storage, environment.step_prices(N));
    if (p.ok)
      last_u = p.u_scaled;
    else
      ++out.ocp_failures;
    const env::StepResult r = environment.step(last_u);
    for (const auto& s : r.info.substeps) current.push(s.x_obs, s.u, s.y);
    reward_sum += r.reward;
    violations += r.info.any_violation ? 1 : 0;
    obs = r.observation;
    if (r.done && k + 1 < steps) {
      out.data.push_back(std::move(current));
      current = Trajectory{};
      current.source = Source::EnmpcRollout;
      obs = environment.reset(seed + 0x9e3779b97f4a7c15ULL * ++episode);
      controller.reset();
      last_u.setZero();
    }
  }
  if (current.size() > 0) out.data.push_back(std::move(current));
  out.average_reward = reward_sum / steps;
  out.violation_fraction = static_cast<double>(violations) / steps;
  return out;
}

SIResult iterative_si(const env::Env& environment, const koopman::Dims& dims, const DataScaling& scaling,
                      const SIConfig& config, std::uint64_t seed) {
  config.validate();
  env::Env env(environment);
  require(std::abs(config.ocp.dt_minutes - env.config().dt_minutes) < 1e-9,
          "iterative_si: controller and environment step lengths differ");
  require(std::abs(env.config().record_minutes * config.upscale - env.config().dt_minutes) < 1e-9,
          "iterative_si: upscale factor does not map the record cadence to the control step");

  SIResult result;
  result.dataset.dt_minutes = env.config().record_minutes;
  {
    auto plant = env.plant().clone();
    result.dataset.trajectories.push_back(sample_random(*plant, env.config().inputs, config.random_samples, seed,
                                                        config.hold_minutes, env.config().record_minutes));
  }

  PlateauCounter plateau(config.patience);
  std::optional<koopman::Model> previous;
  for (int it = 0; it < config.max_iterations; ++it) {
    SIIteration rec;
    rec.iteration = it;
    koopman::Model fitted;
    try {
      const FitResult fit = fit_koopman(result.dataset, dims, scaling, config.fit, seed + 1000003ULL * (it + 1),
                                        previous ? &*previous : nullptr);
      fitted = fit.model;
      rec.validation_loss = fit.validation_loss;
    } catch (const std::exception&) {
      rec.fit_failed = true;
    }
    if (rec.fit_failed) {
      rec.average_reward = -std::numeric_limits<double>::infinity();
      rec.dataset_samples = result.dataset.total_samples();
      result.history.push_back(rec);
      result.models.push_back(previous ? *previous : koopman::zero_model(dims, result.dataset.dt_minutes));
      if (plateau.update(rec.average_reward)) break;
      continue;
    }
    previous = fitted;
    ocp::EnmpcController ctl(koopman::upscale(fitted, config.upscale), config.ocp, config.mode);
    RolloutSummary roll = controller_rollout(env, ctl, config.rollout_steps, seed + 7919ULL * (it + 1));
    rec.average_reward = roll.average_reward;
    rec.violation_fraction = roll.violation_fraction;
    rec.ocp_failures = roll.ocp_failures;
    SIDataset more;
    more.dt_minutes = result.dataset.dt_minutes;
    more.trajectories = std::move(roll.data);
    result.dataset.append(more);
    rec.dataset_samples = result.dataset.total_samples();
    result.history.push_back(rec);
    result.models.push_back(fitted);
    if (plateau.update(rec.average_reward)) break;
  }
  result.best_iteration = plateau.best_index();
  result.best_reward = plateau.best_value();
  result.model = result.models[static_cast<std::size_t>(result.best_iteration)];
  return result;
}

}  // namespace kenmpc::sysid
