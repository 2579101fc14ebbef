#include "kenmpc/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace kenmpc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Reads keys from one JSON object and rejects the ones nobody asked for.
class Section {
public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j_.is_object(), "config: '" + path_ + "' must be an object");
  }
  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ContractViolation("config: bad value for '" + name(key) + "': " + e.what());
    }
  }
  void get_vec(const char* key, Vec& out) {
    std::vector<double> v;
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      v = j_.at(key).get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw ContractViolation("config: bad value for '" + name(key) + "': " + e.what());
    }
    out = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  void get_scaling(const char* lower, const char* upper, Scaling& out) {
    Vec lo = out.lower, hi = out.upper;
    get_vec(lower, lo);
    get_vec(upper, hi);
    out = Scaling(lo, hi);
  }
  void get_mode(const char* key, ocp::ConstraintMode& out) {
    std::string s = ocp::to_string(out);
    get(key, s);
    out = ocp::constraint_mode_from_string(s);
  }
  /// Sub-object, empty when absent.
  json child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? j_.at(key) : json::object();
  }
  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ContractViolation("config: unknown key '" + name(item.key()) + "'");
  }

private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

void ensure_dir(const std::string& dir) {
  if (!dir.empty()) fs::create_directories(dir);
}

std::string join(const std::string& dir, const std::string& file) { return (fs::path(dir) / file).string(); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

ocp::OcpConfig RunConfig::ocp_config() const {
  ocp::OcpConfig o;
  o.horizon = ocp.horizon;
  o.dt_minutes = env.dt_minutes;
  o.inputs = env.inputs;
  const Eigen::Index n_path = dims.n_pred;
  o.path = Scaling(env.observations.lower.head(n_path), env.observations.upper.head(n_path));
  o.storage_lower = env.storage_lower;
  o.storage_upper = env.storage_upper;
  o.outputs = ocp.outputs;
  o.M = ocp.M;
  o.delta = ocp.delta;
  o.demand_rate = env.demand_rate;
  o.cost_scale = env.reward.beta;
  return o;
}

sysid::SIConfig RunConfig::sysid_config() const {
  sysid::SIConfig s = sysid;
  s.ocp = ocp_config();
  return s;
}

void RunConfig::validate() const {
  env.validate();
  const ocp::OcpConfig o = ocp_config();
  o.validate();
  sysid_config().validate();
  ppo.validate();
  require(dims.n_obs == 4 && dims.n_input == 4 && dims.n_out == 2 && dims.n_pred == 3,
          "config: model dims must match the surrogate plant (4 obs, 4 inputs, 3 predicted, 2 outputs)");
  require(dims.n_latent >= dims.n_pred, "config: n_latent must be >= n_pred");
  require(env.inputs.size() == 4 && env.observations.size() == 4, "config: env scalings must have 4 channels");
  require(ocp.outputs.size() == 2, "config: ocp outputs scaling must have 2 channels");
  require(std::abs(env.record_minutes * sysid.upscale - env.dt_minutes) < 1e-9,
          "config: sysid.upscale * env.record_minutes must equal env.dt_minutes");
  require(prices.reference_days > 0, "config: prices.reference_days must be positive");
  require(train.eval_every >= 1 && train.eval_steps >= 1, "config: train.eval_every and eval_steps must be >= 1");
  require(!train.seeds.empty(), "config: train.seeds must not be empty");
  std::set<std::uint64_t> unique(train.seeds.begin(), train.seeds.end());
  require(unique.size() == train.seeds.size(), "config: train.seeds must be distinct");
  require(eval.steps >= 1, "config: eval.steps must be >= 1");
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  root.get("out_dir", c.out_dir);

  {
    const json sub = root.child("prices");
    Section s(sub, "prices");
    s.get("reference_file", c.prices.reference_file);
    s.get("reference_days", c.prices.reference_days);
    s.get("reference_seed", c.prices.reference_seed);
    s.get("eval_seed", c.prices.eval_seed);
    s.finish();
  }
  {
    const json sub = root.child("model");
    Section s(sub, "model");
    s.get("n_obs", c.dims.n_obs);
    s.get("n_latent", c.dims.n_latent);
    s.get("n_input", c.dims.n_input);
    s.get("n_pred", c.dims.n_pred);
    s.get("n_out", c.dims.n_out);
    s.get("hidden", c.dims.hidden);
    s.finish();
  }
  {
    const json sub = root.child("env");
    Section s(sub, "env");
    s.get("dt_minutes", c.env.dt_minutes);
    s.get("record_minutes", c.env.record_minutes);
    s.get("forecast_hours", c.env.forecast_hours);
    s.get("episode_steps", c.env.episode_steps);
    s.get_scaling("input_lower", "input_upper", c.env.inputs);
    s.get_scaling("obs_lower", "obs_upper", c.env.observations);
    s.get("storage_lower", c.env.storage_lower);
    s.get("storage_upper", c.env.storage_upper);
    s.get("demand_rate", c.env.demand_rate);
    s.finish();
  }
  {
    const json sub = root.child("reward");
    Section s(sub, "reward");
    s.get("beta", c.env.reward.beta);
    s.get_vec("violation_weights", c.env.reward.violation_weights);
    s.finish();
  }
  {
    const json sub = root.child("ocp");
    Section s(sub, "ocp");
    s.get("horizon", c.ocp.horizon);
    s.get("M", c.ocp.M);
    s.get("delta", c.ocp.delta);
    s.get_scaling("output_lower", "output_upper", c.ocp.outputs);
    s.finish();
  }
  {
    const json sub = root.child("qp");
    Section s(sub, "qp");
    s.get("tol", c.qp.tol);
    s.get("max_iter", c.qp.max_iter);
    s.get("primal_reg", c.qp.primal_reg);
    s.get("dual_reg", c.qp.dual_reg);
    s.get("refine_steps", c.qp.refine_steps);
    s.get("step_fraction", c.qp.step_fraction);
    s.get("degeneracy_tol", c.qp.degeneracy_tol);
    s.get("infeasibility_tol", c.qp.infeasibility_tol);
    s.finish();
  }
  {
    const json sub = root.child("fit");
    Section s(sub, "fit");
    auto& f = c.sysid.fit;
    s.get("horizon", f.horizon);
    s.get("learning_rate", f.learning_rate);
    s.get("epochs", f.epochs);
    s.get("batch_size", f.batch_size);
    s.get("validation_fraction", f.validation_fraction);
    s.get("patience", f.patience);
    s.get("shuffle", f.shuffle);
    s.finish();
  }
  {
    const json sub = root.child("sysid");
    Section s(sub, "sysid");
    s.get("random_samples", c.sysid.random_samples);
    s.get("hold_minutes", c.sysid.hold_minutes);
    s.get("rollout_steps", c.sysid.rollout_steps);
    s.get("max_iterations", c.sysid.max_iterations);
    s.get("patience", c.sysid.patience);
    s.get_mode("constraint_mode", c.sysid.mode);
    s.get("upscale", c.sysid.upscale);
    s.finish();
  }
  {
    const json sub = root.child("ppo");
    Section s(sub, "ppo");
    auto& p = c.ppo;
    s.get("gamma", p.gamma);
    s.get("gae_lambda", p.gae_lambda);
    s.get("clip_eps", p.clip_eps);
    s.get("value_coeff", p.value_coeff);
    s.get("entropy_coeff", p.entropy_coeff);
    s.get("n_actors", p.n_actors);
    s.get("steps_per_actor", p.steps_per_actor);
    s.get("minibatch", p.minibatch);
    s.get("epochs", p.epochs);
    s.get("learning_rate", p.learning_rate);
    s.get("max_grad_norm", p.max_grad_norm);
    s.get_vec("sigma", p.sigma);
    s.get("normalize_advantages", p.normalize_advantages);
    s.get("critic_hidden", p.critic_hidden);
    s.finish();
  }
  {
    const json sub = root.child("train");
    Section s(sub, "train");
    s.get("total_steps", c.train.total_steps);
    s.get("eval_every", c.train.eval_every);
    s.get("eval_steps", c.train.eval_steps);
    s.get("eval_offset", c.train.eval_offset);
    s.get("seeds", c.train.seeds);
    s.finish();
  }
  {
    const json sub = root.child("eval");
    Section s(sub, "eval");
    s.get("steps", c.eval.steps);
    s.get("offset", c.eval.offset);
    s.get_mode("si_constraint_mode", c.eval.si_constraint_mode);
    s.get_mode("ppo_constraint_mode", c.eval.ppo_constraint_mode);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["prices"] = {{"reference_file", c.prices.reference_file},
                 {"reference_days", c.prices.reference_days},
                 {"reference_seed", c.prices.reference_seed},
                 {"eval_seed", c.prices.eval_seed}};
  j["model"] = {{"n_obs", c.dims.n_obs},     {"n_latent", c.dims.n_latent}, {"n_input", c.dims.n_input},
                {"n_pred", c.dims.n_pred},   {"n_out", c.dims.n_out},       {"hidden", c.dims.hidden}};
  j["env"] = {{"dt_minutes", c.env.dt_minutes},
              {"record_minutes", c.env.record_minutes},
              {"forecast_hours", c.env.forecast_hours},
              {"episode_steps", c.env.episode_steps},
              {"input_lower", vec_json(c.env.inputs.lower)},
              {"input_upper", vec_json(c.env.inputs.upper)},
              {"obs_lower", vec_json(c.env.observations.lower)},
              {"obs_upper", vec_json(c.env.observations.upper)},
              {"storage_lower", c.env.storage_lower},
              {"storage_upper", c.env.storage_upper},
              {"demand_rate", c.env.demand_rate}};
  j["reward"] = {{"beta", c.env.reward.beta}, {"violation_weights", vec_json(c.env.reward.violation_weights)}};
  j["ocp"] = {{"horizon", c.ocp.horizon},
              {"M", c.ocp.M},
              {"delta", c.ocp.delta},
              {"output_lower", vec_json(c.ocp.outputs.lower)},
              {"output_upper", vec_json(c.ocp.outputs.upper)}};
  j["qp"] = {{"tol", c.qp.tol},
             {"max_iter", c.qp.max_iter},
             {"primal_reg", c.qp.primal_reg},
             {"dual_reg", c.qp.dual_reg},
             {"refine_steps", c.qp.refine_steps},
             {"step_fraction", c.qp.step_fraction},
             {"degeneracy_tol", c.qp.degeneracy_tol},
             {"infeasibility_tol", c.qp.infeasibility_tol}};
  const auto& f = c.sysid.fit;
  j["fit"] = {{"horizon", f.horizon},
              {"learning_rate", f.learning_rate},
              {"epochs", f.epochs},
              {"batch_size", f.batch_size},
              {"validation_fraction", f.validation_fraction},
              {"patience", f.patience},
              {"shuffle", f.shuffle}};
  j["sysid"] = {{"random_samples", c.sysid.random_samples},
                {"hold_minutes", c.sysid.hold_minutes},
                {"rollout_steps", c.sysid.rollout_steps},
                {"max_iterations", c.sysid.max_iterations},
                {"patience", c.sysid.patience},
                {"constraint_mode", ocp::to_string(c.sysid.mode)},
                {"upscale", c.sysid.upscale}};
  const auto& p = c.ppo;
  j["ppo"] = {{"gamma", p.gamma},
              {"gae_lambda", p.gae_lambda},
              {"clip_eps", p.clip_eps},
              {"value_coeff", p.value_coeff},
              {"entropy_coeff", p.entropy_coeff},
              {"n_actors", p.n_actors},
              {"steps_per_actor", p.steps_per_actor},
              {"minibatch", p.minibatch},
              {"epochs", p.epochs},
              {"learning_rate", p.learning_rate},
              {"max_grad_norm", p.max_grad_norm},
              {"sigma", vec_json(p.sigma)},
              {"normalize_advantages", p.normalize_advantages},
              {"critic_hidden", p.critic_hidden}};
  j["train"] = {{"total_steps", c.train.total_steps},
                {"eval_every", c.train.eval_every},
                {"eval_steps", c.train.eval_steps},
                {"eval_offset", c.train.eval_offset},
                {"seeds", c.train.seeds}};
  j["eval"] = {{"steps", c.eval.steps},
               {"offset", c.eval.offset},
               {"si_constraint_mode", ocp::to_string(c.eval.si_constraint_mode)},
               {"ppo_constraint_mode", ocp::to_string(c.eval.ppo_constraint_mode)}};
  return j;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ContractViolation("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("out_dir");
  return fnv1a_hex(j.dump());
}

// ---------------------------------------------------------------------------
// Shared plumbing

PriceData make_prices(const RunConfig& c) {
  PriceData d;
  d.training = std::make_shared<const env::PriceSeries>(
      c.prices.reference_file.empty() ? env::synthetic_reference(c.prices.reference_days, c.prices.reference_seed)
                                      : env::load_prices(c.prices.reference_file));
  env::EnvConfig test_env = c.env;
  test_env.episode_steps = std::max(c.env.episode_steps, c.eval.steps);
  const std::size_t hours = test_env.hours_needed() + c.eval.offset;
  d.test = std::make_shared<const env::PriceSeries>(env::gen_prices(*d.training, hours, c.prices.eval_seed));
  return d;
}

env::Env make_env(const RunConfig& c, std::shared_ptr<const env::PriceSeries> prices) {
  return env::Env(std::make_unique<env::SurrogatePlant>(), c.env, std::move(prices));
}

koopman::Model control_step_model(const RunConfig& c, const koopman::Model& m) {
  require(m.dims == c.dims, "model dims do not match the config");
  if (std::abs(m.dt_minutes - c.env.dt_minutes) < 1e-9) return m;
  if (std::abs(m.dt_minutes * c.sysid.upscale - c.env.dt_minutes) < 1e-9) return koopman::upscale(m, c.sysid.upscale);
  throw ContractViolation("model step of " + format_double(m.dt_minutes) +
                          " min fits neither the control step nor the fitted step");
}

// ---------------------------------------------------------------------------
// sysid

void write_si_history(const std::string& path, const std::vector<sysid::SIIteration>& history,
                      const std::string& hash) {
  std::ostringstream out;
  if (!hash.empty()) out << "# config_hash " << hash << '\n';
  out << "iteration,average_reward,violation_fraction,validation_loss,dataset_samples,ocp_failures,fit_failed\n";
  for (const auto& h : history)
    out << h.iteration << ',' << format_double(h.average_reward) << ',' << format_double(h.violation_fraction) << ','
        << format_double(h.validation_loss) << ',' << h.dataset_samples << ',' << h.ocp_failures << ','
        << (h.fit_failed ? 1 : 0) << '\n';
  write_text(path, out.str());
}

SysidOutput cmd_sysid(const RunConfig& c, const std::string& out_dir) {
  ensure_dir(out_dir);
  const std::string hash = config_hash(c);
  const PriceData prices = make_prices(c);
  const env::Env environment = make_env(c, prices.training);
  SysidOutput out;
  out.result = sysid::iterative_si(environment, c.dims, sysid::DataScaling::surrogate(), c.sysid_config(), c.seed);
  out.model_path = join(out_dir, "si_model.json");
  out.dataset_path = join(out_dir, "si_dataset.csv");
  out.history_path = join(out_dir, "si_history.csv");
  koopman::save_model(out.result.model, out.model_path, hash);
  sysid::save_dataset(out.result.dataset, out.dataset_path, hash);
  write_si_history(out.history_path, out.result.history, hash);
  return out;
}

// ---------------------------------------------------------------------------
// train

TrainOutput cmd_train(const RunConfig& c, const std::string& model_path, const std::string& out_dir) {
  ensure_dir(out_dir);
  const std::string hash = config_hash(c);
  const koopman::Model initial = control_step_model(c, koopman::load_model(model_path));
  const PriceData prices = make_prices(c);
  const env::Env train_env = make_env(c, prices.training);

  TrainOutput out;
  json seeds = json::array();
  for (std::uint64_t seed : c.train.seeds) {
    SeedOutcome o;
    o.seed = seed;
    const std::string tag = "seed" + std::to_string(seed);
    o.curve_path = join(out_dir, "curve_" + tag + ".csv");
    o.best_model_path = join(out_dir, "best_model_" + tag + ".json");
    o.checkpoint_path = join(out_dir, "checkpoint_" + tag + ".json");
    try {
      rl::TrainSetup setup;
      setup.ppo = c.ppo;
      setup.ocp = c.ocp_config();
      setup.qp = c.qp;
      setup.total_steps = c.train.total_steps;
      setup.eval_every = c.train.eval_every;
      setup.eval_steps = c.train.eval_steps;
      setup.eval_offset = c.train.eval_offset;
      setup.seed = seed;
      setup.on_round = [&](const rl::Checkpoint& ck) {
        rl::save_checkpoint(ck, o.checkpoint_path, hash);
        rl::write_learning_curve(o.curve_path, ck.curve, hash);
      };
      env::Env eval_env = make_env(c, prices.training);
      const rl::TrainResult r = rl::train(train_env, eval_env, initial, setup);
      rl::write_learning_curve(o.curve_path, r.curve, hash);
      koopman::save_model(r.best_model, o.best_model_path, hash);
      rl::save_checkpoint(r.last, o.checkpoint_path, hash);
      o.ok = true;
      o.initial_reward = r.curve.front().eval_reward;
      o.best_reward = r.best_reward;
      o.best_update = r.best_update;
      o.env_steps = r.curve.back().env_steps;
    } catch (const std::exception& e) {
      o.ok = false;
      o.error = e.what();
    }
    json s = {{"seed", o.seed}, {"status", o.ok ? "ok" : "failed"}};
    if (o.ok) {
      s["initial_reward"] = o.initial_reward;
      s["max_reward"] = o.best_reward;
      s["best_update"] = o.best_update;
      s["env_steps"] = o.env_steps;
      s["curve"] = fs::path(o.curve_path).filename().string();
      s["best_model"] = fs::path(o.best_model_path).filename().string();
    } else {
      s["error"] = o.error;
    }
    seeds.push_back(s);
    out.seeds.push_back(std::move(o));
  }
  json summary = {{"config_hash", hash}, {"model", model_path}, {"seeds", seeds}};
  out.summary_path = join(out_dir, "train_summary.json");
  write_text(out.summary_path, summary.dump(1) + "\n");
  return out;
}

// ---------------------------------------------------------------------------
// eval

std::string to_string(EvalPolicy p) {
  switch (p) {
    case EvalPolicy::KoopmanSi: return "koopman-si";
    case EvalPolicy::KoopmanPpo: return "koopman-ppo";
    case EvalPolicy::Steady: return "steady";
  }
  return "?";
}

EvalPolicy eval_policy_from_string(const std::string& s) {
  if (s == "koopman-si") return EvalPolicy::KoopmanSi;
  if (s == "koopman-ppo") return EvalPolicy::KoopmanPpo;
  if (s == "steady") return EvalPolicy::Steady;
  throw ContractViolation("unknown eval mode '" + s + "' (koopman-si, koopman-ppo, steady)");
}

EvalOutput cmd_eval(const RunConfig& c, EvalPolicy policy, const std::string& model_path,
                    const std::string& out_dir) {
  ensure_dir(out_dir);
  const std::string hash = config_hash(c);
  const PriceData prices = make_prices(c);
  require(!env::is_reference_slice(*prices.training, *prices.test),
          "eval: test prices coincide with a slice of the training prices");
  env::EnvConfig ec = c.env;
  ec.episode_steps = std::max(ec.episode_steps, c.eval.steps);
  env::Env environment(std::make_unique<env::SurrogatePlant>(), ec, prices.test);

  EvalOutput out;
  ocp::ConstraintMode mode = ocp::ConstraintMode::SlackPenalty;
  if (policy == EvalPolicy::Steady) {
    out.result = rl::evaluate_constant(Vec::Zero(c.dims.n_input), environment, c.eval.offset, c.eval.steps);
  } else {
    mode = policy == EvalPolicy::KoopmanSi ? c.eval.si_constraint_mode : c.eval.ppo_constraint_mode;
    const koopman::Model m = control_step_model(c, koopman::load_model(model_path));
    out.result = rl::evaluate(m, c.ocp_config(), mode, environment, c.eval.offset, c.eval.steps);
  }
  const rl::EvalResult& r = out.result;
  const std::string tag = to_string(policy);
  out.metrics_path = join(out_dir, "metrics_" + tag + ".json");
  out.trajectory_path = join(out_dir, "trajectory_" + tag + ".csv");
  out.metrics = {{"config_hash", hash},
                 {"mode", tag},
                 {"constraint_mode", policy == EvalPolicy::Steady ? "none" : ocp::to_string(mode)},
                 {"model", policy == EvalPolicy::Steady ? "" : model_path},
                 {"steps", r.steps},
                 {"average_reward", r.average_reward},
                 {"violation_fraction", r.violation_fraction},
                 {"cost_savings_fraction", r.savings_fraction},
                 {"total_cost", r.total_cost},
                 {"steady_cost", r.steady_cost},
                 {"ocp_failures", r.ocp_failures},
                 {"storage_identity_error", r.storage_identity_error},
                 {"solve_time_s", {{"min", r.solve_min}, {"mean", r.solve_mean}, {"max", r.solve_max}}}};
  write_text(out.metrics_path, out.metrics.dump(1) + "\n");
  env::write_trajectory_csv(out.trajectory_path, r.rows, hash);
  return out;
}

// ---------------------------------------------------------------------------
// prices

std::string cmd_prices_generate(const RunConfig& c, std::size_t hours, std::uint64_t seed,
                                const std::string& out_path) {
  require(hours > 0, "prices generate: hours must be positive");
  const PriceData prices = make_prices(c);
  const env::PriceSeries generated = env::gen_prices(*prices.training, hours, seed);
  const fs::path p(out_path);
  if (p.has_parent_path()) ensure_dir(p.parent_path().string());
  env::save_prices(generated, out_path, config_hash(c));
  return out_path;
}

env::PriceSeries cmd_prices_validate(const std::string& path) { return env::load_prices(path); }

}  // namespace kenmpc::cli
