#include "kenmpc/rl.hpp"

#include "kenmpc/gradtape.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace kenmpc::rl {

namespace {

nlohmann::json vec_to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec vec_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

void PpoConfig::validate() const {
  require(gamma > 0.0 && gamma <= 1.0, "PpoConfig: gamma must be in (0, 1]");
  require(gae_lambda >= 0.0 && gae_lambda <= 1.0, "PpoConfig: lambda must be in [0, 1]");
  require(clip_eps > 0.0, "PpoConfig: clip epsilon must be positive");
  require(value_coeff >= 0.0 && entropy_coeff >= 0.0, "PpoConfig: loss coefficients must be >= 0");
  require(n_actors >= 1 && steps_per_actor >= 1 && minibatch >= 1 && epochs >= 1,
          "PpoConfig: counts must be >= 1");
  require(batch_size() % minibatch == 0, "PpoConfig: minibatch must divide n_actors * steps_per_actor");
  require(learning_rate > 0.0 && max_grad_norm > 0.0, "PpoConfig: learning rate and gradient norm must be positive");
  require(sigma.size() > 0 && (sigma.array() > 0.0).all(), "PpoConfig: sigma must be positive");
  for (int h : critic_hidden) require(h > 0, "PpoConfig: critic widths must be positive");
}

// ---------------------------------------------------------------------------
// Gaussian head

double gaussian_log_prob(const Vec& a, const Vec& mean, const Vec& sigma) {
  require(a.size() == mean.size() && a.size() == sigma.size(), "gaussian_log_prob: size mismatch");
  double lp = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double z = (a[i] - mean[i]) / sigma[i];
    lp += -0.5 * z * z - std::log(sigma[i] * std::sqrt(2.0 * std::numbers::pi));
  }
  return lp;
}

double gaussian_entropy(const Vec& sigma) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i)
    h += 0.5 + std::log(sigma[i] * std::sqrt(2.0 * std::numbers::pi));
  return h;
}

ActResult act(ocp::EnmpcController& controller, const env::Observation& obs, std::span<const double> prices,
              const Vec& sigma, Rng& rng, const Vec& previous_action) {
  require(obs.x_obs_scaled.allFinite() && std::isfinite(obs.storage), "act: observation is not finite");
  ActResult r;
  r.step = controller.act(obs.x_obs_scaled, obs.storage, prices);
  if (!r.step.ok) {
    r.mean = previous_action;
    r.raw = previous_action;
    r.action = previous_action.cwiseMax(-1.0).cwiseMin(1.0);
    r.differentiable = false;
    return r;
  }
  r.mean = r.step.u_scaled;
  require_size(sigma.size(), r.mean.size(), "act: sigma");
  r.raw = r.mean;
  const bool stochastic = (sigma.array() > 0.0).all();
  if (stochastic) {
    std::normal_distribution<double> n01(0.0, 1.0);
    for (Eigen::Index i = 0; i < r.raw.size(); ++i) r.raw[i] += sigma[i] * n01(rng);
    r.log_prob = gaussian_log_prob(r.raw, r.mean, sigma);
  }
  r.action = r.raw.cwiseMax(-1.0).cwiseMin(1.0);
  r.differentiable = stochastic;
  return r;
}

// ---------------------------------------------------------------------------
// Critic

Critic Critic::create(int n_obs, int forecast_hours, const std::vector<int>& hidden, double storage_mid,
                      double storage_half, double price_mean, double price_sd, Rng& rng) {
  require(n_obs > 0 && forecast_hours >= 0, "Critic: bad feature sizes");
  require(storage_half > 0.0 && price_sd > 0.0, "Critic: scales must be positive");
  const int n = n_obs + 1 + forecast_hours;
  std::vector<int> widths{n};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(1);
  Critic c;
  c.net = Mlp(widths);
  c.net.init_uniform(rng);
  // Small output layer so initial values stay near zero.
  c.net.weights.back() *= 0.01;
  c.net.biases.back().setZero();
  c.feature_offset = Vec::Zero(n);
  c.feature_scale = Vec::Ones(n);
  c.feature_offset[n_obs] = storage_mid;
  c.feature_scale[n_obs] = storage_half;
  c.feature_offset.tail(forecast_hours).setConstant(price_mean);
  c.feature_scale.tail(forecast_hours).setConstant(price_sd);
  return c;
}

Vec Critic::features(const env::Observation& obs) const {
  const Vec f = obs.flat(false);
  require_size(f.size(), feature_offset.size(), "Critic::features");
  return f;
}

double Critic::value_of_features(const Vec& f) const {
  const Vec x = ((f - feature_offset).array() / feature_scale.array()).matrix();
  return net.forward(x)[0];
}

double Critic::value(const env::Observation& obs) const { return value_of_features(features(obs)); }

Vec Critic::flatten() const {
  Vec p(static_cast<Eigen::Index>(param_count()));
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    const Mat& W = net.weights[l];
    for (Eigen::Index r = 0; r < W.rows(); ++r)
      for (Eigen::Index c = 0; c < W.cols(); ++c) p[k++] = W(r, c);
    for (Eigen::Index r = 0; r < net.biases[l].size(); ++r) p[k++] = net.biases[l][r];
  }
  return p;
}

void Critic::assign(const Vec& p) {
  require_size(p.size(), static_cast<Eigen::Index>(param_count()), "Critic::assign");
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    Mat& W = net.weights[l];
    for (Eigen::Index r = 0; r < W.rows(); ++r)
      for (Eigen::Index c = 0; c < W.cols(); ++c) W(r, c) = p[k++];
    for (Eigen::Index r = 0; r < net.biases[l].size(); ++r) net.biases[l][r] = p[k++];
  }
}

void Critic::validate() const {
  require(net.layer_count() >= 1 && net.output_size() == 1, "Critic: network must end in one output");
  require(feature_offset.size() == net.input_size() && feature_scale.size() == net.input_size(),
          "Critic: feature normalisation width");
  require((feature_scale.array() > 0.0).all(), "Critic: feature scales must be positive");
  require(flatten().allFinite(), "Critic: non-finite parameters");
}

nlohmann::json to_json(const Critic& c) {
  c.validate();
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < c.net.weights.size(); ++l) {
    const Mat& W = c.net.weights[l];
    std::vector<double> w;
    for (Eigen::Index r = 0; r < W.rows(); ++r)
      for (Eigen::Index k = 0; k < W.cols(); ++k) w.push_back(W(r, k));
    layers.push_back({{"rows", W.rows()}, {"cols", W.cols()}, {"weight", w}, {"bias", vec_to_json(c.net.biases[l])}});
  }
  return {{"layers", layers}, {"feature_offset", vec_to_json(c.feature_offset)},
          {"feature_scale", vec_to_json(c.feature_scale)}};
}

Critic critic_from_json(const nlohmann::json& j) {
  Critic c;
  for (const auto& layer : j.at("layers")) {
    const int rows = layer.at("rows").get<int>();
    const int cols = layer.at("cols").get<int>();
    const auto w = layer.at("weight").get<std::vector<double>>();
    require(rows > 0 && cols > 0 && w.size() == static_cast<std::size_t>(rows) * cols, "critic: bad layer shape");
    Mat W(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int k = 0; k < cols; ++k) W(r, k) = w[static_cast<std::size_t>(r) * cols + k];
    c.net.weights.push_back(W);
    c.net.biases.push_back(vec_from_json(layer.at("bias")));
    require(c.net.biases.back().size() == rows, "critic: bias width");
  }
  c.feature_offset = vec_from_json(j.at("feature_offset"));
  c.feature_scale = vec_from_json(j.at("feature_scale"));
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Advantages

GaeResult gae(std::span<const double> rewards, std::span<const double> values, std::span<const char> dones,
              double bootstrap, double gamma, double lambda) {
  require(rewards.size() == values.size() && rewards.size() == dones.size(), "gae: length mismatch");
  const std::size_t n = rewards.size();
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_value = bootstrap;
  double next_adv = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const double live = dones[k] ? 0.0 : 1.0;
    const double delta = rewards[k] + gamma * next_value * live - values[k];
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages[k] = next_adv;
    out.returns[k] = next_adv + values[k];
    next_value = values[k];
  }
  return out;
}

void normalize(std::vector<double>& x) {
  if (x.empty()) return;
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  for (double& v : x) v = sd > 0.0 ? (v - mean) / sd : 0.0;
}

std::size_t RolloutBuffer::size() const {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.size();
  return n;
}

void RolloutBuffer::validate() const {
  require(segments.size() == bootstrap.size(), "RolloutBuffer: one bootstrap value per segment");
  for (const auto& seg : segments)
    for (const Sample& s : seg) {
      require(std::isfinite(s.reward) && std::isfinite(s.value), "RolloutBuffer: non-finite reward or value");
      require(!s.differentiable || (s.solution != nullptr && std::isfinite(s.log_prob)),
              "RolloutBuffer: differentiable sample without solution");
    }
}

void RolloutBuffer::clear() {
  segments.clear();
  bootstrap.clear();
}

GaeResult RolloutBuffer::advantages(double gamma, double lambda) const {
  validate();
  GaeResult all;
  for (std::size_t j = 0; j < segments.size(); ++j) {
    std::vector<double> r, v;
    std::vector<char> d;
    for (const Sample& s : segments[j]) {
      r.push_back(s.reward);
      v.push_back(s.value);
      d.push_back(s.done ? 1 : 0);
    }
    GaeResult g = gae(r, v, d, bootstrap[j], gamma, lambda);
    all.advantages.insert(all.advantages.end(), g.advantages.begin(), g.advantages.end());
    all.returns.insert(all.returns.end(), g.returns.begin(), g.returns.end());
  }
  return all;
}

// ---------------------------------------------------------------------------
// Losses

SurrogateTerms clipped_surrogate(std::span<const double> log_prob_new, std::span<const double> log_prob_old,
                                 std::span<const double> advantages, double clip_eps) {
  require(log_prob_new.size() == log_prob_old.size() && log_prob_new.size() == advantages.size(),
          "clipped_surrogate: length mismatch");
  SurrogateTerms t;
  const std::size_t n = log_prob_new.size();
  t.d_log_prob.assign(n, 0.0);
  if (n == 0) return t;
  const double inv = 1.0 / static_cast<double>(n);
  int clipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double rho = std::exp(log_prob_new[i] - log_prob_old[i]);
    const double A = advantages[i];
    const double unclipped = rho * A;
    const double clipped_val = std::clamp(rho, 1.0 - clip_eps, 1.0 + clip_eps) * A;
    if (unclipped <= clipped_val) {
      t.loss -= unclipped * inv;
      t.d_log_prob[i] = -unclipped * inv;  // d(rho)/d(log_prob) = rho
    } else {
      t.loss -= clipped_val * inv;
      ++clipped;
    }
    t.approx_kl += (log_prob_old[i] - log_prob_new[i]) * inv;
  }
  t.clip_fraction = clipped * inv;
  return t;
}

double value_loss(const Critic& critic, const Mat& features, std::span<const double> targets, double value_coeff,
                  Vec* grad) {
  require(features.cols() == static_cast<Eigen::Index>(targets.size()), "value_loss: batch size mismatch");
  require(features.rows() == critic.net.input_size(), "value_loss: feature width");
  const auto B = static_cast<double>(targets.size());
  if (targets.empty()) {
    if (grad) *grad = Vec::Zero(static_cast<Eigen::Index>(critic.param_count()));
    return 0.0;
  }
  const Mat X = (features.colwise() - critic.feature_offset).array().colwise() / critic.feature_scale.array();
  Mat target(1, static_cast<Eigen::Index>(targets.size()));
  for (std::size_t i = 0; i < targets.size(); ++i) target(0, static_cast<Eigen::Index>(i)) = targets[i];

  tape::Tape t(critic.flatten());
  tape::NodeId a = t.constant(X);
  std::size_t off = 0;
  for (std::size_t l = 0; l < critic.net.weights.size(); ++l) {
    const auto rows = static_cast<int>(critic.net.weights[l].rows());
    const auto cols = static_cast<int>(critic.net.weights[l].cols());
    const tape::NodeId W = t.param(off, rows, cols);
    off += static_cast<std::size_t>(rows) * cols;
    const tape::NodeId b = t.param(off, rows, 1);
    off += static_cast<std::size_t>(rows);
    a = t.add(t.matmul(W, a), b);
    if (l + 1 < critic.net.weights.size()) a = t.tanh(a);
  }
  const tape::NodeId loss = t.scale(t.sum_squares(t.sub(a, t.constant(target))), value_coeff / B);
  if (grad) {
    const std::pair<tape::NodeId, Mat> seed{loss, Mat::Ones(1, 1)};
    *grad = t.backward(std::span(&seed, 1));
  }
  return t.value(loss)(0, 0);
}

PolicyGradient policy_gradient(const koopman::Model& model15, std::span<const Sample* const> samples,
                               std::span<const double> advantages, const PolicyContext& ctx, double clip_eps) {
  require(samples.size() == advantages.size(), "policy_gradient: length mismatch");
  PolicyGradient out;
  out.grad = Vec::Zero(koopman::flatten(model15).size());
  ocp::QpWorkspace ws;

  struct Solved {
    std::size_t index;
    ocp::BuiltOcp built;
    ocp::QpSolution sol;
    Vec mean;
  };
  std::vector<Solved> solved;
  std::vector<double> lp_new, lp_old, adv;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = *samples[i];
    require(s.differentiable, "policy_gradient: non-differentiable sample");
    ocp::BuiltOcp built = ocp::build_ocp(model15, s.x_obs_scaled, s.storage, s.prices, ctx.ocp,
                                         ocp::ConstraintMode::SlackPenalty);
    ocp::QpSolution sol;
    bool have = false;
    if (s.solution && s.solution->x.size() == built.qp.num_vars()) {
      const ocp::WarmStart w{s.solution->x, s.solution->nu, s.solution->lam, s.solution->s};
      sol = ocp::solve_qp(built.qp, ctx.qp, &ws, &w);
      have = sol.ok();
    }
    if (!have) sol = ocp::solve_qp(built.qp, ctx.qp, &ws, nullptr);
    if (!sol.ok()) {
      ++out.skipped;
      continue;
    }
    Vec mean = ocp::first_input(built, sol);
    lp_new.push_back(gaussian_log_prob(s.action, mean, ctx.sigma));
    lp_old.push_back(s.log_prob);
    adv.push_back(advantages[i]);
    solved.push_back({i, std::move(built), std::move(sol), std::move(mean)});
  }
  const SurrogateTerms terms = clipped_surrogate(lp_new, lp_old, adv, clip_eps);
  out.loss = terms.loss;
  out.clip_fraction = terms.clip_fraction;
  out.approx_kl = terms.approx_kl;
  out.log_prob_new = lp_new;
  const Vec inv_var = ctx.sigma.array().square().inverse();
  for (std::size_t k = 0; k < solved.size(); ++k) {
    if (terms.d_log_prob[k] == 0.0) continue;
    const Sample& s = *samples[solved[k].index];
    // d log N(a; mu, sigma) / d mu = (a - mu) / sigma^2
    const Vec dl_dmu = terms.d_log_prob[k] * ((s.action - solved[k].mean).array() * inv_var.array()).matrix();
    const ocp::OcpGradient g = ocp::grad_ocp(model15, s.x_obs_scaled, solved[k].built, solved[k].sol, dl_dmu, &ws);
    if (g.ill_conditioned) ++out.ill_conditioned;
    out.grad += g.d_theta;
  }
  return out;
}

UpdateStats ppo_update(koopman::Model& model15, Critic& critic, Adam& adam, const RolloutBuffer& buffer,
                       const PpoConfig& config, const PolicyContext& ctx, Rng& rng) {
  config.validate();
  require(buffer.size() == static_cast<std::size_t>(config.batch_size()),
          "ppo_update: buffer must hold n_actors * steps_per_actor samples");
  const GaeResult g = buffer.advantages(config.gamma, config.gae_lambda);
  std::vector<const Sample*> all;
  for (const auto& seg : buffer.segments)
    for (const Sample& s : seg) all.push_back(&s);
  std::vector<double> adv = g.advantages;
  if (config.normalize_advantages) normalize(adv);

  const Vec theta0 = koopman::flatten(model15).values();
  const Vec critic0 = critic.flatten();
  const Adam adam0 = adam;
  const Eigen::Index n_model = theta0.size();
  Vec joint(n_model + critic0.size());
  joint << theta0, critic0;
  if (adam.m.size() != joint.size()) adam = Adam(static_cast<std::size_t>(joint.size()), config.learning_rate);

  UpdateStats st;
  st.entropy = gaussian_entropy(ctx.sigma);
  auto abort = [&](const std::string& why) {
    koopman::assign(model15, koopman::ParamVector(theta0));
    critic.assign(critic0);
    adam = adam0;
    st.aborted = true;
    st.message = why;
    return st;
  };

  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto mb = static_cast<std::size_t>(config.minibatch);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += mb) {
      const std::size_t end = std::min(order.size(), start + mb);
      std::vector<const Sample*> pol;
      std::vector<double> pol_adv;
      Mat feats(critic.net.input_size(), static_cast<Eigen::Index>(end - start));
      std::vector<double> targets;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        feats.col(static_cast<Eigen::Index>(k - start)) = all[i]->features;
        targets.push_back(g.returns[i]);
        if (all[i]->differentiable) {
          pol.push_back(all[i]);
          pol_adv.push_back(adv[i]);
        }
      }
      const PolicyGradient pg = policy_gradient(model15, pol, pol_adv, ctx, config.clip_eps);
      Vec vgrad;
      const double vl = value_loss(critic, feats, targets, config.value_coeff, &vgrad);
      const double loss = pg.loss + vl - config.entropy_coeff * st.entropy;
      Vec grad(joint.size());
      grad << pg.grad, vgrad;
      if (!std::isfinite(loss) || !grad.allFinite()) {
        std::ostringstream msg;
        msg << "non-finite loss or gradient at epoch " << epoch << ", minibatch " << start / mb;
        return abort(msg.str());
      }
      st.grad_norm += clip_grad_norm(grad, config.max_grad_norm);
      adam.step(joint, grad);
      koopman::assign(model15, koopman::ParamVector(Vec(joint.head(n_model))));
      critic.assign(joint.tail(critic0.size()));
      st.policy_loss += pg.loss;
      st.value_loss += vl;
      st.clip_fraction += pg.clip_fraction;
      st.approx_kl += pg.approx_kl;
      st.skipped += pg.skipped;
      st.ill_conditioned += pg.ill_conditioned;
      ++st.minibatches;
    }
  }
  if (!joint.allFinite()) return abort("non-finite parameters after update");
  const double n = std::max(1, st.minibatches);
  st.policy_loss /= n;
  st.value_loss /= n;
  st.clip_fraction /= n;
  st.approx_kl /= n;
  st.grad_norm /= n;
  return st;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

struct EpisodeAccumulator {
  EvalResult r;
  double reward_sum = 0.0;
  int violations = 0;
  std::vector<double> solve_times;

  void record(const env::Env& e, const Vec& x_before, const env::StepResult& s) {
    const env::StepInfo& info = s.info;
    env::TrajectoryRow row;
    row.t = r.steps;
    row.u = info.u_applied;
    row.x_obs = x_before;
    row.storage = info.storage_before;
    row.y = info.y;
    row.price = info.price;
    row.reward = s.reward;
    row.violations = info.violations;
    r.rows.push_back(std::move(row));
    const double identity = e.storage() - (info.storage_before + info.storage_delta + info.storage_correction);
    r.storage_identity_error = std::max(r.storage_identity_error, std::abs(identity));
    r.total_cost += info.cost;
    r.steady_cost += info.steady_cost;
    reward_sum += s.reward;
    violations += info.any_violation ? 1 : 0;
    ++r.steps;
  }

  EvalResult finish() {
    if (r.steps > 0) {
      r.average_reward = reward_sum / r.steps;
      r.violation_fraction = static_cast<double>(violations) / r.steps;
    }
    r.savings_fraction = r.steady_cost != 0.0 ? (r.steady_cost - r.total_cost) / r.steady_cost : 0.0;
    if (!solve_times.empty()) {
      r.solve_min = *std::min_element(solve_times.begin(), solve_times.end());
      r.solve_max = *std::max_element(solve_times.begin(), solve_times.end());
      r.solve_mean = std::accumulate(solve_times.begin(), solve_times.end(), 0.0) /
                     static_cast<double>(solve_times.size());
    }
    return r;
  }
};

}  // namespace

EvalResult evaluate(const koopman::Model& model15, const ocp::OcpConfig& ocp_config, ocp::ConstraintMode mode,
                    env::Env& environment, std::size_t offset, int steps) {
  require(steps >= 1 && steps <= environment.config().episode_steps, "evaluate: steps outside the episode length");
  ocp::EnmpcController ctl(model15, ocp_config, mode);
  env::Observation obs = environment.reset_at(offset);
  EpisodeAccumulator acc;
  Vec last = Vec::Zero(environment.config().inputs.size());
  for (int k = 0; k < steps; ++k) {
    const ocp::PolicyStep p = ctl.act(obs.x_obs_scaled, obs.storage, environment.step_prices(ocp_config.horizon));
    acc.solve_times.push_back(p.solve_seconds);
    if (p.ok)
      last = p.u_scaled;
    else
      ++acc.r.ocp_failures;
    const Vec x_before = environment.plant().observe();
    const env::StepResult s = environment.step(last);
    acc.record(environment, x_before, s);
    obs = s.observation;
    if (s.done) break;
  }
  return acc.finish();
}

EvalResult evaluate_constant(const Vec& u_scaled, env::Env& environment, std::size_t offset, int steps) {
  require(steps >= 1 && steps <= environment.config().episode_steps,
          "evaluate_constant: steps outside the episode length");
  environment.reset_at(offset);
  EpisodeAccumulator acc;
  for (int k = 0; k < steps; ++k) {
    const Vec x_before = environment.plant().observe();
    const env::StepResult s = environment.step(u_scaled);
    acc.record(environment, x_before, s);
    if (s.done) break;
  }
  return acc.finish();
}

// ---------------------------------------------------------------------------
// Learning curve and checkpoints

void write_learning_curve(const std::string& path, std::span<const CurvePoint> curve,
                          const std::string& config_hash) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write learning curve " + path);
  if (!config_hash.empty()) f << "# config_hash " << config_hash << "\n";
  f << "update,env_steps,eval_reward,violation_fraction,cost_savings_fraction\n";
  for (const CurvePoint& p : curve)
    f << p.update << ',' << p.env_steps << ',' << format_double(p.eval_reward) << ','
      << format_double(p.violation_fraction) << ',' << format_double(p.savings_fraction) << '\n';
}

std::vector<CurvePoint> read_learning_curve(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open learning curve " + path);
  std::vector<CurvePoint> out;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "update,env_steps,eval_reward,violation_fraction,cost_savings_fraction")
        throw ParseError("unexpected learning-curve header", lineno);
      header = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw ParseError("expected 5 columns", lineno);
    CurvePoint p;
    double u = 0, s = 0;
    if (!parse_double(cells[0], u) || !parse_double(cells[1], s) || !parse_double(cells[2], p.eval_reward) ||
        !parse_double(cells[3], p.violation_fraction) || !parse_double(cells[4], p.savings_fraction))
      throw ParseError("bad number", lineno);
    p.update = static_cast<int>(u);
    p.env_steps = static_cast<std::size_t>(s);
    out.push_back(p);
  }
  if (!header) throw ParseError("missing header", lineno + 1);
  return out;
}

std::string rng_state(const Rng& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream s(state);
  s >> rng;
  if (!s) throw ContractViolation("malformed RNG state");
  return rng;
}

nlohmann::json to_json(const Checkpoint& c) {
  nlohmann::json curve = nlohmann::json::array();
  for (const CurvePoint& p : c.curve)
    curve.push_back({p.update, p.env_steps, p.eval_reward, p.violation_fraction, p.savings_fraction});
  return {{"format", "kenmpc-ppo-checkpoint"},
          {"version", c.version},
          {"update", c.update},
          {"env_steps", c.env_steps},
          {"model", koopman::to_json(c.model)},
          {"critic", to_json(c.critic)},
          {"adam",
           {{"learning_rate", c.adam.learning_rate},
            {"beta1", c.adam.beta1},
            {"beta2", c.adam.beta2},
            {"eps", c.adam.eps},
            {"steps", c.adam.steps},
            {"m", vec_to_json(c.adam.m)},
            {"v", vec_to_json(c.adam.v)}}},
          {"rng_states", c.rng_states},
          {"best_model", koopman::to_json(c.best_model)},
          {"best_reward", c.best_reward},
          {"best_update", c.best_update},
          {"curve", curve}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "kenmpc-ppo-checkpoint")
    throw ContractViolation("not a PPO checkpoint");
  Checkpoint c;
  c.version = j.at("version").get<int>();
  if (c.version != Checkpoint::kVersion)
    throw ContractViolation("unsupported checkpoint version " + std::to_string(c.version));
  c.update = j.at("update").get<int>();
  c.env_steps = j.at("env_steps").get<std::size_t>();
  c.model = koopman::model_from_json(j.at("model"));
  c.critic = critic_from_json(j.at("critic"));
  const auto& a = j.at("adam");
  c.adam.learning_rate = a.at("learning_rate").get<double>();
  c.adam.beta1 = a.at("beta1").get<double>();
  c.adam.beta2 = a.at("beta2").get<double>();
  c.adam.eps = a.at("eps").get<double>();
  c.adam.steps = a.at("steps").get<std::int64_t>();
  c.adam.m = vec_from_json(a.at("m"));
  c.adam.v = vec_from_json(a.at("v"));
  c.rng_states = j.at("rng_states").get<std::vector<std::string>>();
  for (const auto& s : c.rng_states) rng_from_state(s);
  c.best_model = koopman::model_from_json(j.at("best_model"));
  c.best_reward = j.at("best_reward").get<double>();
  c.best_update = j.at("best_update").get<int>();
  for (const auto& p : j.at("curve")) {
    CurvePoint q;
    q.update = p.at(0).get<int>();
    q.env_steps = p.at(1).get<std::size_t>();
    q.eval_reward = p.at(2).get<double>();
    q.violation_fraction = p.at(3).get<double>();
    q.savings_fraction = p.at(4).get<double>();
    c.curve.push_back(q);
  }
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::string& path, const std::string& config_hash) {
  nlohmann::json j = to_json(c);
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  f << j.dump();
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ContractViolation("checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(const env::Env& train_env, const env::Env& eval_env, const koopman::Model& initial_model15,
                  const TrainSetup& setup) {
  const PpoConfig& cfg = setup.ppo;
  cfg.validate();
  setup.ocp.validate();
  initial_model15.validate();
  require(setup.eval_every >= 1, "train: eval_every must be >= 1");
  require(cfg.sigma.size() == train_env.config().inputs.size(), "train: sigma width must match the inputs");
  require(std::abs(initial_model15.dt_minutes - setup.ocp.dt_minutes) < 1e-9,
          "train: model step must equal the control step");

  Rng update_rng(setup.seed);
  std::vector<Rng> actor_rng;
  for (int a = 0; a < cfg.n_actors; ++a)
    actor_rng.emplace_back(setup.seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL * static_cast<std::uint64_t>(a + 1));

  const auto& ec = train_env.config();
  const auto& prices = train_env.prices();
  Critic critic = Critic::create(train_env.plant().n_obs(), ec.forecast_hours, cfg.critic_hidden,
                                 ec.storage_midpoint(), 0.5 * (ec.storage_upper - ec.storage_lower), prices.mean(),
                                 std::max(std::sqrt(prices.variance()), 1e-6), update_rng);
  koopman::Model model = initial_model15;
  Adam adam(static_cast<std::size_t>(koopman::flatten(model).size()) + critic.param_count(), cfg.learning_rate);
  const PolicyContext ctx{setup.ocp, setup.qp, cfg.sigma};

  TrainResult out;
  auto evaluate_now = [&](int update, std::size_t steps) {
    env::Env e(eval_env);
    const EvalResult r = evaluate(model, setup.ocp, ocp::ConstraintMode::SlackPenalty, e, setup.eval_offset,
                                  setup.eval_steps);
    out.curve.push_back({update, steps, r.average_reward, r.violation_fraction, r.savings_fraction});
    if (out.curve.size() == 1 || r.average_reward > out.best_reward) {
      out.best_reward = r.average_reward;
      out.best_update = update;
      out.best_model = model;
    }
  };
  evaluate_now(0, 0);

  const auto batch = static_cast<std::size_t>(cfg.batch_size());
  const std::size_t rounds = setup.total_steps < batch ? 0 : (setup.total_steps + batch - 1) / batch;

  std::vector<env::Env> envs;
  std::vector<std::unique_ptr<ocp::EnmpcController>> ctls;
  std::vector<env::Observation> obs;
  std::vector<Vec> prev;
  for (int a = 0; a < cfg.n_actors; ++a) {
    envs.emplace_back(train_env);
    ctls.push_back(std::make_unique<ocp::EnmpcController>(model, setup.ocp, ocp::ConstraintMode::SlackPenalty,
                                                          setup.qp));
    obs.push_back(envs.back().reset(actor_rng[static_cast<std::size_t>(a)]()));
    prev.push_back(Vec::Zero(ec.inputs.size()));
  }

  std::size_t env_steps = 0;
  for (std::size_t round = 1; round <= rounds; ++round) {
    RolloutBuffer buffer;
    for (int a = 0; a < cfg.n_actors; ++a) {
      const auto ai = static_cast<std::size_t>(a);
      env::Env& e = envs[ai];
      std::vector<Sample> seg;
      seg.reserve(static_cast<std::size_t>(cfg.steps_per_actor));
      for (int k = 0; k < cfg.steps_per_actor; ++k) {
        Sample s;
        s.x_obs_scaled = obs[ai].x_obs_scaled;
        s.storage = obs[ai].storage;
        s.prices = e.step_prices(setup.ocp.horizon);
        s.features = critic.features(obs[ai]);
        s.value = critic.value_of_features(s.features);
        const ActResult r = act(*ctls[ai], obs[ai], s.prices, cfg.sigma, actor_rng[ai], prev[ai]);
        s.action = r.raw;
        s.log_prob = r.log_prob;
        s.differentiable = r.differentiable;
        if (r.differentiable) s.solution = r.step.solution;
        const env::StepResult st = e.step(r.action);
        s.reward = st.reward;
        s.done = st.done;
        prev[ai] = r.action;
        obs[ai] = st.observation;
        if (st.done) {
          obs[ai] = e.reset(actor_rng[ai]());
          ctls[ai]->reset();
          prev[ai].setZero();
        }
        seg.push_back(std::move(s));
      }
      buffer.bootstrap.push_back(critic.value(obs[ai]));
      buffer.segments.push_back(std::move(seg));
    }
    env_steps += batch;

    UpdateStats st = ppo_update(model, critic, adam, buffer, cfg, ctx, update_rng);
    out.updates.push_back(st);
    for (auto& c : ctls) c->set_model(model);

    const int update = static_cast<int>(round);
    if (round % static_cast<std::size_t>(setup.eval_every) == 0 || round == rounds) evaluate_now(update, env_steps);

    Checkpoint& cp = out.last;
    cp.update = update;
    cp.env_steps = env_steps;
    cp.model = model;
    cp.critic = critic;
    cp.adam = adam;
    cp.rng_states.clear();
    cp.rng_states.push_back(rng_state(update_rng));
    for (const Rng& r : actor_rng) cp.rng_states.push_back(rng_state(r));
    cp.best_model = out.best_model;
    cp.best_reward = out.best_reward;
    cp.best_update = out.best_update;
    cp.curve = out.curve;
    if (setup.on_round) setup.on_round(cp);
  }
  if (rounds == 0) {
    out.last.model = model;
    out.last.critic = critic;
    out.last.adam = adam;
    out.last.best_model = out.best_model;
    out.last.best_reward = out.best_reward;
    out.last.curve = out.curve;
    out.last.rng_states.push_back(rng_state(update_rng));
    for (const Rng& r : actor_rng) out.last.rng_states.push_back(rng_state(r));
  }
  out.critic = critic;
  return out;
}

}  // namespace kenmpc::rl
