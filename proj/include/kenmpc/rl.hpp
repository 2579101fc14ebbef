#pragma once

// PPO fine-tuning of the Koopman eNMPC policy: Gaussian exploration around the
// OCP's first input, GAE, clipped updates whose policy gradient runs through
// the OCP layer, and best-policy selection over deterministic evaluations.

#include "kenmpc/common.hpp"
#include "kenmpc/envsim.hpp"
#include "kenmpc/koopman.hpp"
#include "kenmpc/ocp.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kenmpc::rl {

struct PpoConfig {
  double gamma = 0.98;
  double gae_lambda = 0.95;
  double clip_eps = 0.2;
  double value_coeff = 5.0;
  double entropy_coeff = 1e-3;
  int n_actors = 8;
  int steps_per_actor = 512;
  int minibatch = 256;
  int epochs = 10;
  double learning_rate = 1e-4;
  double max_grad_norm = 0.5;
  Vec sigma = Vec::Constant(4, 0.15);  ///< scaled action units
  bool normalize_advantages = true;
  std::vector<int> critic_hidden{64, 64};

  int batch_size() const { return n_actors * steps_per_actor; }
  void validate() const;
};

// ---------------------------------------------------------------------------
// Gaussian policy head

/// log N(a; mean, diag(sigma^2)).
double gaussian_log_prob(const Vec& a, const Vec& mean, const Vec& sigma);
/// Differential entropy of N(., diag(sigma^2)).
double gaussian_entropy(const Vec& sigma);

struct ActResult {
  Vec action;  ///< scaled, clipped to [-1, 1]
  Vec raw;     ///< pre-clip sample
  Vec mean;    ///< OCP u*_0 (scaled); previous action when the OCP failed
  double log_prob = 0.0;  ///< pre-clip Gaussian density of the sampled action
  bool differentiable = false;
  ocp::PolicyStep step;
};

/// Solves the OCP for `obs` and samples around its first input. sigma = 0
/// gives the deterministic policy. On OCP failure the previous action is
/// repeated and the step is flagged non-differentiable.
ActResult act(ocp::EnmpcController& controller, const env::Observation& obs, std::span<const double> prices,
              const Vec& sigma, Rng& rng, const Vec& previous_action);

// ---------------------------------------------------------------------------
// Critic

/// tanh MLP on normalised observation features, scalar output.
struct Critic {
  Mlp net;
  Vec feature_offset;
  Vec feature_scale;

  /// Features: scaled x_obs, storage, hourly forecast; normalised by
  /// (f - offset) / scale with storage and prices centred on the given values.
  static Critic create(int n_obs, int forecast_hours, const std::vector<int>& hidden, double storage_mid,
                       double storage_half, double price_mean, double price_sd, Rng& rng);

  Vec features(const env::Observation& obs) const;
  double value(const env::Observation& obs) const;
  double value_of_features(const Vec& f) const;

  std::size_t param_count() const { return net.param_count(); }
  /// Per layer: weights row-major, then biases.
  Vec flatten() const;
  void assign(const Vec& params);
  void validate() const;
};

nlohmann::json to_json(const Critic& c);
Critic critic_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Advantages

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;  ///< advantages + values
};

/// delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t, A_t = delta_t + gamma lambda (1 - done_t) A_{t+1};
/// V_T = bootstrap. done_t marks the last step of an episode.
GaeResult gae(std::span<const double> rewards, std::span<const double> values, std::span<const char> dones,
              double bootstrap, double gamma, double lambda);

/// In place: zero mean, unit (population) variance. Constant inputs become zero.
void normalize(std::vector<double>& x);

// ---------------------------------------------------------------------------
// Rollout storage

struct Sample {
  Vec x_obs_scaled;
  double storage = 0.0;
  std::vector<double> prices;  ///< per control step over the OCP horizon
  Vec features;                ///< critic input
  Vec action;  ///< pre-clip sample
  double log_prob = 0.0;
  double reward = 0.0;
  double value = 0.0;
  bool done = false;
  bool differentiable = false;
  std::shared_ptr<const ocp::QpSolution> solution;  ///< warm start for re-solves
};

/// One contiguous segment per actor plus the value of the state after it.
struct RolloutBuffer {
  std::vector<std::vector<Sample>> segments;
  std::vector<double> bootstrap;

  std::size_t size() const;
  void validate() const;
  void clear();
  /// Flattened GAE over every segment (recomputed on each call).
  GaeResult advantages(double gamma, double lambda) const;
};

// ---------------------------------------------------------------------------
// Loss pieces

struct SurrogateTerms {
  double loss = 0.0;                 ///< mean of -min(rho A, clip(rho) A)
  std::vector<double> d_log_prob;    ///< dloss / dlog_prob_new per sample
  double clip_fraction = 0.0;
  double approx_kl = 0.0;            ///< mean(log_prob_old - log_prob_new)
};
SurrogateTerms clipped_surrogate(std::span<const double> log_prob_new, std::span<const double> log_prob_old,
                                 std::span<const double> advantages, double clip_eps);

/// value_coeff * mean (V - R)^2 and its gradient w.r.t. the critic parameters.
double value_loss(const Critic& critic, const Mat& features, std::span<const double> targets, double value_coeff,
                  Vec* grad = nullptr);

/// Everything needed to (re-)evaluate the policy on stored samples.
struct PolicyContext {
  ocp::OcpConfig ocp;
  ocp::QpSettings qp;
  Vec sigma;
};

struct PolicyGradient {
  double loss = 0.0;
  Vec grad;  ///< d loss / d model parameters
  std::vector<double> log_prob_new;
  int skipped = 0;  ///< OCP failures during re-evaluation
  int ill_conditioned = 0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
};

/// Clipped policy loss over `samples` (all differentiable), with the
/// gradient chained through the OCP by implicit differentiation.
PolicyGradient policy_gradient(const koopman::Model& model15, std::span<const Sample* const> samples,
                               std::span<const double> advantages, const PolicyContext& ctx, double clip_eps);

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  double grad_norm = 0.0;  ///< mean pre-clip norm
  int minibatches = 0;
  int skipped = 0;
  int ill_conditioned = 0;
  bool aborted = false;
  std::string message;
};

/// K epochs of shuffled minibatches; `adam` runs over [model parameters;
/// critic parameters]. On a non-finite loss or gradient the parameters and
/// optimiser state are restored and `aborted` is set.
UpdateStats ppo_update(koopman::Model& model15, Critic& critic, Adam& adam, const RolloutBuffer& buffer,
                       const PpoConfig& config, const PolicyContext& ctx, Rng& rng);

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double average_reward = 0.0;
  double violation_fraction = 0.0;
  double savings_fraction = 0.0;  ///< (steady cost - cost) / steady cost
  double total_cost = 0.0;
  double steady_cost = 0.0;
  double solve_min = 0.0;
  double solve_mean = 0.0;
  double solve_max = 0.0;
  int ocp_failures = 0;
  double storage_identity_error = 0.0;  ///< max |N_s' - (N_s + delta + correction)|
  int steps = 0;
  std::vector<env::TrajectoryRow> rows;
};

/// Deterministic closed-loop episode from price offset `offset`.
EvalResult evaluate(const koopman::Model& model15, const ocp::OcpConfig& ocp_config, ocp::ConstraintMode mode,
                    env::Env& environment, std::size_t offset, int steps);

/// Same bookkeeping for a fixed scaled input (steady operation when zero).
EvalResult evaluate_constant(const Vec& u_scaled, env::Env& environment, std::size_t offset, int steps);

// ---------------------------------------------------------------------------
// Training

struct CurvePoint {
  int update = 0;
  std::size_t env_steps = 0;
  double eval_reward = 0.0;
  double violation_fraction = 0.0;
  double savings_fraction = 0.0;
};

void write_learning_curve(const std::string& path, std::span<const CurvePoint> curve,
                          const std::string& config_hash = "");
std::vector<CurvePoint> read_learning_curve(const std::string& path);

struct Checkpoint {
  static constexpr int kVersion = 1;
  int version = kVersion;
  int update = 0;
  std::size_t env_steps = 0;
  koopman::Model model;
  Critic critic;
  Adam adam;
  std::vector<std::string> rng_states;  ///< update RNG first, then one per actor
  koopman::Model best_model;
  double best_reward = 0.0;
  int best_update = 0;
  std::vector<CurvePoint> curve;
};

nlohmann::json to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const Checkpoint& c, const std::string& path, const std::string& config_hash = "");
Checkpoint load_checkpoint(const std::string& path);

std::string rng_state(const Rng& rng);
Rng rng_from_state(const std::string& s);

struct TrainSetup {
  PpoConfig ppo;
  ocp::OcpConfig ocp;
  ocp::QpSettings qp;
  std::size_t total_steps = 50000;
  /// Collection rounds between evaluations.
  int eval_every = 1;
  int eval_steps = 288;
  std::size_t eval_offset = 0;
  std::uint64_t seed = 1;
  /// Called after every round with the current checkpoint (may be empty).
  std::function<void(const Checkpoint&)> on_round;
};

struct TrainResult {
  koopman::Model best_model;
  Critic critic;
  double best_reward = 0.0;
  int best_update = 0;
  std::vector<CurvePoint> curve;
  std::vector<UpdateStats> updates;
  Checkpoint last;
};

/// `train_env` is copied once per actor; `eval_env` supplies the deterministic
/// evaluation episode. The curve starts with the evaluation of the initial model.
TrainResult train(const env::Env& train_env, const env::Env& eval_env, const koopman::Model& initial_model15,
                  const TrainSetup& setup);

}  // namespace kenmpc::rl
