#pragma once

// Identification of Koopman models from plant data: random actuation, multi-step
// least-squares fitting through the tape, and the iterative loop that extends the
// data set with closed-loop eNMPC rollouts.

#include "kenmpc/common.hpp"
#include "kenmpc/envsim.hpp"
#include "kenmpc/koopman.hpp"
#include "kenmpc/ocp.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace kenmpc::sysid {

enum class Source { Random, EnmpcRollout };
std::string to_string(Source s);
Source source_from_string(const std::string& s);

/// Samples at a fixed cadence, physical units. Sample k holds x_k, u_k and
/// y_k = h(x_k, u_k); x_{k+1} is the next sample's state.
struct Trajectory {
  Source source = Source::Random;
  std::vector<Vec> x_obs;
  std::vector<Vec> u;
  std::vector<Vec> y;

  std::size_t size() const { return x_obs.size(); }
  void push(const Vec& x, const Vec& u_k, const Vec& y_k);
};

struct SIDataset {
  double dt_minutes = 5.0;
  std::vector<Trajectory> trajectories;

  std::size_t total_samples() const;
  /// Appends; earlier data is never modified.
  void append(const SIDataset& more);
  /// Equal sample lengths within each trajectory, consistent widths, finite entries.
  void validate() const;
};

void save_dataset(const SIDataset& data, const std::string& path, const std::string& config_hash = "");
SIDataset load_dataset(const std::string& path);
std::string format_dataset(const SIDataset& data, const std::string& config_hash = "");
SIDataset parse_dataset(const std::string& text);

/// Affine maps to the scaled variables the model works in.
struct DataScaling {
  Scaling observations;
  Scaling inputs;
  Scaling outputs;

  /// Defaults matching the surrogate plant and the OCP.
  static DataScaling surrogate();
  /// Identity maps (physical = scaled) of the given widths.
  static DataScaling identity(int n_obs, int n_input, int n_output);
};

/// Piecewise-constant inputs drawn uniformly from the box, redrawn every
/// `hold_minutes`, recorded every `record_minutes`. Starts from plant.reset().
/// An integrator failure truncates the trajectory (kept).
Trajectory sample_random(env::PlantModel& plant, const Scaling& input_box, int n_samples, std::uint64_t seed,
                         double hold_minutes = 30.0, double record_minutes = 5.0);

struct FitConfig {
  int horizon = 12;
  double learning_rate = 1e-3;
  int epochs = 300;
  int batch_size = 128;
  double validation_fraction = 0.2;
  /// Stop after this many epochs without validation improvement.
  int patience = 30;
  bool shuffle = true;
  void validate() const;
};

struct FitResult {
  koopman::Model model;  ///< best-validation snapshot
  double validation_loss = 0.0;
  double train_loss = 0.0;  ///< last epoch mean
  int epochs_run = 0;
  int best_epoch = 0;
  std::vector<double> validation_history;
};

/// Multi-step window starting at sample `start` of trajectory `traj`.
struct Window {
  std::size_t traj = 0;
  std::size_t start = 0;
};
std::vector<Window> make_windows(const SIDataset& data, int horizon);

/// Mean over windows of sum_{h=1..H} (|x_hat_{t+h} - x_{t+h}|^2 + |y_hat_{t+h-1} - y_{t+h-1}|^2) / H,
/// on scaled variables (x restricted to the n_pred predicted channels).
double window_loss(const koopman::Model& model, const SIDataset& data, const DataScaling& scaling,
                   std::span<const Window> windows, int horizon);

/// Adam on the multi-step loss with early stopping. `init` seeds the
/// parameters (random initialisation otherwise). Throws std::runtime_error
/// when the loss becomes non-finite.
FitResult fit_koopman(const SIDataset& data, const koopman::Dims& dims, const DataScaling& scaling,
                      const FitConfig& config, std::uint64_t seed, const koopman::Model* init = nullptr);

/// Largest open-loop prediction error (scaled, predicted channels and
/// outputs) over all windows of `horizon` steps.
double open_loop_error(const koopman::Model& model, const SIDataset& data, const DataScaling& scaling,
                       int horizon);

/// Tracks "no improvement of the best value for `patience` consecutive iterations".
class PlateauCounter {
public:
  explicit PlateauCounter(int patience) : patience_(patience) {}
  /// Records one value; returns true when the loop should stop.
  bool update(double value);
  int best_index() const { return best_index_; }
  double best_value() const { return best_; }
  int count() const { return n_; }

private:
  int patience_;
  int n_ = 0;
  int best_index_ = -1;
  int since_best_ = 0;
  double best_ = 0.0;
};

struct SIConfig {
  FitConfig fit;
  /// Random-actuation samples before the first fit (record cadence).
  int random_samples = 8640;
  double hold_minutes = 30.0;
  /// Closed-loop control steps per iteration.
  int rollout_steps = 576;
  int max_iterations = 30;
  int patience = 5;
  ocp::OcpConfig ocp;
  ocp::ConstraintMode mode = ocp::ConstraintMode::Hard;
  /// Chaining factor from the fitted step to the control step.
  int upscale = 3;
  void validate() const;
};

struct SIIteration {
  int iteration = 0;
  double average_reward = 0.0;
  double violation_fraction = 0.0;
  double validation_loss = 0.0;
  std::size_t dataset_samples = 0;
  int ocp_failures = 0;
  bool fit_failed = false;
};

struct SIResult {
  koopman::Model model;  ///< fitted-step model of the best iteration
  int best_iteration = 0;
  double best_reward = 0.0;
  std::vector<SIIteration> history;
  std::vector<koopman::Model> models;  ///< one per iteration (fitted step)
  SIDataset dataset;
};

/// Closed-loop rollout of an eNMPC controller on `environment` for `steps`
/// control steps (episodes restart on done). Records substep data.
struct RolloutSummary {
  double average_reward = 0.0;
  double violation_fraction = 0.0;
  int ocp_failures = 0;
  std::vector<Trajectory> data;  ///< one contiguous record per episode segment
};
RolloutSummary controller_rollout(env::Env& environment, ocp::EnmpcController& controller, int steps,
                                  std::uint64_t seed);

SIResult iterative_si(const env::Env& environment, const koopman::Dims& dims, const DataScaling& scaling,
                      const SIConfig& config, std::uint64_t seed);

}  // namespace kenmpc::sysid
