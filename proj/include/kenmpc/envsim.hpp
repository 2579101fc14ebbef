#pragma once

// Plant interface, desk-scale surrogate plant, electricity prices and the
// 15-minute control environment with storage balance and reward.

#include "kenmpc/common.hpp"

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kenmpc::env {

// ---------------------------------------------------------------------------
// Plant

/// Continuous-time plant with observable states and instantaneous outputs.
/// Inputs, observations and outputs are in physical units.
class PlantModel {
public:
  virtual ~PlantModel() = default;

  virtual int n_obs() const = 0;
  virtual int n_input() const = 0;
  virtual int n_output() const = 0;
  virtual std::vector<std::string> obs_names() const = 0;
  virtual std::vector<std::string> output_names() const = 0;

  /// Back to the nominal steady state.
  virtual void reset() = 0;
  virtual Vec observe() const = 0;
  /// y = h(x, u); may depend directly on u.
  virtual Vec output(const Vec& u) const = 0;
  /// Integrates with constant u; returns false (state untouched) on integrator failure.
  virtual bool advance(const Vec& u, double minutes) = 0;

  virtual Vec steady_input() const = 0;
  virtual Vec steady_output() const = 0;

  virtual Vec state() const = 0;
  virtual void set_state(const Vec& x) = 0;
  virtual std::unique_ptr<PlantModel> clone() const = 0;
};

/// Coefficients of the surrogate; states are kept in scaled units internally.
struct SurrogateParams {
  Scaling inputs{(Vec(4) << 30.0, 0.0, 0.0, 0.51).finished(),
                 (Vec(4) << 50.0, 2.0, 0.1, 0.54).finished()};
  /// I_prod [ppm], dT_rc [K], N_r [kmol], T_tray20 [K]
  Scaling states{(Vec(4) << 0.0, 2.0, 2.0, 75.0).finished(),
                 (Vec(4) << 1800.0, 5.0, 10.0, 85.0).finished()};
  double tau_impurity = 8.0;  ///< minutes
  double tau_dtrc = 20.0;
  double tau_tray = 15.0;
  double holdup_gain = 0.018;  ///< scaled units per minute at full saturation
  double holdup_leak = 0.004;
  double holdup_cubic = 0.006;
  double holdup_ss = 0.2;
  double substep_minutes = 1.0;
};

/// Four-state nonlinear stand-in for the air separation unit. Energy use and
/// production respond to the inputs instantly (feedthrough) and to the states.
class SurrogatePlant final : public PlantModel {
public:
  explicit SurrogatePlant(SurrogateParams params = {});

  int n_obs() const override { return 4; }
  int n_input() const override { return 4; }
  int n_output() const override { return 2; }
  std::vector<std::string> obs_names() const override;
  std::vector<std::string> output_names() const override;

  void reset() override;
  Vec observe() const override;
  Vec output(const Vec& u) const override;
  bool advance(const Vec& u, double minutes) override;
  Vec steady_input() const override;
  Vec steady_output() const override;
  Vec state() const override { return xi_; }
  void set_state(const Vec& x) override;
  std::unique_ptr<PlantModel> clone() const override;

  /// Right-hand side in scaled state units per minute; v is the scaled input.
  Vec rhs(const Vec& xi, const Vec& v) const;
  Vec steady_state() const { return xi_ss_; }
  const SurrogateParams& params() const { return p_; }

private:
  SurrogateParams p_;
  Vec xi_ss_;
  Vec xi_;
};

/// z+ = A z + B u observed through an invertible C_obs, outputs y = D z + E u;
/// all in scaled units (physical = scaled). Used to test identification.
class LinearLatentPlant final : public PlantModel {
public:
  /// Matrices are for one `dt_minutes` step; advance() requires multiples of it.
  LinearLatentPlant(Mat A, Mat B, Mat C_obs, Mat D, Mat E, double dt_minutes);

  int n_obs() const override { return static_cast<int>(C_.rows()); }
  int n_input() const override { return static_cast<int>(B_.cols()); }
  int n_output() const override { return static_cast<int>(D_.rows()); }
  std::vector<std::string> obs_names() const override;
  std::vector<std::string> output_names() const override;

  void reset() override { z_.setZero(); }
  Vec observe() const override { return C_ * z_; }
  Vec output(const Vec& u) const override { return D_ * z_ + E_ * u; }
  bool advance(const Vec& u, double minutes) override;
  Vec steady_input() const override { return Vec::Zero(B_.cols()); }
  Vec steady_output() const override { return Vec::Zero(D_.rows()); }
  Vec state() const override { return z_; }
  void set_state(const Vec& x) override;
  std::unique_ptr<PlantModel> clone() const override;

private:
  Mat A_, B_, C_, D_, E_;
  double dt_;
  Vec z_;
};

// ---------------------------------------------------------------------------
// Prices

using TimePoint = std::chrono::sys_seconds;

/// Hourly electricity prices [EUR/MWh].
struct PriceSeries {
  TimePoint start{};
  std::vector<double> hourly;

  std::size_t size() const { return hourly.size(); }
  double mean() const;
  double variance() const;  ///< population variance
  /// `hours` entries starting at hour index `from`.
  std::vector<double> window(std::size_t from, std::size_t hours) const;
  /// Price per control step, aligned to wall-clock hours: step k of length
  /// dt_minutes starting `minute_offset` minutes after hour `from_hour`.
  std::vector<double> per_step(std::size_t from_hour, int minute_offset, int steps,
                               double dt_minutes) const;
};

/// ISO-8601 "YYYY-MM-DDTHH:MM:SS" with optional trailing Z.
TimePoint parse_timestamp(const std::string& s);
std::string format_timestamp(TimePoint t);

/// CSV with header `timestamp,price_eur_mwh`, hourly cadence. Throws ParseError.
PriceSeries load_prices(const std::string& path);
PriceSeries parse_prices(const std::string& text);
void save_prices(const PriceSeries& prices, const std::string& path, const std::string& config_hash = "");
std::string format_prices(const PriceSeries& prices, const std::string& config_hash = "");

/// Synthetic year of hourly prices: seasonal level, weekday/weekend daily
/// profiles, AR(1) noise and occasional spikes.
PriceSeries synthetic_reference(int days, std::uint64_t seed);

/// New series of `length` hours assembled from randomly drawn (noisy,
/// time-shifted) reference days, then affinely matched to the reference mean
/// and variance. Constant references give constant output.
PriceSeries gen_prices(const PriceSeries& reference, std::size_t length, std::uint64_t seed);

/// True if `candidate` equals some contiguous slice of `reference`.
bool is_reference_slice(const PriceSeries& reference, const PriceSeries& candidate, double tol = 1e-9);

// ---------------------------------------------------------------------------
// Reward

struct RewardConfig {
  double beta = 5e-5;
  /// Per constrained quantity (I_prod, dT_rc, N_r, N_s).
  Vec violation_weights = Vec::Ones(4);
  void validate() const;
};

/// beta (steady - cost) without violations, otherwise -sum_i w_i v_i.
double compute_reward(double step_cost, double steady_cost, const Vec& violations,
                      const RewardConfig& config);

// ---------------------------------------------------------------------------
// Environment

struct EnvConfig {
  double dt_minutes = 15.0;
  /// Recording cadence for identification data.
  double record_minutes = 5.0;
  int forecast_hours = 9;
  int episode_steps = 288;
  Scaling inputs{(Vec(4) << 30.0, 0.0, 0.0, 0.51).finished(),
                 (Vec(4) << 50.0, 2.0, 0.1, 0.54).finished()};
  /// Observation scaling; the first three channels are the path-constrained states.
  Scaling observations{(Vec(4) << 0.0, 2.0, 2.0, 75.0).finished(),
                       (Vec(4) << 1800.0, 5.0, 10.0, 85.0).finished()};
  double storage_lower = 0.0;
  double storage_upper = 6.0;
  double demand_rate = 1.0;  ///< storage units per hour
  /// Index of energy [kW] and production [storage units per hour] in y.
  int energy_output = 0;
  int production_output = 1;
  RewardConfig reward;

  double dt_hours() const { return dt_minutes / 60.0; }
  int substeps() const;
  double storage_midpoint() const { return 0.5 * (storage_lower + storage_upper); }
  /// Hours of price data an episode starting at hour 0 needs.
  std::size_t hours_needed() const;
  void validate() const;
};

struct Observation {
  Vec x_obs_scaled;
  double storage = 0.0;
  std::vector<double> forecast_hourly;  ///< next forecast_hours hourly prices
  std::vector<double> forecast_steps;   ///< the same window expanded to control steps

  /// Flat vector: scaled x_obs, storage, hourly forecast (or expanded).
  Vec flat(bool expanded = false) const;
};

/// Data recorded every record_minutes inside a control step.
struct SubSample {
  Vec x_obs;  ///< physical, at the start of the substep
  Vec u;      ///< physical
  Vec y;      ///< physical, h(x, u) at the start of the substep
};

struct StepInfo {
  Vec u_applied;         ///< physical input after clipping
  bool action_clipped = false;
  Vec y;                 ///< physical outputs at the start of the step
  double price = 0.0;
  double cost = 0.0;         ///< price [EUR/MWh] * energy [kWh]
  double steady_cost = 0.0;
  Vec violations;        ///< I_prod, dT_rc, N_r (scaled), N_s (unscaled)
  bool any_violation = false;
  double storage_before = 0.0;
  double storage_delta = 0.0;       ///< dt (n_product - n_demand)
  double storage_correction = 0.0;  ///< clipped - unclipped
  bool integrator_failed = false;
  std::vector<SubSample> substeps;
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

/// One row of the exported trajectory.
struct TrajectoryRow {
  int t = 0;
  Vec u;
  Vec x_obs;
  double storage = 0.0;
  Vec y;
  double price = 0.0;
  double reward = 0.0;
  Vec violations;
};

class Env {
public:
  Env(std::unique_ptr<PlantModel> plant, EnvConfig config, std::shared_ptr<const PriceSeries> prices);
  Env(const Env& other);
  Env& operator=(const Env&) = delete;

  /// Steady state, storage at its midpoint, random whole-hour price offset.
  Observation reset(std::uint64_t seed);
  /// Same with a fixed price offset (hours).
  Observation reset_at(std::size_t price_offset_hours);
  /// Applies a scaled action (clipped to [-1, 1]) for one control step.
  StepResult step(const Vec& u_scaled);

  Observation observe() const;
  /// Price per control step over `steps` steps from now.
  std::vector<double> step_prices(int steps) const;

  int t() const { return t_; }
  double storage() const { return storage_; }
  std::size_t price_offset() const { return offset_; }
  const EnvConfig& config() const { return config_; }
  const PlantModel& plant() const { return *plant_; }
  PlantModel& plant() { return *plant_; }
  const PriceSeries& prices() const { return *prices_; }
  /// Largest valid reset offset.
  std::size_t max_offset() const;

private:
  std::unique_ptr<PlantModel> plant_;
  EnvConfig config_;
  std::shared_ptr<const PriceSeries> prices_;
  Vec steady_y_;
  int t_ = 0;
  std::size_t offset_ = 0;
  double storage_ = 0.0;
};

/// Trajectory CSV: t, u(4), x_obs(4), N_s, y(2), price, reward, violation flags.
void write_trajectory_csv(const std::string& path, std::span<const TrajectoryRow> rows,
                          const std::string& config_hash = "");
std::vector<TrajectoryRow> read_trajectory_csv(const std::string& path);

}  // namespace kenmpc::env
