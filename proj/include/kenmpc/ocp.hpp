#pragma once

// Economic optimal control problem over a Koopman model, written as a sparse
// convex QP, plus the data-assembly map that lets KKT sensitivities flow back
// to the model parameters.
//
// Everything the QP sees is in scaled units: inputs and the three predicted
// path states live in [-1, 1] via their bounds, outputs via `outputs`. The
// storage holdup N_s is kept in physical units.

#include "kenmpc/common.hpp"
#include "kenmpc/gradtape.hpp"
#include "kenmpc/koopman.hpp"
#include "kenmpc/qp.hpp"

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kenmpc::ocp {

enum class ConstraintMode { SlackPenalty, Hard };

std::string to_string(ConstraintMode m);
ConstraintMode constraint_mode_from_string(const std::string& s);

struct OcpConfig {
  int horizon = 36;
  double dt_minutes = 15.0;
  /// F_mac [mol/s], F_dr [mol/s], xi_phx [-], xi_cond [-]
  Scaling inputs{(Vec(4) << 30.0, 0.0, 0.0, 0.51).finished(),
                 (Vec(4) << 50.0, 2.0, 0.1, 0.54).finished()};
  /// I_prod [ppm], dT_rc [K], N_r [kmol]
  Scaling path{(Vec(3) << 0.0, 2.0, 2.0).finished(), (Vec(3) << 1800.0, 5.0, 10.0).finished()};
  double storage_lower = 0.0;
  double storage_upper = 6.0;
  /// Output scaling: E [kW], n_product [storage units per hour]
  Scaling outputs{(Vec(2) << 2000.0, 0.0).finished(), (Vec(2) << 5000.0, 2.0).finished()};
  double M = 1e4;
  double delta = 0.2;
  /// Product demand [storage units per hour].
  double demand_rate = 1.0;
  /// Objective units per cost unit (EUR/MWh times kWh).
  double cost_scale = 5e-5;

  double dt_hours() const { return dt_minutes / 60.0; }
  int num_constrained() const { return static_cast<int>(path.size()) + 1; }
  /// Half admissible range per constrained quantity (scaled states, then N_s).
  Vec half_ranges() const;
  /// Band centre per constrained quantity (0 for scaled states, storage midpoint for N_s).
  Vec midpoints() const;
  void validate() const;
};

/// A problem-data entry that depends on the model parameters or the encoder output.
struct DataTarget {
  enum class Kind { Aeq, Beq, Q, G };
  Kind kind;
  int row;
  int col;  ///< unused for vectors
};

/// Built problem plus the linear map from [theta_matrices; z0] to every
/// parameter-dependent data entry: data = S * [theta_matrices; z0].
struct BuiltOcp {
  QpProblem qp;
  VariableLayout eq_rows;
  VariableLayout ineq_rows;
  ConstraintMode mode = ConstraintMode::SlackPenalty;
  int n_input = 0;
  int n_constrained = 0;

  std::vector<DataTarget> targets;
  std::shared_ptr<const SparseMat> S;
  std::size_t theta_offset = 0;  ///< ParamVector index of the first linear-block entry
  int n_theta = 0;               ///< number of linear-block entries (A..E)
  Vec z0;

  /// Offset of u_0 inside the QP variables.
  int first_input_offset() const { return qp.layout.get("u").offset; }
  /// Current value of every target read from the QP data.
  Vec target_values() const;
};

/// z0 is passed explicitly so that callers holding a taped encoder output can
/// reuse it; use build_ocp below for the common case.
BuiltOcp build_ocp_from_latent(const koopman::Model& model15, const Vec& z0, double storage_now,
                               std::span<const double> price_forecast, const OcpConfig& config,
                               ConstraintMode mode);

/// x_obs_scaled is the observed plant state mapped to [-1, 1].
BuiltOcp build_ocp(const koopman::Model& model15, const Vec& x_obs_scaled, double storage_now,
                   std::span<const double> price_forecast, const OcpConfig& config,
                   ConstraintMode mode);

/// First control input (scaled) of a solution.
Vec first_input(const BuiltOcp& built, const QpSolution& sol);
/// Full input plan, one column per stage.
Mat input_plan(const BuiltOcp& built, const QpSolution& sol);

/// dL/d(target data) for a loss on u_0.
struct TargetGradient {
  Vec d_targets;
  bool ill_conditioned = false;
};
TargetGradient target_gradient(const BuiltOcp& built, const QpSolution& sol, const Vec& dl_du0,
                               QpWorkspace* workspace = nullptr);

struct OcpGradient {
  Vec d_theta;  ///< full ParamVector-sized gradient (encoder included)
  Vec d_z0;
  bool ill_conditioned = false;
};

/// Chains the KKT adjoint of the solved OCP through the data assembly and the
/// encoder to all model parameters.
OcpGradient grad_ocp(const koopman::Model& model15, const Vec& x_obs_scaled, const BuiltOcp& built,
                     const QpSolution& sol, const Vec& dl_du0, QpWorkspace* workspace = nullptr);

/// Taped OCP layer: u_0 as a node depending on the encoder (through z0) and
/// on the linear model blocks. `x_obs` must hold a single column.
tape::NodeId ocp_first_input_node(tape::Tape& t, const tape::ModelNodes& nodes, tape::NodeId x_obs,
                                  std::shared_ptr<const BuiltOcp> built,
                                  std::shared_ptr<const QpSolution> sol,
                                  bool* ill_conditioned = nullptr);

/// Degeneracy restricted to rows that can create a kink in the solution map.
/// The epigraph rows t >= 0 are implied by optimality of t (M t^2 is minimal at
/// t = 0), so an inactive penalty leaves them weakly active without effect.
bool solution_degenerate(const BuiltOcp& built, const QpSolution& sol, double tol = 1e-4);

// ---------------------------------------------------------------------------
// Penalty helpers

/// L(s) = M max(0, |s| - half_range + delta)^2
double hinge_penalty(double s, double half_range, double delta, double M);

/// Minimises the emitted epigraph rows for constraint (i, stage) at a fixed
/// slack value s: min (P_tt / 2) t^2 subject to every G row that involves t.
double epigraph_penalty(const BuiltOcp& built, int constraint, int stage, double s);

struct ObjectiveSplit {
  double economic = 0.0;  ///< linear part q'x
  double penalty = 0.0;   ///< quadratic part 1/2 x'Px
};
ObjectiveSplit split_objective(const BuiltOcp& built, const QpSolution& sol);

// ---------------------------------------------------------------------------
// Receding-horizon controller

struct PolicyStep {
  Vec u_scaled;
  std::shared_ptr<const BuiltOcp> built;
  std::shared_ptr<const QpSolution> solution;
  bool ok = false;
  bool fell_back = false;  ///< hard mode failed; slack mode used for this step
  double solve_seconds = 0.0;
  int iterations = 0;
};

class EnmpcController {
public:
  EnmpcController(koopman::Model model15, OcpConfig config, ConstraintMode mode,
                  QpSettings settings = {});

  /// Solves the OCP for the current observation; warm-starts from the previous
  /// solution shifted by one stage when `warm_start` is enabled.
  PolicyStep act(const Vec& x_obs_scaled, double storage_now, std::span<const double> prices);

  void reset();
  const koopman::Model& model() const { return model_; }
  void set_model(koopman::Model m);
  const OcpConfig& config() const { return config_; }
  ConstraintMode mode() const { return mode_; }
  bool warm_start = true;
  std::size_t fallback_count() const { return fallbacks_; }

private:
  koopman::Model model_;
  OcpConfig config_;
  ConstraintMode mode_;
  QpSettings settings_;
  QpWorkspace ws_slack_, ws_hard_;
  std::optional<WarmStart> warm_slack_, warm_hard_;
  std::size_t fallbacks_ = 0;
};

/// Shifts every multi-stage block of a solution forward by one stage (last stage repeated).
WarmStart shifted_warm_start(const BuiltOcp& built, const QpSolution& sol);

}  // namespace kenmpc::ocp
