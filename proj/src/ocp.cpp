#include "kenmpc/ocp.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace kenmpc::ocp {

std::string to_string(ConstraintMode m) {
  return m == ConstraintMode::Hard ? "hard" : "slack_penalty";
}

ConstraintMode constraint_mode_from_string(const std::string& s) {
  if (s == "hard") return ConstraintMode::Hard;
  if (s == "slack_penalty" || s == "slack") return ConstraintMode::SlackPenalty;
  throw ContractViolation("unknown constraint mode: " + s);
}

Vec OcpConfig::half_ranges() const {
  Vec hr(num_constrained());
  hr.head(path.size()) = path.half_range();
  hr[path.size()] = 0.5 * (storage_upper - storage_lower);
  // Scaled states have half range 1 by construction.
  hr.head(path.size()).setOnes();
  return hr;
}

Vec OcpConfig::midpoints() const {
  Vec mid = Vec::Zero(num_constrained());
  mid[path.size()] = 0.5 * (storage_lower + storage_upper);
  return mid;
}

void OcpConfig::validate() const {
  require(horizon >= 1, "OcpConfig: horizon must be >= 1");
  require(dt_minutes > 0.0, "OcpConfig: dt must be positive");
  require(inputs.size() > 0 && path.size() > 0, "OcpConfig: empty bounds");
  require(((inputs.upper - inputs.lower).array() > 0.0).all(), "OcpConfig: input lower must be < upper");
  require(((path.upper - path.lower).array() > 0.0).all(), "OcpConfig: path lower must be < upper");
  require(((outputs.upper - outputs.lower).array() > 0.0).all(), "OcpConfig: output lower must be < upper");
  require(outputs.size() == 2, "OcpConfig: expected two outputs (energy, production)");
  require(storage_lower < storage_upper, "OcpConfig: storage lower must be < upper");
  require(M > 0.0, "OcpConfig: M must be positive");
  require(delta >= 0.0, "OcpConfig: delta must be >= 0");
  require((half_ranges().array() > delta).all(), "OcpConfig: delta must be below every half range");
  require(demand_rate >= 0.0, "OcpConfig: demand must be >= 0");
  require(cost_scale > 0.0, "OcpConfig: cost_scale must be positive");
}

Vec BuiltOcp::target_values() const {
  Vec v(static_cast<Eigen::Index>(targets.size()));
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const DataTarget& t = targets[k];
    double x = 0.0;
    switch (t.kind) {
      case DataTarget::Kind::Aeq: x = qp.A_eq.coeff(t.row, t.col); break;
      case DataTarget::Kind::Beq: x = qp.b_eq[t.row]; break;
      case DataTarget::Kind::Q: x = qp.q[t.row]; break;
      case DataTarget::Kind::G: x = qp.G.coeff(t.row, t.col); break;
    }
    v[static_cast<Eigen::Index>(k)] = x;
  }
  return v;
}

namespace {

class Assembler {
public:
  Assembler(int n, const Vec& theta, const Vec& z0)
      : q(Vec::Zero(n)), theta_(theta), z0_(z0) {}

  std::vector<Triplet> aeq, g, p;
  std::vector<double> beq, h;
  Vec q;
  std::vector<DataTarget> targets;
  std::vector<Triplet> links;

  int eq_row(double rhs) {
    beq.push_back(rhs);
    return static_cast<int>(beq.size()) - 1;
  }
  int ineq_row(double rhs) {
    h.push_back(rhs);
    return static_cast<int>(h.size()) - 1;
  }

  /// Source index: linear-block entries first, then z0.
  double source(int j) const {
    return j < theta_.size() ? theta_[j] : z0_[j - theta_.size()];
  }

  void link_aeq(int r, int c, int src, double coeff) {
    aeq.emplace_back(r, c, coeff * source(src));
    add_target({DataTarget::Kind::Aeq, r, c}, src, coeff);
  }
  void link_g(int r, int c, int src, double coeff) {
    g.emplace_back(r, c, coeff * source(src));
    add_target({DataTarget::Kind::G, r, c}, src, coeff);
  }
  void link_q(int i, int src, double coeff) {
    q[i] = coeff * source(src);
    add_target({DataTarget::Kind::Q, i, 0}, src, coeff);
  }
  void link_beq(int r, int src) {
    beq[static_cast<std::size_t>(r)] = source(src);
    add_target({DataTarget::Kind::Beq, r, 0}, src, 1.0);
  }

private:
  void add_target(DataTarget t, int src, double coeff) {
    links.emplace_back(static_cast<int>(targets.size()), src, coeff);
    targets.push_back(t);
  }

  const Vec& theta_;
  const Vec& z0_;
};

SparseMat from_triplets(int rows, int cols, const std::vector<Triplet>& t) {
  SparseMat m(rows, cols);
  m.setFromTriplets(t.begin(), t.end());
  m.makeCompressed();
  return m;
}

}  // namespace

BuiltOcp build_ocp_from_latent(const koopman::Model& model, const Vec& z0, double storage_now,
                               std::span<const double> prices, const OcpConfig& cfg,
                               ConstraintMode mode) {
  cfg.validate();
  model.validate();
  const koopman::Dims& d = model.dims;
  require(std::abs(model.dt_minutes - cfg.dt_minutes) < 1e-9,
          "build_ocp: model time step does not match the controller step");
  require(d.n_input == cfg.inputs.size(), "build_ocp: input count does not match input bounds");
  require(d.n_pred == cfg.path.size(), "build_ocp: predicted state count does not match path bounds");
  require(d.n_out == 2, "build_ocp: model must have two outputs (energy, production)");
  require_size(z0.size(), d.n_latent, "build_ocp: z0");
  require(z0.allFinite() && std::isfinite(storage_now), "build_ocp: non-finite initial state");
  const int N = cfg.horizon;
  require(static_cast<int>(prices.size()) >= N, "build_ocp: price forecast shorter than horizon");
  for (int t = 0; t < N; ++t)
    require(std::isfinite(prices[static_cast<std::size_t>(t)]), "build_ocp: non-finite price");

  const int nu = d.n_input, nz = d.n_latent, np = d.n_pred, nc = np + 1;
  const double dt = cfg.dt_hours();
  const double e_half = 0.5 * (cfg.outputs.upper[0] - cfg.outputs.lower[0]);
  const double n_half = 0.5 * (cfg.outputs.upper[1] - cfg.outputs.lower[1]);
  const double n_center = 0.5 * (cfg.outputs.upper[1] + cfg.outputs.lower[1]);
  const bool slack = mode == ConstraintMode::SlackPenalty;

  BuiltOcp b;
  b.mode = mode;
  b.n_input = nu;
  b.n_constrained = nc;
  b.z0 = z0;
  VariableLayout& L = b.qp.layout;
  L.add("u", N, nu);
  L.add("z", N + 1, nz);
  L.add("ns", N + 1, 1);
  if (slack) {
    L.add("s", N, nc);
    L.add("t", N, nc);
  }
  const int n = L.total();

  const koopman::ParamLayout pl(d);
  b.theta_offset = pl.matrices_offset();
  b.n_theta = static_cast<int>(pl.total - pl.matrices_offset());
  const Vec theta = koopman::flatten(model).values().tail(b.n_theta);
  auto src = [&](const koopman::ParamLayout::Block& blk, int r, int c) {
    return static_cast<int>(blk.at(r, c) - b.theta_offset);
  };
  const int z0_src = b.n_theta;

  Assembler as(n, theta, z0);
  const VariableBlock& U = L.get("u");
  const VariableBlock& Z = L.get("z");
  const VariableBlock& NS = L.get("ns");

  // Equalities.
  b.eq_rows.add("z_init", 1, nz);
  for (int i = 0; i < nz; ++i) {
    const int r = as.eq_row(0.0);
    as.aeq.emplace_back(r, Z.at(0, i), 1.0);
    as.link_beq(r, z0_src + i);
  }
  b.eq_rows.add("dynamics", N, nz);
  for (int t = 0; t < N; ++t) {
    for (int i = 0; i < nz; ++i) {
      const int r = as.eq_row(0.0);
      as.aeq.emplace_back(r, Z.at(t + 1, i), 1.0);
      for (int j = 0; j < nz; ++j) as.link_aeq(r, Z.at(t, j), src(pl.A, i, j), -1.0);
      for (int j = 0; j < nu; ++j) as.link_aeq(r, U.at(t, j), src(pl.B, i, j), -1.0);
    }
  }
  b.eq_rows.add("storage_init", 1, 1);
  {
    const int r = as.eq_row(storage_now);
    as.aeq.emplace_back(r, NS.at(0, 0), 1.0);
  }
  b.eq_rows.add("storage_balance", N, 1);
  for (int t = 0; t < N; ++t) {
    const int r = as.eq_row(dt * (n_center - cfg.demand_rate));
    as.aeq.emplace_back(r, NS.at(t + 1, 0), 1.0);
    as.aeq.emplace_back(r, NS.at(t, 0), -1.0);
    for (int j = 0; j < nz; ++j) as.link_aeq(r, Z.at(t, j), src(pl.D, 1, j), -dt * n_half);
    for (int j = 0; j < nu; ++j) as.link_aeq(r, U.at(t, j), src(pl.E, 1, j), -dt * n_half);
  }
  const Vec hr = cfg.half_ranges();
  const Vec mid = cfg.midpoints();
  if (slack) {
    const VariableBlock& S = L.get("s");
    b.eq_rows.add("slack", N, nc);
    for (int k = 0; k < N; ++k) {
      for (int i = 0; i < nc; ++i) {
        const int r = as.eq_row(mid[i]);
        if (i < np) {
          for (int j = 0; j < nz; ++j) as.link_aeq(r, Z.at(k + 1, j), src(pl.C, i, j), 1.0);
        } else {
          as.aeq.emplace_back(r, NS.at(k + 1, 0), 1.0);
        }
        as.aeq.emplace_back(r, S.at(k, i), 1.0);
      }
    }
  }

  // Inequalities.
  b.ineq_rows.add("input_upper", N, nu);
  for (int t = 0; t < N; ++t)
    for (int j = 0; j < nu; ++j) as.g.emplace_back(as.ineq_row(1.0), U.at(t, j), 1.0);
  b.ineq_rows.add("input_lower", N, nu);
  for (int t = 0; t < N; ++t)
    for (int j = 0; j < nu; ++j) as.g.emplace_back(as.ineq_row(1.0), U.at(t, j), -1.0);
  if (slack) {
    const VariableBlock& S = L.get("s");
    const VariableBlock& T = L.get("t");
    b.ineq_rows.add("epigraph_nonneg", N, nc);
    for (int k = 0; k < N; ++k)
      for (int i = 0; i < nc; ++i) as.g.emplace_back(as.ineq_row(0.0), T.at(k, i), -1.0);
    b.ineq_rows.add("epigraph_upper", N, nc);
    for (int k = 0; k < N; ++k)
      for (int i = 0; i < nc; ++i) {
        const int r = as.ineq_row(hr[i] - cfg.delta);
        as.g.emplace_back(r, S.at(k, i), 1.0);
        as.g.emplace_back(r, T.at(k, i), -1.0);
      }
    b.ineq_rows.add("epigraph_lower", N, nc);
    for (int k = 0; k < N; ++k)
      for (int i = 0; i < nc; ++i) {
        const int r = as.ineq_row(hr[i] - cfg.delta);
        as.g.emplace_back(r, S.at(k, i), -1.0);
        as.g.emplace_back(r, T.at(k, i), -1.0);
      }
    for (int k = 0; k < N; ++k)
      for (int i = 0; i < nc; ++i) as.p.emplace_back(T.at(k, i), T.at(k, i), 2.0 * cfg.M);
  } else {
    b.ineq_rows.add("path_upper", N, nc);
    for (int k = 0; k < N; ++k)
      for (int i = 0; i < nc; ++i) {
        if (i < np) {
          const int r = as.ineq_row(1.0);
          for (int j = 0; j < nz; ++j) as.link_g(r, Z.at(k + 1, j), src(pl.C, i, j), 1.0);
        } else {
          as.g.emplace_back(as.ineq_row(cfg.storage_upper), NS.at(k + 1, 0), 1.0);
        }
      }
    b.ineq_rows.add("path_lower", N, nc);
    for (int k = 0; k < N; ++k)
      for (int i = 0; i < nc; ++i) {
        if (i < np) {
          const int r = as.ineq_row(1.0);
          for (int j = 0; j < nz; ++j) as.link_g(r, Z.at(k + 1, j), src(pl.C, i, j), -1.0);
        } else {
          as.g.emplace_back(as.ineq_row(-cfg.storage_lower), NS.at(k + 1, 0), -1.0);
        }
      }
  }

  // Economic stage cost: cost_scale * price_t * E_t[kW] * dt[h], E_t = centre + half * y0_t.
  for (int t = 0; t < N; ++t) {
    const double w = cfg.cost_scale * prices[static_cast<std::size_t>(t)] * dt * e_half;
    for (int j = 0; j < nz; ++j) as.link_q(Z.at(t, j), src(pl.D, 0, j), w);
    for (int j = 0; j < nu; ++j) as.link_q(U.at(t, j), src(pl.E, 0, j), w);
  }

  const int neq = static_cast<int>(as.beq.size());
  const int nin = static_cast<int>(as.h.size());
  b.qp.P = from_triplets(n, n, as.p);
  b.qp.q = as.q;
  b.qp.A_eq = from_triplets(neq, n, as.aeq);
  b.qp.b_eq = Eigen::Map<const Vec>(as.beq.data(), neq);
  b.qp.G = from_triplets(nin, n, as.g);
  b.qp.h = Eigen::Map<const Vec>(as.h.data(), nin);
  b.targets = std::move(as.targets);
  auto S = std::make_shared<SparseMat>(static_cast<int>(b.targets.size()), b.n_theta + nz);
  S->setFromTriplets(as.links.begin(), as.links.end());
  S->makeCompressed();
  b.S = std::move(S);
  return b;
}

BuiltOcp build_ocp(const koopman::Model& model15, const Vec& x_obs_scaled, double storage_now,
                   std::span<const double> price_forecast, const OcpConfig& config,
                   ConstraintMode mode) {
  require(x_obs_scaled.allFinite(), "build_ocp: non-finite observation");
  return build_ocp_from_latent(model15, koopman::encode(model15, x_obs_scaled), storage_now,
                               price_forecast, config, mode);
}

Vec first_input(const BuiltOcp& built, const QpSolution& sol) {
  return sol.x.segment(built.first_input_offset(), built.n_input);
}

Mat input_plan(const BuiltOcp& built, const QpSolution& sol) {
  const VariableBlock& U = built.qp.layout.get("u");
  Mat plan(U.width, U.stages);
  for (int t = 0; t < U.stages; ++t) plan.col(t) = sol.x.segment(U.at(t, 0), U.width);
  return plan;
}

TargetGradient target_gradient(const BuiltOcp& built, const QpSolution& sol, const Vec& dl_du0,
                               QpWorkspace* workspace) {
  require_size(dl_du0.size(), built.n_input, "target_gradient: dl_du0");
  Vec dl_dx = Vec::Zero(built.qp.num_vars());
  dl_dx.segment(built.first_input_offset(), built.n_input) = dl_du0;
  const QpAdjoint adj = qp_adjoint(built.qp, sol, dl_dx, 1e-8, workspace);
  TargetGradient g;
  g.ill_conditioned = adj.ill_conditioned;
  g.d_targets.resize(static_cast<Eigen::Index>(built.targets.size()));
  for (std::size_t k = 0; k < built.targets.size(); ++k) {
    const DataTarget& t = built.targets[k];
    double v = 0.0;
    switch (t.kind) {
      case DataTarget::Kind::Aeq: v = adj.d_Aeq(t.row, t.col); break;
      case DataTarget::Kind::Beq: v = adj.d_beq(t.row); break;
      case DataTarget::Kind::Q: v = adj.d_q(t.row); break;
      case DataTarget::Kind::G: v = adj.d_G(t.row, t.col); break;
    }
    g.d_targets[static_cast<Eigen::Index>(k)] = v;
  }
  return g;
}

tape::NodeId ocp_first_input_node(tape::Tape& t, const tape::ModelNodes& nodes, tape::NodeId x_obs,
                                  std::shared_ptr<const BuiltOcp> built,
                                  std::shared_ptr<const QpSolution> sol, bool* ill_conditioned) {
  require(built != nullptr && sol != nullptr, "ocp node: missing problem or solution");
  require(t.value(x_obs).cols() == 1, "ocp node: x_obs must be a single column");
  const tape::NodeId z0 = tape::encode(t, nodes, x_obs);
  const tape::NodeId theta = t.param(built->theta_offset, built->n_theta, 1);
  const tape::NodeId inputs[] = {theta, z0};
  const tape::NodeId data = t.sparse_affine(inputs, built->S, Vec::Zero(built->S->rows()));
  const tape::NodeId parts[] = {data};
  return t.opaque(parts, first_input(*built, *sol), [built, sol, ill_conditioned](const Mat& g) {
    TargetGradient tg = target_gradient(*built, *sol, g.col(0));
    if (ill_conditioned != nullptr && tg.ill_conditioned) *ill_conditioned = true;
    return std::vector<Mat>{Mat(tg.d_targets)};
  });
}

OcpGradient grad_ocp(const koopman::Model& model15, const Vec& x_obs_scaled, const BuiltOcp& built,
                     const QpSolution& sol, const Vec& dl_du0, QpWorkspace* workspace) {
  require(sol.ok(), "grad_ocp: solution is not optimal");
  const TargetGradient tg = target_gradient(built, sol, dl_du0, workspace);
  const Vec through = built.S->transpose() * tg.d_targets;
  OcpGradient out;
  out.ill_conditioned = tg.ill_conditioned;
  out.d_z0 = through.tail(model15.dims.n_latent);

  tape::Tape t(koopman::flatten(model15).values());
  const tape::ModelNodes nodes = tape::register_model(t, model15.dims);
  const tape::NodeId z0 = tape::encode(t, nodes, t.constant(x_obs_scaled));
  const std::pair<tape::NodeId, Mat> seed{z0, Mat(out.d_z0)};
  out.d_theta = t.backward(std::span(&seed, 1));
  out.d_theta.segment(static_cast<Eigen::Index>(built.theta_offset), built.n_theta) +=
      through.head(built.n_theta);
  return out;
}

// ---------------------------------------------------------------------------

double hinge_penalty(double s, double half_range, double delta, double M) {
  const double v = std::max(0.0, std::abs(s) - half_range + delta);
  return M * v * v;
}

double epigraph_penalty(const BuiltOcp& built, int constraint, int stage, double s) {
  require(built.mode == ConstraintMode::SlackPenalty, "epigraph_penalty: problem has no slacks");
  const int sv = built.qp.layout.get("s").at(stage, constraint);
  const int tv = built.qp.layout.get("t").at(stage, constraint);
  // Each row reads a_s s + a_t t <= h with a_t < 0, i.e. t >= (h - a_s s) / a_t.
  double t_min = -std::numeric_limits<double>::infinity();
  for (SparseMat::InnerIterator it(built.qp.G, tv); it; ++it) {
    const double a_t = it.value();
    require(a_t < 0.0, "epigraph_penalty: unexpected epigraph row sign");
    const double a_s = built.qp.G.coeff(it.row(), sv);
    t_min = std::max(t_min, (built.qp.h[it.row()] - a_s * s) / a_t);
  }
  return 0.5 * built.qp.P.coeff(tv, tv) * t_min * t_min;
}

bool solution_degenerate(const BuiltOcp& built, const QpSolution& sol, double tol) {
  const Eigen::Index m = built.qp.num_ineq();
  require(sol.lam.size() == m, "solution_degenerate: solution does not match problem");
  const Vec slack = sol.s.size() == m ? sol.s : Vec(built.qp.h - built.qp.G * sol.x);
  const VariableBlock* skip = built.ineq_rows.find("epigraph_nonneg");
  for (Eigen::Index i = 0; i < m; ++i) {
    if (skip != nullptr && i >= skip->offset && i < skip->offset + skip->size()) continue;
    if (slack[i] < tol && sol.lam[i] < tol) return true;
  }
  return false;
}

ObjectiveSplit split_objective(const BuiltOcp& built, const QpSolution& sol) {
  return {built.qp.q.dot(sol.x), 0.5 * sol.x.dot(built.qp.P * sol.x)};
}

// ---------------------------------------------------------------------------

namespace {

Vec shift_blocks(const Vec& v, const VariableLayout& layout) {
  Vec out = v;
  for (const VariableBlock& b : layout.blocks) {
    if (b.stages < 2) continue;
    for (int k = 0; k + 1 < b.stages; ++k)
      out.segment(b.at(k, 0), b.width) = v.segment(b.at(k + 1, 0), b.width);
  }
  return out;
}

}  // namespace

WarmStart shifted_warm_start(const BuiltOcp& built, const QpSolution& sol) {
  WarmStart w;
  w.x = shift_blocks(sol.x, built.qp.layout);
  w.nu = shift_blocks(sol.nu, built.eq_rows);
  w.lam = shift_blocks(sol.lam, built.ineq_rows);
  w.s = shift_blocks(sol.s, built.ineq_rows);
  return w;
}

EnmpcController::EnmpcController(koopman::Model model15, OcpConfig config, ConstraintMode mode,
                                 QpSettings settings)
    : model_(std::move(model15)), config_(std::move(config)), mode_(mode), settings_(settings) {
  config_.validate();
  model_.validate();
  require(std::abs(model_.dt_minutes - config_.dt_minutes) < 1e-9,
          "EnmpcController: model time step does not match the controller step");
}

void EnmpcController::reset() {
  warm_slack_.reset();
  warm_hard_.reset();
}

void EnmpcController::set_model(koopman::Model m) {
  m.validate();
  require(m.dims == model_.dims && std::abs(m.dt_minutes - model_.dt_minutes) < 1e-12,
          "EnmpcController: replacement model must keep dims and time step");
  model_ = std::move(m);
  reset();
}

PolicyStep EnmpcController::act(const Vec& x_obs_scaled, double storage_now,
                                std::span<const double> prices) {
  const auto t0 = std::chrono::steady_clock::now();
  const Vec z0 = koopman::encode(model_, x_obs_scaled);
  PolicyStep step;

  auto attempt = [&](ConstraintMode mode, QpWorkspace& ws, std::optional<WarmStart>& warm) {
    auto built = std::make_shared<BuiltOcp>(
        build_ocp_from_latent(model_, z0, storage_now, prices, config_, mode));
    const WarmStart* w = (warm_start && warm.has_value()) ? &*warm : nullptr;
    auto sol = std::make_shared<QpSolution>(solve_qp(built->qp, settings_, &ws, w));
    if (!sol->ok() && w != nullptr) {
      step.iterations += sol->iterations;
      sol = std::make_shared<QpSolution>(solve_qp(built->qp, settings_, &ws, nullptr));
    }
    if (sol->ok())
      warm = shifted_warm_start(*built, *sol);
    else
      warm.reset();
    step.built = built;
    step.solution = sol;
    step.iterations += sol->iterations;
    return sol->ok();
  };

  bool ok = false;
  if (mode_ == ConstraintMode::Hard) {
    ok = attempt(ConstraintMode::Hard, ws_hard_, warm_hard_);
    if (!ok) {
      ++fallbacks_;
      step.fell_back = true;
      ok = attempt(ConstraintMode::SlackPenalty, ws_slack_, warm_slack_);
    }
  } else {
    ok = attempt(ConstraintMode::SlackPenalty, ws_slack_, warm_slack_);
  }
  step.ok = ok;
  if (ok) step.u_scaled = first_input(*step.built, *step.solution);
  step.solve_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return step;
}

}  // namespace kenmpc::ocp
