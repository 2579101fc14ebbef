#include "kenmpc/qp.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace kenmpc::ocp {

// ---------------------------------------------------------------------------
// Layout

int VariableLayout::add(std::string name, int stages, int width) {
  require(stages >= 0 && width >= 0, "VariableLayout: negative block size");
  require(find(name) == nullptr, "VariableLayout: duplicate block " + name);
  const int off = total();
  blocks.push_back(VariableBlock{std::move(name), off, stages, width});
  return off;
}

const VariableBlock* VariableLayout::find(const std::string& name) const {
  for (const auto& b : blocks)
    if (b.name == name) return &b;
  return nullptr;
}

const VariableBlock& VariableLayout::get(const std::string& name) const {
  const VariableBlock* b = find(name);
  if (b == nullptr) throw ContractViolation("VariableLayout: no block named " + name);
  return *b;
}

int VariableLayout::total() const {
  int end = 0;
  for (const auto& b : blocks) end = std::max(end, b.offset + b.size());
  return end;
}

bool VariableLayout::covers_exactly(int n) const {
  std::vector<int> hits(static_cast<std::size_t>(std::max(n, 0)), 0);
  for (const auto& b : blocks) {
    for (int i = b.offset; i < b.offset + b.size(); ++i) {
      if (i < 0 || i >= n) return false;
      ++hits[static_cast<std::size_t>(i)];
    }
  }
  return std::all_of(hits.begin(), hits.end(), [](int c) { return c == 1; });
}

// ---------------------------------------------------------------------------
// Problem

void QpProblem::validate(bool check_psd) const {
  const int n = num_vars();
  require(P.rows() == n && P.cols() == n, "QpProblem: P must be n x n");
  require(A_eq.cols() == n && A_eq.rows() == b_eq.size(), "QpProblem: A_eq/b_eq shape mismatch");
  require(G.cols() == n && G.rows() == h.size(), "QpProblem: G/h shape mismatch");
  require(q.allFinite() && b_eq.allFinite() && h.allFinite(), "QpProblem: non-finite vector data");
  auto finite_sparse = [](const SparseMat& M) {
    for (int k = 0; k < M.outerSize(); ++k)
      for (SparseMat::InnerIterator it(M, k); it; ++it)
        if (!std::isfinite(it.value())) return false;
    return true;
  };
  require(finite_sparse(P) && finite_sparse(A_eq) && finite_sparse(G),
          "QpProblem: non-finite matrix data");
  const SparseMat asym = SparseMat(P.transpose()) - P;
  double max_asym = 0.0;
  for (int k = 0; k < asym.outerSize(); ++k)
    for (SparseMat::InnerIterator it(asym, k); it; ++it)
      max_asym = std::max(max_asym, std::abs(it.value()));
  require(max_asym <= 1e-12 * std::max(1.0, P.norm()), "QpProblem: P is not symmetric");
  if (!layout.blocks.empty())
    require(layout.covers_exactly(n), "QpProblem: layout does not cover every variable exactly once");
  if (check_psd && n > 0) {
    // Cholesky with a small shift; a negative pivot means P has a negative eigenvalue.
    const double shift = 1e-10 * std::max(1.0, P.norm());
    SparseMat Ps = P;
    for (int i = 0; i < n; ++i) Ps.coeffRef(i, i) += shift;
    Eigen::SimplicialLDLT<SparseMat> chol(Ps);
    require(chol.info() == Eigen::Success && (chol.vectorD().array() >= 0.0).all(),
            "QpProblem: P is not positive semidefinite");
  }
}

std::string to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Solved: return "solved";
    case QpStatus::MaxIterations: return "max_iterations";
    case QpStatus::PrimalInfeasible: return "primal_infeasible";
    case QpStatus::DualInfeasible: return "dual_infeasible";
    case QpStatus::NumericalError: return "numerical_error";
  }
  return "unknown";
}

double KktResiduals::max() const {
  return std::max({stationarity, primal, dual, complementarity});
}

KktResiduals kkt_residuals(const QpProblem& qp, const Vec& x, const Vec& nu, const Vec& lam) {
  KktResiduals r;
  Vec rd = qp.P * x + qp.q;
  if (qp.num_eq() > 0) rd += qp.A_eq.transpose() * nu;
  if (qp.num_ineq() > 0) rd += qp.G.transpose() * lam;
  r.stationarity = rd.size() ? rd.lpNorm<Eigen::Infinity>() : 0.0;
  if (qp.num_eq() > 0) r.primal = (qp.A_eq * x - qp.b_eq).lpNorm<Eigen::Infinity>();
  if (qp.num_ineq() > 0) {
    const Vec slack = qp.h - qp.G * x;
    r.primal = std::max(r.primal, std::max(0.0, -slack.minCoeff()));
    r.dual = std::max(0.0, -lam.minCoeff());
    r.complementarity = lam.cwiseProduct(slack).lpNorm<Eigen::Infinity>();
  }
  return r;
}

// ---------------------------------------------------------------------------
// KKT system
//
//   [ P + rho I   A'      G'        ]
//   [ A          -eps I   0         ]
//   [ G           0      -(W + eps) ]
//
// stored as its lower triangle; only the W diagonal changes between iterations.

namespace {

using Ldlt = Eigen::SimplicialLDLT<SparseMat, Eigen::Lower, Eigen::AMDOrdering<int>>;

struct KktSystem {
  SparseMat K;
  std::vector<int> w_diag;
  std::vector<int> diag;
  Vec w_current;
  int n = 0, p = 0, m = 0;
  double rho = 0.0, eps = 0.0;

  KktSystem(const QpProblem& qp, double rho_, double eps_) : rho(rho_), eps(eps_) {
    n = qp.num_vars();
    p = qp.num_eq();
    m = qp.num_ineq();
    const int dim = n + p + m;
    std::vector<Triplet> t;
    t.reserve(static_cast<std::size_t>(qp.P.nonZeros() + qp.A_eq.nonZeros() + qp.G.nonZeros() + dim));
    for (int k = 0; k < qp.P.outerSize(); ++k)
      for (SparseMat::InnerIterator it(qp.P, k); it; ++it)
        if (it.row() >= it.col()) t.emplace_back(it.row(), it.col(), it.value());
    for (int i = 0; i < n; ++i) t.emplace_back(i, i, rho);
    for (int k = 0; k < qp.A_eq.outerSize(); ++k)
      for (SparseMat::InnerIterator it(qp.A_eq, k); it; ++it)
        t.emplace_back(n + it.row(), it.col(), it.value());
    for (int i = 0; i < p; ++i) t.emplace_back(n + i, n + i, -eps);
    for (int k = 0; k < qp.G.outerSize(); ++k)
      for (SparseMat::InnerIterator it(qp.G, k); it; ++it)
        t.emplace_back(n + p + it.row(), it.col(), it.value());
    for (int i = 0; i < m; ++i) t.emplace_back(n + p + i, n + p + i, -(1.0 + eps));
    K.resize(dim, dim);
    K.setFromTriplets(t.begin(), t.end());
    K.makeCompressed();
    diag.resize(static_cast<std::size_t>(dim));
    for (int col = 0; col < dim; ++col)
      for (int k = K.outerIndexPtr()[col]; k < K.outerIndexPtr()[col + 1]; ++k)
        if (K.innerIndexPtr()[k] == col) diag[static_cast<std::size_t>(col)] = k;
    w_diag.assign(diag.begin() + n + p, diag.end());
    w_current = Vec::Ones(m);
  }

  void set_w(const Vec& W) {
    w_current = W;
    for (int i = 0; i < m; ++i) K.valuePtr()[w_diag[static_cast<std::size_t>(i)]] = -(W[i] + eps);
  }

  /// Changes the regularisation; apply_true keeps returning the unregularised product.
  void set_reg(double rho_, double eps_) {
    const double P_shift = rho_ - rho;
    for (int i = 0; i < n; ++i) K.valuePtr()[diag[static_cast<std::size_t>(i)]] += P_shift;
    rho = rho_;
    eps = eps_;
    for (int i = 0; i < p; ++i) K.valuePtr()[diag[static_cast<std::size_t>(n + i)]] = -eps;
    set_w(w_current);
  }

  /// Product with the unregularised matrix.
  Vec apply_true(const Vec& v) const {
    Vec y = K.selfadjointView<Eigen::Lower>() * v;
    y.head(n) -= rho * v.head(n);
    y.segment(n, p) += eps * v.segment(n, p);
    y.tail(m) += eps * v.tail(m);
    return y;
  }
};

}  // namespace

struct QpWorkspace::Impl {
  Ldlt ldlt;
  std::vector<int> outer, inner;
  bool analyzed = false;
  std::size_t analyses = 0;

  bool factorize(const SparseMat& K) {
    const bool same =
        analyzed && static_cast<int>(outer.size()) == K.outerSize() + 1 &&
        static_cast<int>(inner.size()) == K.nonZeros() &&
        std::equal(outer.begin(), outer.end(), K.outerIndexPtr()) &&
        std::equal(inner.begin(), inner.end(), K.innerIndexPtr());
    if (!same) {
      ldlt.analyzePattern(K);
      outer.assign(K.outerIndexPtr(), K.outerIndexPtr() + K.outerSize() + 1);
      inner.assign(K.innerIndexPtr(), K.innerIndexPtr() + K.nonZeros());
      analyzed = true;
      ++analyses;
    }
    ldlt.factorize(K);
    return ldlt.info() == Eigen::Success;
  }

  /// Solve with iterative refinement against the unregularised matrix.
  double solve(const KktSystem& sys, const Vec& rhs, Vec& sol, int refine) {
    sol = ldlt.solve(rhs);
    const double scale = 1.0 + rhs.lpNorm<Eigen::Infinity>();
    Vec r = rhs - sys.apply_true(sol);
    double res = r.lpNorm<Eigen::Infinity>();
    for (int k = 0; k < refine && res > 1e-10 * scale; ++k) {
      Vec trial = sol + ldlt.solve(r);
      Vec r_trial = rhs - sys.apply_true(trial);
      const double res_trial = r_trial.lpNorm<Eigen::Infinity>();
      if (!(res_trial < res)) break;
      sol.swap(trial);
      r.swap(r_trial);
      res = res_trial;
    }
    return res / scale;
  }
};

QpWorkspace::QpWorkspace() : impl_(std::make_unique<Impl>()) {}
QpWorkspace::~QpWorkspace() = default;
QpWorkspace::QpWorkspace(QpWorkspace&&) noexcept = default;
QpWorkspace& QpWorkspace::operator=(QpWorkspace&&) noexcept = default;
std::size_t QpWorkspace::symbolic_analyses() const { return impl_->analyses; }

namespace {

double max_step(const Vec& v, const Vec& dv) {
  double a = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (dv[i] < 0.0) a = std::min(a, -v[i] / dv[i]);
  return a;
}

void shift_positive(Vec& v) {
  if (v.size() == 0) return;
  const double worst = (-v).maxCoeff();
  if (worst >= -1e-8 * std::max(1.0, v.norm())) v.array() += 1.0 + worst;
}

/// Factorizes at the base regularisation; on a zero pivot raises it by decades
/// (up to 1e-4) and retries. Refinement runs against the unregularised matrix.
bool factorize_regularized(QpWorkspace::Impl& ws, KktSystem& sys, double rho, double eps) {
  sys.set_reg(rho, eps);
  for (int attempt = 0; attempt < 8; ++attempt) {
    if (ws.factorize(sys.K)) return true;
    if (std::max(sys.rho, sys.eps) >= 1e-4) break;
    sys.set_reg(std::max(sys.rho, 1e-12) * 100.0, std::max(sys.eps, 1e-12) * 100.0);
  }
  return false;
}

}  // namespace

QpSolution solve_qp(const QpProblem& qp, const QpSettings& settings, QpWorkspace* workspace,
                    const WarmStart* warm) {
  const int n = qp.num_vars();
  const int p = qp.num_eq();
  const int m = qp.num_ineq();
  require(qp.P.rows() == n && qp.A_eq.cols() == n && qp.G.cols() == n,
          "solve_qp: inconsistent problem dimensions");

  QpWorkspace local;
  QpWorkspace::Impl& ws = workspace ? workspace->impl() : local.impl();
  KktSystem sys(qp, settings.primal_reg, settings.dual_reg);
  const SparseMat Gt = qp.G.transpose();
  const SparseMat At = qp.A_eq.transpose();

  QpSolution sol;
  Vec x, nu, lam, s;

  auto finish = [&](QpStatus st) {
    sol.status = st;
    sol.x = x;
    sol.nu = nu;
    sol.lam = lam;
    sol.s = s;
    sol.objective = 0.5 * x.dot(qp.P * x) + qp.q.dot(x);
    sol.residuals = kkt_residuals(qp, x, nu, lam);
    sol.degenerate = false;
    for (int i = 0; i < m; ++i)
      if (s[i] < settings.degeneracy_tol && lam[i] < settings.degeneracy_tol) sol.degenerate = true;
    return sol;
  };

  if (warm != nullptr && warm->x.size() == n && warm->nu.size() == p && warm->lam.size() == m &&
      warm->s.size() == m) {
    x = warm->x;
    nu = warm->nu;
    s = (qp.h - qp.G * x).cwiseMax(warm->s).cwiseMax(1e-4);
    lam = warm->lam.cwiseMax(1e-4);
  } else {
    sys.set_w(Vec::Ones(m));
    if (!factorize_regularized(ws, sys, settings.primal_reg, settings.dual_reg)) {
      x = Vec::Zero(n);
      nu = Vec::Zero(p);
      lam = Vec::Ones(m);
      s = Vec::Ones(m);
      return finish(QpStatus::NumericalError);
    }
    Vec rhs(n + p + m);
    rhs << -qp.q, qp.b_eq, qp.h;
    Vec sol0;
    ws.solve(sys, rhs, sol0, settings.refine_steps);
    x = sol0.head(n);
    nu = sol0.segment(p > 0 ? n : n, p);
    lam = sol0.tail(m);
    s = -lam;
    shift_positive(s);
    shift_positive(lam);
  }

  Vec rhs(n + p + m), d;
  for (int iter = 0; iter <= settings.max_iter; ++iter) {
    sol.iterations = iter;
    if (!x.allFinite() || !nu.allFinite() || !lam.allFinite() || !s.allFinite())
      return finish(QpStatus::NumericalError);

    Vec rd = qp.P * x + qp.q;
    if (p > 0) rd += At * nu;
    if (m > 0) rd += Gt * lam;
    const Vec rp = qp.A_eq * x - qp.b_eq;
    const Vec rg = qp.G * x + s - qp.h;

    const KktResiduals res = kkt_residuals(qp, x, nu, lam);
    if (res.max() <= settings.tol && (m == 0 || (rg.size() == 0 || rg.lpNorm<Eigen::Infinity>() <= settings.tol)))
      return finish(QpStatus::Solved);
    if (iter == settings.max_iter) break;

    // Infeasibility certificates.
    if (iter > 5 && (p + m) > 0) {
      const double gap = -(qp.b_eq.dot(nu) + qp.h.dot(lam));
      if (gap > 0.0) {
        Vec comb = Vec::Zero(n);
        if (p > 0) comb += At * nu;
        if (m > 0) comb += Gt * lam;
        if (comb.lpNorm<Eigen::Infinity>() <= settings.infeasibility_tol * gap) {
          sol.certificate.resize(p + m);
          sol.certificate << nu / gap, lam / gap;
          return finish(QpStatus::PrimalInfeasible);
        }
      }
      const double xn = x.lpNorm<Eigen::Infinity>();
      if (xn > 1e8) {
        const Vec dir = x / xn;
        const double qd = qp.q.dot(dir);
        const double tol_ray = 1e-6 * std::max(1.0, -qd);
        bool ray = qd < 0.0 && (qp.P * dir).lpNorm<Eigen::Infinity>() <= tol_ray;
        if (ray && p > 0) ray = (qp.A_eq * dir).lpNorm<Eigen::Infinity>() <= tol_ray;
        if (ray && m > 0) ray = (qp.G * dir).maxCoeff() <= tol_ray;
        if (ray) {
          sol.certificate = dir;
          return finish(QpStatus::DualInfeasible);
        }
      }
    }

    const Vec W = (m > 0) ? Vec(s.cwiseQuotient(lam)) : Vec();
    sys.set_w(W);
    if (!factorize_regularized(ws, sys, settings.primal_reg, settings.dual_reg))
      return finish(QpStatus::NumericalError);

    // Predictor (affine scaling) direction.
    rhs << -rd, -rp, s - rg;
    ws.solve(sys, rhs, d, settings.refine_steps);
    Vec dx = d.head(n);
    Vec dnu = d.segment(n, p);
    Vec dlam = d.tail(m);
    Vec ds = -rg - qp.G * dx;

    if (m > 0) {
      const double mu = s.dot(lam) / m;
      const double a_aff = std::min(1.0, std::min(max_step(s, ds), max_step(lam, dlam)));
      const double mu_aff = (s + a_aff * ds).dot(lam + a_aff * dlam) / m;
      const double sigma = std::pow(std::clamp(mu_aff / mu, 0.0, 1.0), 3);

      // Corrector with centering.
      const Vec rc = s.cwiseProduct(lam) + ds.cwiseProduct(dlam) - Vec::Constant(m, sigma * mu);
      rhs << -rd, -rp, rc.cwiseQuotient(lam) - rg;
      ws.solve(sys, rhs, d, settings.refine_steps);
      dx = d.head(n);
      dnu = d.segment(n, p);
      dlam = d.tail(m);
      ds = -rg - qp.G * dx;
    }

    double alpha = 1.0;
    if (m > 0)
      alpha = std::min(1.0, settings.step_fraction * std::min(max_step(s, ds), max_step(lam, dlam)));
    x += alpha * dx;
    nu += alpha * dnu;
    lam += alpha * dlam;
    s += alpha * ds;
  }
  return finish(QpStatus::MaxIterations);
}

// ---------------------------------------------------------------------------
// Sensitivities

QpAdjoint qp_adjoint(const QpProblem& qp, const QpSolution& sol, const Vec& dl_dx, double reg,
                     QpWorkspace* workspace) {
  const int n = qp.num_vars();
  const int p = qp.num_eq();
  const int m = qp.num_ineq();
  require_size(dl_dx.size(), n, "qp_adjoint: dl_dx");
  require(sol.x.size() == n && sol.nu.size() == p && sol.lam.size() == m,
          "qp_adjoint: solution does not match problem");

  QpWorkspace local;
  QpWorkspace::Impl& ws = workspace ? workspace->impl() : local.impl();
  KktSystem sys(qp, reg, reg);
  const Vec slack = sol.s.size() == m ? Vec(sol.s.cwiseMax(0.0)) : Vec((qp.h - qp.G * sol.x).cwiseMax(0.0));
  // Limit of the interior-point linearisation as mu -> 0: active rows (lam > s)
  // become equalities (W = 0), inactive rows decouple (dlam ~ 0).
  Vec W(m);
  for (int i = 0; i < m; ++i) W[i] = sol.lam[i] > slack[i] ? 0.0 : 1e8;
  sys.set_w(W);

  QpAdjoint adj;
  adj.x = sol.x;
  adj.nu = sol.nu;
  adj.lam = sol.lam;
  if (!factorize_regularized(ws, sys, reg, reg)) {
    adj.ill_conditioned = true;
    adj.dx = Vec::Zero(n);
    adj.dnu = Vec::Zero(p);
    adj.dlam = Vec::Zero(m);
    return adj;
  }
  Vec rhs = Vec::Zero(n + p + m);
  rhs.head(n) = -dl_dx;
  Vec d;
  adj.residual = ws.solve(sys, rhs, d, 6);
  adj.ill_conditioned = !(adj.residual <= 1e-6) || !d.allFinite();
  adj.dx = d.head(n);
  adj.dnu = d.segment(n, p);
  adj.dlam = d.tail(m);
  return adj;
}

QpAdjoint::Dense QpAdjoint::dense() const {
  Dense g;
  g.q = dx;
  g.b_eq = -dnu;
  g.h = -dlam;
  g.P = 0.5 * (dx * x.transpose() + x * dx.transpose());
  g.A_eq = dnu * x.transpose() + nu * dx.transpose();
  g.G = dlam * x.transpose() + lam * dx.transpose();
  return g;
}

// ---------------------------------------------------------------------------
// Text dump

namespace {

constexpr const char* kDumpHeader = "kenmpc-qp-dump 1";

void write_sparse(std::ostream& out, const char* name, const SparseMat& M) {
  out << name << ' ' << M.rows() << ' ' << M.cols() << ' ' << M.nonZeros() << '\n';
  for (int k = 0; k < M.outerSize(); ++k)
    for (SparseMat::InnerIterator it(M, k); it; ++it)
      out << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
}

void write_vec(std::ostream& out, const char* name, const Vec& v) {
  out << name << ' ' << v.size() << '\n';
  for (Eigen::Index i = 0; i < v.size(); ++i) out << v[i] << '\n';
}

SparseMat read_sparse(std::istream& in, const char* name) {
  std::string tag;
  long rows = 0, cols = 0, nnz = 0;
  if (!(in >> tag >> rows >> cols >> nnz) || tag != name)
    throw std::runtime_error(std::string("qp dump: expected section ") + name);
  std::vector<Triplet> t;
  for (long k = 0; k < nnz; ++k) {
    long r = 0, c = 0;
    double v = 0.0;
    if (!(in >> r >> c >> v)) throw std::runtime_error(std::string("qp dump: truncated ") + name);
    t.emplace_back(r, c, v);
  }
  SparseMat M(rows, cols);
  M.setFromTriplets(t.begin(), t.end());
  return M;
}

Vec read_vec(std::istream& in, const char* name) {
  std::string tag;
  long size = 0;
  if (!(in >> tag >> size) || tag != name)
    throw std::runtime_error(std::string("qp dump: expected section ") + name);
  Vec v(size);
  for (long i = 0; i < size; ++i)
    if (!(in >> v[i])) throw std::runtime_error(std::string("qp dump: truncated ") + name);
  return v;
}

}  // namespace

void dump_problem(const QpProblem& qp, std::ostream& out) {
  const auto old_prec = out.precision(17);
  out << kDumpHeader << '\n';
  write_sparse(out, "P", qp.P);
  write_vec(out, "q", qp.q);
  write_sparse(out, "A_eq", qp.A_eq);
  write_vec(out, "b_eq", qp.b_eq);
  write_sparse(out, "G", qp.G);
  write_vec(out, "h", qp.h);
  out.precision(old_prec);
}

QpProblem read_problem_dump(std::istream& in) {
  std::string line;
  std::getline(in, line);
  if (line != kDumpHeader) throw std::runtime_error("qp dump: bad header");
  QpProblem qp;
  qp.P = read_sparse(in, "P");
  qp.q = read_vec(in, "q");
  qp.A_eq = read_sparse(in, "A_eq");
  qp.b_eq = read_vec(in, "b_eq");
  qp.G = read_sparse(in, "G");
  qp.h = read_vec(in, "h");
  return qp;
}

}  // namespace kenmpc::ocp
