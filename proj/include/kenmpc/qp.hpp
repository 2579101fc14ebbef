#pragma once

// Convex quadratic programs
//
//   minimize    1/2 x'Px + q'x
//   subject to  A_eq x = b_eq,  G x <= h
//
// solved with a primal-dual interior-point method (Mehrotra predictor-corrector)
// on the sparse quasi-definite KKT system, plus reverse-mode sensitivities of
// the solution obtained by differentiating the KKT conditions.

#include "kenmpc/common.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace kenmpc::ocp {

using SparseMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

/// A named, stage-structured slice of the decision vector. Element j of stage k
/// sits at offset + k * width + j.
struct VariableBlock {
  std::string name;
  int offset = 0;
  int stages = 0;
  int width = 0;

  int size() const { return stages * width; }
  int at(int stage, int j) const { return offset + stage * width + j; }
};

struct VariableLayout {
  std::vector<VariableBlock> blocks;

  /// Appends a block right after the last one and returns its offset.
  int add(std::string name, int stages, int width);
  const VariableBlock* find(const std::string& name) const;
  const VariableBlock& get(const std::string& name) const;
  int total() const;
  /// Every index in [0, n) belongs to exactly one block.
  bool covers_exactly(int n) const;
};

struct QpProblem {
  SparseMat P;  ///< symmetric, both triangles stored
  Vec q;
  SparseMat A_eq;
  Vec b_eq;
  SparseMat G;
  Vec h;
  VariableLayout layout;

  int num_vars() const { return static_cast<int>(q.size()); }
  int num_eq() const { return static_cast<int>(b_eq.size()); }
  int num_ineq() const { return static_cast<int>(h.size()); }

  /// Shapes, finiteness, symmetry, layout coverage and (optionally) P >= 0.
  void validate(bool check_psd = true) const;
};

enum class QpStatus { Solved, MaxIterations, PrimalInfeasible, DualInfeasible, NumericalError };

std::string to_string(QpStatus s);

struct KktResiduals {
  double stationarity = 0.0;     ///< ||Px + q + A'nu + G'lam||_inf
  double primal = 0.0;           ///< max(||Ax - b||_inf, max(Gx - h)_+)
  double dual = 0.0;             ///< max(-lam)_+
  double complementarity = 0.0;  ///< max |lam_i (h - Gx)_i|

  double max() const;
};

KktResiduals kkt_residuals(const QpProblem& qp, const Vec& x, const Vec& nu, const Vec& lam);

struct QpSolution {
  Vec x;
  Vec nu;   ///< equality multipliers
  Vec lam;  ///< inequality multipliers (>= 0)
  Vec s;    ///< inequality slacks h - Gx at the final iterate
  double objective = 0.0;
  QpStatus status = QpStatus::NumericalError;
  int iterations = 0;
  KktResiduals residuals;
  /// Some constraint has both slack and multiplier below the degeneracy tolerance.
  bool degenerate = false;
  /// Farkas certificate (nu; lam) for PrimalInfeasible, ray x for DualInfeasible.
  Vec certificate;

  bool ok() const { return status == QpStatus::Solved; }
};

struct QpSettings {
  double tol = 1e-8;
  int max_iter = 100;
  double primal_reg = 1e-11;
  double dual_reg = 1e-11;
  int refine_steps = 4;
  double step_fraction = 0.99;
  double degeneracy_tol = 1e-4;
  double infeasibility_tol = 1e-7;
};

/// Interior warm start (all of x, nu, lam, s sized to the problem).
struct WarmStart {
  Vec x, nu, lam, s;
};

/// Reusable factorization storage. Caches the symbolic analysis while the KKT
/// sparsity pattern stays the same between solves. Not thread-safe; one per worker.
class QpWorkspace {
public:
  QpWorkspace();
  ~QpWorkspace();
  QpWorkspace(QpWorkspace&&) noexcept;
  QpWorkspace& operator=(QpWorkspace&&) noexcept;

  std::size_t symbolic_analyses() const;

  struct Impl;
  Impl& impl() { return *impl_; }

private:
  std::unique_ptr<Impl> impl_;
};

QpSolution solve_qp(const QpProblem& qp, const QpSettings& settings = {},
                    QpWorkspace* workspace = nullptr, const WarmStart* warm = nullptr);

/// Reverse-mode sensitivities of a solved QP for a loss L(x*).
///
/// Solves the adjoint of the linearised KKT system at the solution; data
/// gradients are then rank-one outer products available entry by entry.
struct QpAdjoint {
  Vec x, nu, lam;
  Vec dx;          ///< adjoint primal direction
  Vec dnu;         ///< adjoint equality direction
  Vec dlam;        ///< diag(lam) times the adjoint inequality direction
  bool ill_conditioned = false;  ///< refinement could not resolve the unregularised system
  double residual = 0.0;

  double d_q(int i) const { return dx[i]; }
  double d_beq(int i) const { return -dnu[i]; }
  double d_h(int i) const { return -dlam[i]; }
  double d_P(int r, int c) const { return 0.5 * (dx[r] * x[c] + x[r] * dx[c]); }
  double d_Aeq(int r, int c) const { return dnu[r] * x[c] + nu[r] * dx[c]; }
  double d_G(int r, int c) const { return dlam[r] * x[c] + lam[r] * dx[c]; }

  struct Dense {
    Mat P, A_eq, G;
    Vec q, b_eq, h;
  };
  /// Full dense gradient matrices (for small problems and cross-checks).
  Dense dense() const;
};

/// `dl_dx` is dL/dx*, sized num_vars. `reg` regularises the KKT matrix.
QpAdjoint qp_adjoint(const QpProblem& qp, const QpSolution& sol, const Vec& dl_dx,
                     double reg = 1e-8, QpWorkspace* workspace = nullptr);

/// Text dump: header line, then sections P, q, A_eq, b_eq, G, h in this order.
/// Matrices are written as "rows cols nnz" followed by one "row col value"
/// line per stored entry in column-major order; vectors as "n" and one value per line.
void dump_problem(const QpProblem& qp, std::ostream& out);
QpProblem read_problem_dump(std::istream& in);

}  // namespace kenmpc::ocp
