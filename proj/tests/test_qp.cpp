#include "doctest.h"

#include "kenmpc/qp.hpp"
#include "oracles.hpp"

#include <sstream>

using namespace kenmpc;
using namespace kenmpc::ocp;

namespace {

SparseMat sparse(const Mat& m) { return m.sparseView(); }

QpProblem box_problem(const Mat& P, const Vec& q, const Vec& lo, const Vec& hi) {
  const int n = static_cast<int>(q.size());
  QpProblem qp;
  qp.P = sparse(P);
  qp.q = q;
  qp.A_eq.resize(0, n);
  qp.b_eq.resize(0);
  Mat G(2 * n, n);
  G << Mat::Identity(n, n), -Mat::Identity(n, n);
  qp.G = sparse(G);
  qp.h.resize(2 * n);
  qp.h << hi, -lo;
  return qp;
}

double perturbed_objective_x(const QpProblem& qp, const std::function<void(QpProblem&, double)>& perturb,
                             const Vec& w, double h) {
  QpProblem a = qp, b = qp;
  perturb(a, h);
  perturb(b, -h);
  QpSettings s;
  s.tol = 1e-12;
  s.max_iter = 200;
  const QpSolution sa = solve_qp(a, s), sb = solve_qp(b, s);
  REQUIRE(sa.ok());
  REQUIRE(sb.ok());
  return (w.dot(sa.x) - w.dot(sb.x)) / (2 * h);
}

}  // namespace

TEST_CASE("clipped parabola: min (u-2)^2 s.t. 0 <= u <= 1") {
  Mat P(1, 1);
  P << 2.0;
  Vec q(1), lo(1), hi(1);
  q << -4.0;
  lo << 0.0;
  hi << 1.0;
  const QpProblem qp = box_problem(P, q, lo, hi);
  const QpSolution s = solve_qp(qp);
  REQUIRE(s.ok());
  CHECK(s.x[0] == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(s.lam[0] == doctest::Approx(2.0).epsilon(1e-7));
  CHECK(std::abs(s.lam[1]) < 1e-7);
  CHECK(s.residuals.max() <= 1e-8);
  CHECK_FALSE(s.degenerate);
}

TEST_CASE("unconstrained quadratic") {
  QpProblem qp;
  Mat P = Mat::Identity(2, 2) * 2.0;
  qp.P = sparse(P);
  qp.q = Vec(2);
  qp.q << -2.0, -4.0;
  qp.A_eq.resize(0, 2);
  qp.G.resize(0, 2);
  const QpSolution s = solve_qp(qp);
  REQUIRE(s.ok());
  CHECK(s.x[0] == doctest::Approx(1.0));
  CHECK(s.x[1] == doctest::Approx(2.0));
  CHECK(s.objective == doctest::Approx(-5.0));
}

TEST_CASE("equality constrained least norm") {
  // min |x|^2 s.t. x0 + x1 + x2 = 3 -> x = (1,1,1), nu = -2.
  QpProblem qp;
  qp.P = sparse(Mat::Identity(3, 3) * 2.0);
  qp.q = Vec::Zero(3);
  qp.A_eq = sparse(Mat::Ones(1, 3));
  qp.b_eq = Vec::Constant(1, 3.0);
  qp.G.resize(0, 3);
  const QpSolution s = solve_qp(qp);
  REQUIRE(s.ok());
  CHECK((s.x - Vec::Ones(3)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(s.nu[0] == doctest::Approx(-2.0));
}

TEST_CASE("random strictly convex QPs agree with active-set enumeration") {
  Rng rng(42);
  int checked = 0;
  for (int trial = 0; trial < 150; ++trial) {
    std::uniform_int_distribution<int> N(2, 20), M(0, 10), Pn(0, 3);
    const int n = N(rng);
    const int p = std::min(Pn(rng), n - 1);
    const int m = M(rng);
    const QpProblem qp = oracles::random_qp(rng, n, p, m);
    const QpSolution s = solve_qp(qp);
    REQUIRE(s.ok());
    const KktResiduals r = kkt_residuals(qp, s.x, s.nu, s.lam);
    CHECK(r.stationarity <= 1e-8);
    CHECK(r.primal <= 1e-8);
    CHECK(r.dual <= 1e-8);
    CHECK(r.complementarity <= 1e-8);
    const auto ref = oracles::enumerate_active_sets(qp);
    REQUIRE(ref.found);
    CHECK(std::abs(s.objective - ref.objective) <= 1e-6 * std::max(1.0, std::abs(ref.objective)));
    ++checked;
  }
  CHECK(checked == 150);
}

TEST_CASE("infeasibility and unboundedness are reported") {
  SUBCASE("primal infeasible: x <= 0 and x >= 1") {
    Mat P(1, 1);
    P << 1.0;
    Vec q = Vec::Zero(1), lo = Vec::Constant(1, 1.0), hi = Vec::Constant(1, 0.0);
    QpProblem qp = box_problem(P, q, lo, hi);
    const QpSolution s = solve_qp(qp);
    CHECK(s.status == QpStatus::PrimalInfeasible);
    REQUIRE(s.certificate.size() == 2);
    // Farkas: G' lam = 0, h' lam < 0, lam >= 0.
    CHECK(std::abs((Mat(qp.G).transpose() * s.certificate)(0)) < 1e-6);
    CHECK(qp.h.dot(s.certificate) < 0.0);
  }
  SUBCASE("dual infeasible: min -x s.t. x >= 0") {
    QpProblem qp;
    qp.P.resize(1, 1);
    qp.q = Vec::Constant(1, -1.0);
    qp.A_eq.resize(0, 1);
    qp.G = sparse(-Mat::Identity(1, 1));
    qp.h = Vec::Zero(1);
    const QpSolution s = solve_qp(qp);
    CHECK(s.status == QpStatus::DualInfeasible);
    REQUIRE(s.certificate.size() == 1);
    CHECK(s.certificate[0] > 0.0);
  }
}

TEST_CASE("workspace reuses the symbolic analysis and warm starts converge") {
  Rng rng(3);
  const QpProblem qp = oracles::random_qp(rng, 12, 2, 8);
  QpWorkspace ws;
  const QpSolution a = solve_qp(qp, {}, &ws);
  QpProblem shifted = qp;
  shifted.q.array() += 0.01;
  WarmStart warm{a.x, a.nu, a.lam, a.s};
  const QpSolution b = solve_qp(shifted, {}, &ws, &warm);
  REQUIRE(a.ok());
  REQUIRE(b.ok());
  CHECK(ws.symbolic_analyses() == 1);
  const QpSolution cold = solve_qp(shifted);
  CHECK(std::abs(cold.objective - b.objective) < 1e-7);
}

TEST_CASE("validate") {
  Rng rng(4);
  QpProblem qp = oracles::random_qp(rng, 4, 1, 3);
  CHECK_NOTHROW(qp.validate());
  QpProblem bad = qp;
  bad.P.coeffRef(0, 1) += 1.0;  // asymmetric
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad = qp;
  bad.P = sparse(-Mat::Identity(4, 4));
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad = qp;
  bad.h.resize(2);
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad = qp;
  bad.layout.add("a", 1, 3);
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad.layout.add("b", 1, 1);
  CHECK_NOTHROW(bad.validate());
}

TEST_CASE("layout") {
  VariableLayout lay;
  CHECK(lay.add("u", 3, 2) == 0);
  CHECK(lay.add("z", 4, 5) == 6);
  CHECK(lay.total() == 26);
  CHECK(lay.get("z").at(1, 2) == 13);
  CHECK(lay.covers_exactly(26));
  CHECK_FALSE(lay.covers_exactly(27));
  CHECK_THROWS_AS(lay.add("u", 1, 1), ContractViolation);
  CHECK_THROWS_AS(lay.get("nope"), ContractViolation);
}

TEST_CASE("adjoint sensitivities match finite differences") {
  Rng rng(5);
  int tested = 0;
  for (int trial = 0; trial < 20 && tested < 8; ++trial) {
    const QpProblem qp = oracles::random_qp(rng, 6, 1, 6);
    QpSettings st;
    st.tol = 1e-12;
    st.max_iter = 200;
    const QpSolution s = solve_qp(qp, st);
    REQUIRE(s.ok());
    if (s.degenerate) continue;
    ++tested;
    Vec w(6);
    for (int i = 0; i < 6; ++i) w[i] = std::sin(1.0 + i + trial);
    const QpAdjoint adj = qp_adjoint(qp, s, w);
    REQUIRE_FALSE(adj.ill_conditioned);
    const double h = 1e-6;
    auto close = [](double a, double b) { return std::abs(a - b) <= 1e-4 * std::max(1.0, std::abs(b)); };
    for (int i = 0; i < 6; ++i) {
      const double fd = perturbed_objective_x(qp, [i](QpProblem& p, double d) { p.q[i] += d; }, w, h);
      CHECK(close(adj.d_q(i), fd));
    }
    for (int i = 0; i < 6; ++i) {
      const double fd = perturbed_objective_x(qp, [i](QpProblem& p, double d) { p.h[i] += d; }, w, h);
      CHECK(close(adj.d_h(i), fd));
    }
    {
      const double fd = perturbed_objective_x(qp, [](QpProblem& p, double d) { p.b_eq[0] += d; }, w, h);
      CHECK(close(adj.d_beq(0), fd));
    }
    for (int c = 0; c < 6; ++c) {
      const double fd = perturbed_objective_x(
          qp, [c](QpProblem& p, double d) { p.G.coeffRef(2, c) += d; }, w, h);
      CHECK(close(adj.d_G(2, c), fd));
      const double fda = perturbed_objective_x(
          qp, [c](QpProblem& p, double d) { p.A_eq.coeffRef(0, c) += d; }, w, h);
      CHECK(close(adj.d_Aeq(0, c), fda));
    }
    {
      // Symmetric perturbation of P(1,3) and P(3,1) together.
      const double fd = perturbed_objective_x(
          qp,
          [](QpProblem& p, double d) {
            p.P.coeffRef(1, 3) += d;
            p.P.coeffRef(3, 1) += d;
          },
          w, h);
      CHECK(close(adj.d_P(1, 3) + adj.d_P(3, 1), fd));
    }
    const auto dense = adj.dense();
    CHECK(dense.q.isApprox(adj.dx));
    CHECK(dense.G(2, 4) == doctest::Approx(adj.d_G(2, 4)));
  }
  CHECK(tested >= 5);
}

TEST_CASE("sensitivity at an interior optimum is -P^-1 and zero in a pinned coordinate") {
  Mat P(2, 2);
  P << 3.0, 1.0, 1.0, 2.0;
  Vec q(2);
  q << -1.0, -1.0;
  SUBCASE("interior") {
    QpProblem qp = box_problem(P, q, Vec::Constant(2, -10.0), Vec::Constant(2, 10.0));
    const QpSolution s = solve_qp(qp);
    REQUIRE(s.ok());
    const Mat Pinv = P.inverse();
    for (int j = 0; j < 2; ++j) {
      const QpAdjoint adj = qp_adjoint(qp, s, Vec::Unit(2, j));
      for (int i = 0; i < 2; ++i) CHECK(adj.d_q(i) == doctest::Approx(-Pinv(j, i)).epsilon(1e-6));
    }
  }
  SUBCASE("x0 pinned at its upper bound") {
    QpProblem qp = box_problem(P, q, Vec::Constant(2, -10.0), Vec::Constant(2, 10.0));
    qp.h[0] = -1.0;  // x0 <= -1, unconstrained optimum has x0 = 0.2
    const QpSolution s = solve_qp(qp);
    REQUIRE(s.ok());
    CHECK(s.x[0] == doctest::Approx(-1.0));
    const QpAdjoint adj = qp_adjoint(qp, s, Vec::Unit(2, 0));
    CHECK(std::abs(adj.d_q(0)) < 1e-6);
    CHECK(std::abs(adj.d_q(1)) < 1e-6);
  }
}

TEST_CASE("degenerate constraint is flagged") {
  // min x^2 s.t. x >= 0: the bound is weakly active (x = 0, lam = 0).
  Mat P(1, 1);
  P << 2.0;
  QpProblem qp;
  qp.P = sparse(P);
  qp.q = Vec::Zero(1);
  qp.A_eq.resize(0, 1);
  qp.G = sparse(-Mat::Identity(1, 1));
  qp.h = Vec::Zero(1);
  const QpSolution s = solve_qp(qp);
  REQUIRE(s.ok());
  CHECK(s.degenerate);
}

TEST_CASE("problem dump round trip") {
  Rng rng(6);
  const QpProblem qp = oracles::random_qp(rng, 5, 2, 4);
  std::stringstream ss;
  dump_problem(qp, ss);
  const QpProblem back = read_problem_dump(ss);
  CHECK(Mat(back.P) == Mat(qp.P));
  CHECK(back.q == qp.q);
  CHECK(Mat(back.A_eq) == Mat(qp.A_eq));
  CHECK(back.b_eq == qp.b_eq);
  CHECK(Mat(back.G) == Mat(qp.G));
  CHECK(back.h == qp.h);
  std::stringstream bad("not a dump\n");
  CHECK_THROWS(read_problem_dump(bad));
}
