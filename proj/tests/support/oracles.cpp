#include "oracles.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>

namespace oracles {

using kenmpc::ocp::QpProblem;
using kenmpc::ocp::SparseMat;
using kenmpc::tape::NodeId;
using kenmpc::tape::Tape;

namespace {

Mat random_mat(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> U(lo, hi);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = U(rng);
  return m;
}

struct PrimitiveCase {
  std::string name;
  int n_params;
  double range;
  // Builds a scalar loss; `W` supplies fixed random weights for the final reduction.
  std::function<NodeId(Tape&, const std::vector<Mat>& W)> build;
  std::vector<std::pair<int, int>> weight_shapes;
};

NodeId weighted(Tape& t, NodeId x, const Mat& w) { return t.dot(x, t.constant(w)); }

std::vector<PrimitiveCase> primitive_cases() {
  std::vector<PrimitiveCase> cs;
  cs.push_back({"constant", 4, 1.0,
                [](Tape& t, const std::vector<Mat>& W) {
                  t.param(0, 2, 2);
                  return t.sum(t.constant(W[0]));
                },
                {{2, 2}}});
  cs.push_back({"param", 6, 1.0,
                [](Tape& t, const std::vector<Mat>& W) { return weighted(t, t.param(0, 3, 2), W[0]); },
                {{3, 2}}});
  cs.push_back({"matmul", 20, 1.0,
                [](Tape& t, const std::vector<Mat>& W) {
                  return weighted(t, t.matmul(t.param(0, 3, 4), t.param(12, 4, 2)), W[0]);
                },
                {{3, 2}}});
  cs.push_back({"add", 12, 1.0,
                [](Tape& t, const std::vector<Mat>& W) {
                  return weighted(t, t.add(t.param(0, 3, 2), t.param(6, 3, 2)), W[0]);
                },
                {{3, 2}}});
  cs.push_back({"add_broadcast", 15, 1.0,
                [](Tape& t, const std::vector<Mat>& W) {
                  return weighted(t, t.add(t.param(0, 3, 4), t.param(12, 3, 1)), W[0]);
                },
                {{3, 4}}});
  cs.push_back({"sub", 12, 1.0,
                [](Tape& t, const std::vector<Mat>& W) {
                  return weighted(t, t.sub(t.param(0, 3, 2), t.param(6, 3, 2)), W[0]);
                },
                {{3, 2}}});
  cs.push_back({"mul", 12, 1.0,
                [](Tape& t, const std::vector<Mat>& W) {
                  return weighted(t, t.mul(t.param(0, 3, 2), t.param(6, 3, 2)), W[0]);
                },
                {{3, 2}}});
  cs.push_back({"scale", 6, 1.0,
                [](Tape& t, const std::vector<Mat>& W) {
                  return weighted(t, t.scale(t.param(0, 3, 2), -2.5), W[0]);
                },
                {{3, 2}}});
  cs.push_back({"tanh", 6, 2.0,
                [](Tape& t, const std::vector<Mat>& W) { return weighted(t, t.tanh(t.param(0, 3, 2)), W[0]); },
                {{3, 2}}});
  cs.push_back({"tanh_saturated", 6, 10.0,
                [](Tape& t, const std::vector<Mat>& W) { return weighted(t, t.tanh(t.param(0, 3, 2)), W[0]); },
                {{3, 2}}});
  cs.push_back({"sum", 6, 1.0,
                [](Tape& t, const std::vector<Mat>& W) {
                  return t.sum(t.mul(t.param(0, 3, 2), t.constant(W[0])));
                },
                {{3, 2}}});
  cs.push_back({"dot", 12, 1.0,
                [](Tape& t, const std::vector<Mat>&) { return t.dot(t.param(0, 3, 2), t.param(6, 3, 2)); },
                {}});
  cs.push_back({"sum_squares", 6, 1.0,
                [](Tape& t, const std::vector<Mat>&) { return t.sum_squares(t.param(0, 3, 2)); }, {}});
  cs.push_back({"rows", 12, 1.0,
                [](Tape& t, const std::vector<Mat>& W) { return weighted(t, t.rows(t.param(0, 4, 3), 1, 2), W[0]); },
                {{2, 3}}});
  cs.push_back({"vstack", 10, 1.0,
                [](Tape& t, const std::vector<Mat>& W) {
                  const NodeId parts[] = {t.param(0, 2, 2), t.param(4, 3, 2)};
                  return weighted(t, t.vstack(parts), W[0]);
                },
                {{5, 2}}});
  cs.push_back({"sparse_affine", 10, 1.0,
                [](Tape& t, const std::vector<Mat>& W) {
                  auto S = std::make_shared<SparseMat>(4, 10);
                  std::vector<kenmpc::ocp::Triplet> tr{{0, 0, 1.5}, {0, 7, -2.0}, {1, 3, 0.5},
                                                       {2, 9, 3.0}, {3, 4, -1.0}, {3, 5, 2.0}};
                  S->setFromTriplets(tr.begin(), tr.end());
                  const NodeId in[] = {t.param(0, 2, 3), t.param(6, 4, 1)};
                  Vec off(4);
                  off << 0.1, -0.2, 0.3, 0.0;
                  return weighted(t, t.sparse_affine(in, S, off), W[0]);
                },
                {{4, 1}}});
  cs.push_back({"opaque", 6, 1.0,
                [](Tape& t, const std::vector<Mat>& W) {
                  const NodeId x = t.param(0, 3, 2);
                  const Mat xv = t.value(x);
                  const NodeId in[] = {x};
                  const NodeId y = t.opaque(in, xv.array().sin().matrix(), [xv](const Mat& g) {
                    return std::vector<Mat>{g.cwiseProduct(Mat(xv.array().cos()))};
                  });
                  return weighted(t, y, W[0]);
                },
                {{3, 2}}});
  return cs;
}

}  // namespace

std::vector<PrimitiveCheck> check_all_primitives(Rng& rng, int points, double tolerance) {
  std::vector<PrimitiveCheck> out;
  for (const PrimitiveCase& c : primitive_cases()) {
    PrimitiveCheck pc;
    pc.name = c.name;
    for (int k = 0; k < points; ++k) {
      std::vector<Mat> W;
      for (auto [r, cc] : c.weight_shapes) W.push_back(random_mat(rng, r, cc));
      const Vec theta = random_mat(rng, c.n_params, 1, -c.range, c.range);
      auto program = [&](Tape& t) { return c.build(t, W); };
      const auto rep = kenmpc::tape::check_gradients(program, theta, tolerance,
                                                      static_cast<std::size_t>(c.n_params), rng);
      pc.max_rel_error = std::max(pc.max_rel_error, rep.max_rel_error);
      pc.passed = pc.passed && rep.passed;
      ++pc.points;
    }
    out.push_back(pc);
  }
  return out;
}

QpProblem random_qp(Rng& rng, int n, int p, int m, double mu) {
  QpProblem qp;
  const Mat L = random_mat(rng, n, n);
  const Mat P = L * L.transpose() / n + mu * Mat::Identity(n, n);
  qp.P = P.sparseView();
  qp.q = random_mat(rng, n, 1, -2.0, 2.0);
  const Vec x_feas = random_mat(rng, n, 1);
  const Mat A = random_mat(rng, p, n);
  qp.A_eq = A.sparseView();
  qp.b_eq = A * x_feas;
  const Mat G = random_mat(rng, m, n);
  qp.G = G.sparseView();
  qp.h = G * x_feas + random_mat(rng, m, 1, 0.0, 0.5);
  return qp;
}

EnumerationResult enumerate_active_sets(const QpProblem& qp, double tol) {
  const int n = qp.num_vars(), p = qp.num_eq(), m = qp.num_ineq();
  const Mat P(qp.P), A(qp.A_eq), G(qp.G);
  EnumerationResult res;
  const int max_active = std::min(m, n - p);
  // Subsets by increasing size.
  for (int size = 0; size <= max_active && !res.found; ++size) {
    std::vector<int> idx(static_cast<std::size_t>(size));
    for (int i = 0; i < size; ++i) idx[static_cast<std::size_t>(i)] = i;
    while (true) {
      ++res.subsets_tried;
      const int k = n + p + size;
      Mat K = Mat::Zero(k, k);
      Vec rhs(k);
      K.topLeftCorner(n, n) = P;
      K.block(0, n, n, p) = A.transpose();
      K.block(n, 0, p, n) = A;
      rhs.head(n) = -qp.q;
      rhs.segment(n, p) = qp.b_eq;
      for (int j = 0; j < size; ++j) {
        const int r = idx[static_cast<std::size_t>(j)];
        K.block(0, n + p + j, n, 1) = G.row(r).transpose();
        K.block(n + p + j, 0, 1, n) = G.row(r);
        rhs[n + p + j] = qp.h[r];
      }
      Eigen::FullPivLU<Mat> lu(K);
      if (lu.isInvertible()) {
        const Vec sol = lu.solve(rhs);
        const Vec x = sol.head(n);
        const Vec lam = sol.tail(size);
        const bool primal = m == 0 || (G * x - qp.h).maxCoeff() <= tol * (1.0 + qp.h.cwiseAbs().maxCoeff());
        const bool dual = size == 0 || lam.minCoeff() >= -tol;
        if (primal && dual) {
          res.found = true;
          res.x = x;
          res.objective = 0.5 * x.dot(P * x) + qp.q.dot(x);
          break;
        }
      }
      // Next combination.
      int i = size - 1;
      while (i >= 0 && idx[static_cast<std::size_t>(i)] == m - size + i) --i;
      if (i < 0) break;
      ++idx[static_cast<std::size_t>(i)];
      for (int j = i + 1; j < size; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
    }
  }
  return res;
}

Vec gae_bruteforce(const Vec& rewards, const Vec& values, const std::vector<bool>& dones,
                   double bootstrap, double gamma, double lambda) {
  const Eigen::Index T = rewards.size();
  Vec delta(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double next = (t + 1 < T) ? values[t + 1] : bootstrap;
    delta[t] = rewards[t] + (dones[static_cast<std::size_t>(t)] ? 0.0 : gamma * next) - values[t];
  }
  Vec adv = Vec::Zero(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    double weight = 1.0;
    for (Eigen::Index k = t; k < T; ++k) {
      adv[t] += weight * delta[k];
      if (dones[static_cast<std::size_t>(k)]) break;
      weight *= gamma * lambda;
    }
  }
  return adv;
}

PolishResult polish(const kenmpc::ocp::QpProblem& qp, const kenmpc::ocp::QpSolution& sol,
                    double tol) {
  const Mat P(qp.P), A(qp.A_eq), G(qp.G);
  const Eigen::Index n = P.rows(), p = A.rows(), m = G.rows();
  const Vec slack = qp.h - G * sol.x;
  std::vector<Eigen::Index> act;
  for (Eigen::Index i = 0; i < m; ++i)
    if (sol.lam[i] > slack[i]) act.push_back(i);
  const Eigen::Index k = static_cast<Eigen::Index>(act.size());
  Mat K = Mat::Zero(n + p + k, n + p + k);
  Vec r(n + p + k);
  K.topLeftCorner(n, n) = P;
  K.block(n, 0, p, n) = A;
  K.block(0, n, n, p) = A.transpose();
  r.head(n) = -qp.q;
  r.segment(n, p) = qp.b_eq;
  for (Eigen::Index j = 0; j < k; ++j) {
    K.block(n + p + j, 0, 1, n) = G.row(act[static_cast<std::size_t>(j)]);
    K.block(0, n + p + j, n, 1) = G.row(act[static_cast<std::size_t>(j)]).transpose();
    r[n + p + j] = qp.h[act[static_cast<std::size_t>(j)]];
  }
  const Vec z = K.completeOrthogonalDecomposition().solve(r);
  PolishResult out;
  out.x = z.head(n);
  out.active = static_cast<int>(k);
  const double resid = (K * z - r).lpNorm<Eigen::Infinity>();
  const double viol = m > 0 ? (G * out.x - qp.h).maxCoeff() : 0.0;
  const double lam_min = k > 0 ? z.tail(k).minCoeff() : 0.0;
  out.ok = resid <= tol * (1.0 + r.lpNorm<Eigen::Infinity>()) && viol <= tol && lam_min >= -tol;
  return out;
}

namespace {

struct PolishedInput {
  bool ok = false;
  Vec u0;
  std::vector<bool> active;
};

PolishedInput polished_first_input(const kenmpc::koopman::Model& m, const Vec& x, double storage,
                                   std::span<const double> prices, const kenmpc::ocp::OcpConfig& cfg) {
  using namespace kenmpc::ocp;
  const BuiltOcp b = build_ocp(m, x, storage, prices, cfg, ConstraintMode::SlackPenalty);
  QpSettings st;
  st.tol = 1e-10;
  st.max_iter = 200;
  const QpSolution s = solve_qp(b.qp, st);
  PolishedInput out;
  if (!s.ok()) return out;
  const PolishResult pr = polish(b.qp, s);
  if (!pr.ok) return out;
  out.ok = true;
  out.u0 = pr.x.segment(b.first_input_offset(), b.n_input);
  const Vec slack = b.qp.h - b.qp.G * s.x;
  out.active.resize(static_cast<std::size_t>(slack.size()));
  for (Eigen::Index i = 0; i < slack.size(); ++i) out.active[static_cast<std::size_t>(i)] = s.lam[i] > slack[i];
  return out;
}

}  // namespace

OcpGradientCheck check_ocp_gradient(const kenmpc::koopman::Model& model15, const Vec& x_obs,
                                    double storage, std::span<const double> prices,
                                    const kenmpc::ocp::OcpConfig& config, const Vec& w, Rng& rng,
                                    int samples, double h) {
  using namespace kenmpc;
  using namespace kenmpc::ocp;
  OcpGradientCheck out;
  const BuiltOcp b = build_ocp(model15, x_obs, storage, prices, config, ConstraintMode::SlackPenalty);
  QpSettings st;
  st.tol = 1e-10;
  st.max_iter = 200;
  const QpSolution s = solve_qp(b.qp, st);
  if (!s.ok()) return out;
  out.solved = true;
  out.degenerate = solution_degenerate(b, s);
  if (out.degenerate) return out;
  const PolishedInput base = polished_first_input(model15, x_obs, storage, prices, config);
  if (!base.ok) {
    out.solved = false;
    return out;
  }
  const OcpGradient g = grad_ocp(model15, x_obs, b, s, w);
  out.ill_conditioned = g.ill_conditioned;

  const Vec theta = koopman::flatten(model15).values();
  std::uniform_int_distribution<Eigen::Index> pick(0, theta.size() - 1);
  std::vector<double> fd, an;
  for (int k = 0; k < samples; ++k) {
    const Eigen::Index i = pick(rng);
    Vec tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    const auto mp = koopman::unflatten(koopman::ParamVector(tp), model15.dims, model15.dt_minutes);
    const auto mm = koopman::unflatten(koopman::ParamVector(tm), model15.dims, model15.dt_minutes);
    const PolishedInput up = polished_first_input(mp, x_obs, storage, prices, config);
    const PolishedInput dn = polished_first_input(mm, x_obs, storage, prices, config);
    if (!up.ok || !dn.ok || up.active != base.active || dn.active != base.active) {
      ++out.skipped;
      continue;
    }
    fd.push_back((w.dot(up.u0) - w.dot(dn.u0)) / (2.0 * h));
    an.push_back(g.d_theta[i]);
  }
  out.samples = static_cast<int>(fd.size());
  double err = 0.0, scale = 0.0;
  for (std::size_t k = 0; k < fd.size(); ++k) {
    err = std::max(err, std::abs(fd[k] - an[k]));
    scale = std::max(scale, std::abs(fd[k]));
  }
  out.fd_scale = scale;
  out.max_rel_error = err / std::max(scale, 1e-8);
  return out;
}

}  // namespace oracles
