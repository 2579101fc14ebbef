#include "doctest.h"

#include "kenmpc/gradtape.hpp"
#include "oracles.hpp"

#include <vector>

using namespace kenmpc;
using namespace kenmpc::tape;
using koopman::Dims;
using koopman::Model;

namespace {

Model small_random_model(Rng& rng) {
  Dims d;
  d.hidden = {6, 5};
  Model m = koopman::init_model(d, 5.0, rng);
  std::uniform_real_distribution<double> U(-0.4, 0.4);
  for (Mat* M : {&m.A, &m.B, &m.C, &m.D, &m.E})
    for (Eigen::Index i = 0; i < M->size(); ++i) M->data()[i] = U(rng);
  return m;
}

Mat random_mat(Rng& rng, int r, int c) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = U(rng);
  return m;
}

}  // namespace

TEST_CASE("record_forward matches untaped evaluation") {
  Rng rng(1);
  Model m = small_random_model(rng);
  const Mat x = random_mat(rng, 4, 3);  // three batch columns
  const Mat u0 = random_mat(rng, 4, 3), u1 = random_mat(rng, 4, 3);

  SUBCASE("encode") {
    Program prog{{{Op::Encode, {0}}}, {1}};
    const Mat inputs[] = {x};
    Recording rec = record_forward(m, inputs, prog);
    CHECK((rec.outputs[0] - m.encoder.forward_batch(x)).cwiseAbs().maxCoeff() == 0.0);
    for (int c = 0; c < 3; ++c)
      CHECK((rec.outputs[0].col(c) - koopman::encode(m, x.col(c))).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("two-step rollout") {
    // r0=x r1=u0 r2=u1 | r3=z0 r4=y0 r5=z1 r6=y1 r7=z2 r8=xhat2
    Program prog{{{Op::Encode, {0}},
                  {Op::DecodeOutput, {3, 1}},
                  {Op::StepLatent, {3, 1}},
                  {Op::DecodeOutput, {5, 2}},
                  {Op::StepLatent, {5, 2}},
                  {Op::DecodeState, {7}}},
                 {4, 6, 8}};
    const Mat inputs[] = {x, u0, u1};
    Recording rec = record_forward(m, inputs, prog);
    auto plain = evaluate(m, inputs, prog);
    REQUIRE(plain.size() == 3);
    for (int k = 0; k < 3; ++k) CHECK((rec.outputs[k] - plain[k]).cwiseAbs().maxCoeff() == 0.0);
    for (int c = 0; c < 3; ++c) {
      std::vector<Vec> us{u0.col(c), u1.col(c)};
      koopman::Rollout r = koopman::rollout(m, x.col(c), us);
      CHECK((rec.outputs[0].col(c) - r.outputs[0]).cwiseAbs().maxCoeff() < 1e-14);
      CHECK((rec.outputs[1].col(c) - r.outputs[1]).cwiseAbs().maxCoeff() < 1e-14);
      CHECK((rec.outputs[2].col(c) - r.predictions[2]).cwiseAbs().maxCoeff() < 1e-14);
    }
  }
  SUBCASE("upscale is rejected as unsupported") {
    Program prog{{{Op::Upscale, {0}}}, {1}};
    const Mat inputs[] = {x};
    CHECK_THROWS_AS(record_forward(m, inputs, prog), UnsupportedPrimitive);
  }
  SUBCASE("malformed programs") {
    const Mat inputs[] = {x};
    CHECK_THROWS_AS(record_forward(m, inputs, Program{{{Op::Encode, {5}}}, {1}}), ContractViolation);
    CHECK_THROWS_AS(record_forward(m, inputs, Program{{{Op::StepLatent, {0}}}, {1}}), ContractViolation);
  }
}

TEST_CASE("backward: encoder bias gradient of z0.z0 with a zero encoder matches finite differences") {
  Model m = koopman::zero_model(Dims{}, 5.0);
  Rng rng(2);
  const Vec x = random_mat(rng, 4, 1);
  const Vec theta = koopman::flatten(m).values();
  const koopman::ParamLayout lay(m.dims);
  auto program = [&](Tape& t) {
    const ModelNodes nodes = register_model(t, m.dims);
    const NodeId z = encode(t, nodes, t.constant(x));
    return t.sum_squares(z);
  };
  Tape t(theta);
  const NodeId l = program(t);
  const std::pair<NodeId, Mat> seed{l, Mat::Ones(1, 1)};
  const Vec g = t.backward(std::span(&seed, 1));
  const double h = 1e-5;
  for (std::size_t l2 = 0; l2 < lay.enc_biases.size(); ++l2) {
    for (std::size_t i = 0; i < lay.enc_biases[l2].size(); ++i) {
      const auto k = static_cast<Eigen::Index>(lay.enc_biases[l2].offset + i);
      Vec p = theta;
      p[k] += h;
      Tape tp(p);
      const double fp = tp.value(program(tp))(0, 0);
      p[k] -= 2 * h;
      Tape tm(p);
      const double fm = tm.value(program(tm))(0, 0);
      CHECK(g[k] == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-6));
    }
  }
}

TEST_CASE("backward: linear loss q'(Az + Bu) has dL/dA = q z' and dL/dB = q u'") {
  Rng rng(3);
  Model m = small_random_model(rng);
  const Vec z = random_mat(rng, 10, 1), u = random_mat(rng, 4, 1), q = random_mat(rng, 10, 1);
  Tape t(koopman::flatten(m).values());
  const ModelNodes nodes = register_model(t, m.dims);
  const NodeId zn = step_latent(t, nodes, t.constant(z), t.constant(u));
  const NodeId l = t.dot(zn, t.constant(q));
  const std::pair<NodeId, Mat> seed{l, Mat::Ones(1, 1)};
  const Vec g = t.backward(std::span(&seed, 1));
  const koopman::ParamLayout lay(m.dims);
  for (int r = 0; r < 10; ++r) {
    for (int c = 0; c < 10; ++c) CHECK(g[static_cast<Eigen::Index>(lay.A.at(r, c))] == doctest::Approx(q[r] * z[c]));
    for (int c = 0; c < 4; ++c) CHECK(g[static_cast<Eigen::Index>(lay.B.at(r, c))] == doctest::Approx(q[r] * u[c]));
  }
  // The loss does not touch the encoder, C, D or E: exact zeros.
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(lay.A.offset); ++i) CHECK(g[i] == 0.0);
  for (Eigen::Index i = static_cast<Eigen::Index>(lay.C.offset); i < g.size(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("backward visits every node once and leaves primal values untouched") {
  Rng rng(4);
  Model m = small_random_model(rng);
  Tape t(koopman::flatten(m).values());
  const ModelNodes nodes = register_model(t, m.dims);
  const NodeId u = t.constant(random_mat(rng, 4, 2));
  const NodeId us[] = {u, u, u};
  TapedRollout r = rollout(t, nodes, t.constant(random_mat(rng, 4, 2)), us);
  const NodeId l = t.sum_squares(r.predictions.back());
  std::vector<Mat> before;
  for (std::size_t i = 0; i < t.size(); ++i) before.push_back(t.value(static_cast<NodeId>(i)));
  const std::pair<NodeId, Mat> seed{l, Mat::Ones(1, 1)};
  t.backward(std::span(&seed, 1));
  CHECK(t.last_visit_count() == t.size());
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(t.value(static_cast<NodeId>(i)) == before[i]);
}

TEST_CASE("seed mismatch is rejected") {
  Rng rng(5);
  Model m = small_random_model(rng);
  Program prog{{{Op::Encode, {0}}}, {1}};
  const Mat inputs[] = {random_mat(rng, 4, 2)};
  Recording rec = record_forward(m, inputs, prog);
  const Mat wrong_shape[] = {Mat::Ones(10, 1)};
  CHECK_THROWS_AS(backward(rec, wrong_shape), ContractViolation);
  const Mat too_many[] = {Mat::Ones(10, 2), Mat::Ones(10, 2)};
  CHECK_THROWS_AS(backward(rec, too_many), ContractViolation);
  const Mat ok[] = {Mat::Ones(10, 2)};
  CHECK(backward(rec, ok).size() == koopman::flatten(m).size());
}

TEST_CASE("gradient of a sum of losses is the sum of gradients") {
  Rng rng(6);
  Model m = small_random_model(rng);
  const Mat x = random_mat(rng, 4, 3), u = random_mat(rng, 4, 3);
  // r0=x r1=u | r2=z r3=y r4=z+ r5=xhat | r6=|y|^2 r7=|xhat|^2 r8=r6+r7
  Program prog{{{Op::Encode, {0}},
                {Op::DecodeOutput, {2, 1}},
                {Op::StepLatent, {2, 1}},
                {Op::DecodeState, {4}},
                {Op::SumSquares, {3}},
                {Op::SumSquares, {5}},
                {Op::Add, {6, 7}}},
               {6, 7, 8}};
  const Mat inputs[] = {x, u};
  const Mat one = Mat::Ones(1, 1), zero = Mat::Zero(1, 1);
  Recording rec = record_forward(m, inputs, prog);
  const Mat s_total[] = {zero, zero, one};
  const Vec g_total = backward(rec, s_total).values();
  const Mat s_a[] = {one, zero, zero};
  const Vec g_a = backward(rec, s_a).values();
  const Mat s_b[] = {zero, one, zero};
  const Vec g_b = backward(rec, s_b).values();
  CHECK((g_total - g_a - g_b).cwiseAbs().maxCoeff() < 1e-12 * (1.0 + g_total.cwiseAbs().maxCoeff()));
}

TEST_CASE("check_gradients") {
  Rng rng(7);
  Model m = small_random_model(rng);
  const Vec theta = koopman::flatten(m).values();
  const Mat x = random_mat(rng, 4, 2), u = random_mat(rng, 4, 2);

  SUBCASE("smooth model program") {
    auto program = [&](Tape& t) {
      const ModelNodes nodes = register_model(t, m.dims);
      const NodeId un = t.constant(u);
      const NodeId us[] = {un, un};
      TapedRollout r = rollout(t, nodes, t.constant(x), us);
      return t.add(t.sum_squares(r.predictions.back()), t.sum_squares(r.outputs.back()));
    };
    auto rep = check_gradients(program, theta, 1e-4, 200, rng);
    CHECK(rep.passed);
    CHECK(rep.max_rel_error <= 1e-4);
    CHECK(rep.indices.size() == 200);
  }
  SUBCASE("constant program has zero gradients") {
    auto program = [&](Tape& t) { return t.sum(t.constant(x)); };
    auto rep = check_gradients(program, theta, 1e-4, 50, rng);
    CHECK(rep.max_abs_error == 0.0);
    Tape t(theta);
    const NodeId l = program(t);
    const std::pair<NodeId, Mat> seed{l, Mat::Ones(1, 1)};
    CHECK(t.backward(std::span(&seed, 1)).isZero(0.0));
  }
  SUBCASE("tanh saturation") {
    Model big = m;
    const Mat x_big = 10.0 * x.array().sign().matrix();
    auto program = [&](Tape& t) {
      const ModelNodes nodes = register_model(t, big.dims);
      return t.sum_squares(encode(t, nodes, t.constant(x_big)));
    };
    auto rep = check_gradients(program, koopman::flatten(big).values(), 1e-4, 100, rng);
    CHECK(rep.passed);
  }
}

TEST_CASE("every primitive passes finite-difference checks") {
  Rng rng(8);
  for (const auto& c : oracles::check_all_primitives(rng, 20, 1e-4)) {
    INFO(c.name << " max rel error " << c.max_rel_error);
    CHECK(c.passed);
  }
}

TEST_CASE("sparse_affine gathers column-major and adds the offset") {
  Tape t(Vec::Zero(1));
  Mat a(2, 2);
  a << 1, 2, 3, 4;  // column-major vec: 1 3 2 4
  const NodeId in[] = {t.constant(a)};
  auto S = std::make_shared<SparseMat>(2, 4);
  S->insert(0, 1) = 1.0;  // picks 3
  S->insert(1, 2) = 2.0;  // picks 2, doubled
  Vec off(2);
  off << 10.0, 20.0;
  const NodeId y = t.sparse_affine(in, S, off);
  CHECK(t.value(y)(0, 0) == 13.0);
  CHECK(t.value(y)(1, 0) == 24.0);
}
