#include "kenmpc/gradtape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kenmpc::tape {

Tape::Tape(Vec params) : params_(std::move(params)) {}

NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Tape::Node& Tape::at(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
    throw ContractViolation("tape: invalid node id " + std::to_string(id));
  return nodes_[static_cast<std::size_t>(id)];
}

NodeId Tape::constant(Mat value) { return push(Node{Primitive::Constant, std::move(value), {}}); }

NodeId Tape::param(std::size_t offset, int rows, int cols) {
  require(offset + static_cast<std::size_t>(rows) * cols <= static_cast<std::size_t>(params_.size()),
          "tape: param block out of range");
  Mat v(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      v(r, c) = params_[static_cast<Eigen::Index>(offset + static_cast<std::size_t>(r) * cols + c)];
  Node n{Primitive::Param, std::move(v), {}};
  n.offset = offset;
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Mat& va = at(a).value;
  const Mat& vb = at(b).value;
  require(va.cols() == vb.rows(), "tape: matmul shape mismatch");
  return push(Node{Primitive::MatMul, va * vb, {a, b}});
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Mat& va = at(a).value;
  const Mat& vb = at(b).value;
  require(va.rows() == vb.rows() && (va.cols() == vb.cols() || vb.cols() == 1),
          "tape: add shape mismatch");
  Mat v = (va.cols() == vb.cols()) ? Mat(va + vb) : Mat(va.colwise() + vb.col(0));
  return push(Node{Primitive::Add, std::move(v), {a, b}});
}

NodeId Tape::sub(NodeId a, NodeId b) {
  const Mat& va = at(a).value;
  const Mat& vb = at(b).value;
  require(va.rows() == vb.rows() && va.cols() == vb.cols(), "tape: sub shape mismatch");
  return push(Node{Primitive::Sub, va - vb, {a, b}});
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Mat& va = at(a).value;
  const Mat& vb = at(b).value;
  require(va.rows() == vb.rows() && va.cols() == vb.cols(), "tape: mul shape mismatch");
  return push(Node{Primitive::Mul, va.cwiseProduct(vb), {a, b}});
}

NodeId Tape::scale(NodeId a, double c) {
  Node n{Primitive::Scale, at(a).value * c, {a}};
  n.scalar = c;
  return push(std::move(n));
}

NodeId Tape::tanh(NodeId a) { return push(Node{Primitive::Tanh, at(a).value.array().tanh(), {a}}); }

NodeId Tape::sum(NodeId a) {
  return push(Node{Primitive::Sum, Mat::Constant(1, 1, at(a).value.sum()), {a}});
}

NodeId Tape::dot(NodeId a, NodeId b) {
  const Mat& va = at(a).value;
  const Mat& vb = at(b).value;
  require(va.rows() == vb.rows() && va.cols() == vb.cols(), "tape: dot shape mismatch");
  return push(Node{Primitive::Dot, Mat::Constant(1, 1, va.cwiseProduct(vb).sum()), {a, b}});
}

NodeId Tape::sum_squares(NodeId a) {
  return push(Node{Primitive::SumSquares, Mat::Constant(1, 1, at(a).value.squaredNorm()), {a}});
}

NodeId Tape::rows(NodeId a, int start, int count) {
  const Mat& va = at(a).value;
  require(start >= 0 && count >= 0 && start + count <= va.rows(), "tape: rows out of range");
  Node n{Primitive::Rows, va.middleRows(start, count), {a}};
  n.start = start;
  return push(std::move(n));
}

NodeId Tape::vstack(std::span<const NodeId> parts) {
  require(!parts.empty(), "tape: vstack of nothing");
  const Eigen::Index cols = at(parts.front()).value.cols();
  Eigen::Index rows = 0;
  for (NodeId p : parts) {
    require(at(p).value.cols() == cols, "tape: vstack column mismatch");
    rows += at(p).value.rows();
  }
  Mat v(rows, cols);
  Eigen::Index r = 0;
  for (NodeId p : parts) {
    const Mat& vp = at(p).value;
    v.middleRows(r, vp.rows()) = vp;
    r += vp.rows();
  }
  return push(Node{Primitive::VStack, std::move(v), {parts.begin(), parts.end()}});
}

NodeId Tape::sparse_affine(std::span<const NodeId> inputs, std::shared_ptr<const SparseMat> S,
                           Vec offset) {
  require(S != nullptr, "tape: sparse_affine needs a matrix");
  Eigen::Index total = 0;
  for (NodeId p : inputs) total += at(p).value.size();
  require(S->cols() == total, "tape: sparse_affine column count mismatch");
  require(S->rows() == offset.size(), "tape: sparse_affine offset size mismatch");
  Vec stacked(total);
  Eigen::Index k = 0;
  for (NodeId p : inputs) {
    const Mat& vp = at(p).value;
    stacked.segment(k, vp.size()) = Eigen::Map<const Vec>(vp.data(), vp.size());
    k += vp.size();
  }
  Node n{Primitive::SparseAffine, Mat((*S) * stacked + offset), {inputs.begin(), inputs.end()}};
  n.sparse = std::move(S);
  return push(std::move(n));
}

NodeId Tape::opaque(std::span<const NodeId> inputs, Mat value, VjpFn vjp) {
  require(static_cast<bool>(vjp), "tape: opaque node needs a vjp");
  for (NodeId p : inputs) (void)at(p);
  Node n{Primitive::Opaque, std::move(value), {inputs.begin(), inputs.end()}};
  n.vjp = std::move(vjp);
  return push(std::move(n));
}

void Tape::accumulate(std::vector<Mat>& grads, NodeId id, const Mat& g) const {
  Mat& slot = grads[static_cast<std::size_t>(id)];
  if (slot.size() == 0)
    slot = g;
  else
    slot += g;
}

Vec Tape::backward(std::span<const std::pair<NodeId, Mat>> seeds) {
  grads_.assign(nodes_.size(), Mat());
  for (const auto& [id, g] : seeds) {
    const Mat& v = at(id).value;
    if (g.rows() != v.rows() || g.cols() != v.cols())
      throw ContractViolation("tape: seed gradient shape does not match node " + std::to_string(id));
    accumulate(grads_, id, g);
  }
  Vec dparams = Vec::Zero(params_.size());
  visits_ = 0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    ++visits_;
    const Mat& g = grads_[i];
    if (g.size() == 0) continue;
    const Node& n = nodes_[i];
    switch (n.kind) {
      case Primitive::Constant:
        break;
      case Primitive::Param: {
        const Eigen::Index cols = n.value.cols();
        for (Eigen::Index r = 0; r < n.value.rows(); ++r)
          for (Eigen::Index c = 0; c < cols; ++c)
            dparams[static_cast<Eigen::Index>(n.offset) + r * cols + c] += g(r, c);
        break;
      }
      case Primitive::MatMul: {
        const Mat& a = at(n.inputs[0]).value;
        const Mat& b = at(n.inputs[1]).value;
        accumulate(grads_, n.inputs[0], g * b.transpose());
        accumulate(grads_, n.inputs[1], a.transpose() * g);
        break;
      }
      case Primitive::Add: {
        accumulate(grads_, n.inputs[0], g);
        const Mat& b = at(n.inputs[1]).value;
        if (b.cols() == g.cols())
          accumulate(grads_, n.inputs[1], g);
        else
          accumulate(grads_, n.inputs[1], g.rowwise().sum());
        break;
      }
      case Primitive::Sub:
        accumulate(grads_, n.inputs[0], g);
        accumulate(grads_, n.inputs[1], -g);
        break;
      case Primitive::Mul:
        accumulate(grads_, n.inputs[0], g.cwiseProduct(at(n.inputs[1]).value));
        accumulate(grads_, n.inputs[1], g.cwiseProduct(at(n.inputs[0]).value));
        break;
      case Primitive::Scale:
        accumulate(grads_, n.inputs[0], g * n.scalar);
        break;
      case Primitive::Tanh:
        accumulate(grads_, n.inputs[0],
                   g.cwiseProduct(Mat((1.0 - n.value.array().square()).matrix())));
        break;
      case Primitive::Sum: {
        const Mat& a = at(n.inputs[0]).value;
        accumulate(grads_, n.inputs[0], Mat::Constant(a.rows(), a.cols(), g(0, 0)));
        break;
      }
      case Primitive::Dot:
        accumulate(grads_, n.inputs[0], g(0, 0) * at(n.inputs[1]).value);
        accumulate(grads_, n.inputs[1], g(0, 0) * at(n.inputs[0]).value);
        break;
      case Primitive::SumSquares:
        accumulate(grads_, n.inputs[0], 2.0 * g(0, 0) * at(n.inputs[0]).value);
        break;
      case Primitive::Rows: {
        const Mat& a = at(n.inputs[0]).value;
        Mat full = Mat::Zero(a.rows(), a.cols());
        full.middleRows(n.start, g.rows()) = g;
        accumulate(grads_, n.inputs[0], full);
        break;
      }
      case Primitive::VStack: {
        Eigen::Index r = 0;
        for (NodeId p : n.inputs) {
          const Eigen::Index rows = at(p).value.rows();
          accumulate(grads_, p, g.middleRows(r, rows));
          r += rows;
        }
        break;
      }
      case Primitive::SparseAffine: {
        const Vec gin = n.sparse->transpose() * Eigen::Map<const Vec>(g.data(), g.size());
        Eigen::Index k = 0;
        for (NodeId p : n.inputs) {
          const Mat& vp = at(p).value;
          Mat gp = Eigen::Map<const Mat>(gin.data() + k, vp.rows(), vp.cols());
          accumulate(grads_, p, gp);
          k += vp.size();
        }
        break;
      }
      case Primitive::Opaque: {
        std::vector<Mat> gin = n.vjp(g);
        if (gin.size() != n.inputs.size())
          throw ContractViolation("tape: opaque vjp returned wrong number of gradients");
        for (std::size_t k = 0; k < gin.size(); ++k) {
          const Mat& vp = at(n.inputs[k]).value;
          if (gin[k].rows() != vp.rows() || gin[k].cols() != vp.cols())
            throw ContractViolation("tape: opaque vjp gradient shape mismatch");
          accumulate(grads_, n.inputs[k], gin[k]);
        }
        break;
      }
    }
  }
  return dparams;
}

Mat Tape::grad(NodeId id) const {
  const Mat& v = at(id).value;
  if (static_cast<std::size_t>(id) >= grads_.size() || grads_[static_cast<std::size_t>(id)].size() == 0)
    return Mat::Zero(v.rows(), v.cols());
  return grads_[static_cast<std::size_t>(id)];
}

// ---------------------------------------------------------------------------

ModelNodes register_model(Tape& tape, const koopman::Dims& dims) {
  const koopman::ParamLayout lay(dims);
  require(static_cast<std::size_t>(tape.params().size()) == lay.total,
          "register_model: tape parameter vector does not match model dims");
  ModelNodes m;
  m.dims = dims;
  for (std::size_t l = 0; l < lay.enc_weights.size(); ++l) {
    const auto& w = lay.enc_weights[l];
    const auto& b = lay.enc_biases[l];
    m.weights.push_back(tape.param(w.offset, w.rows, w.cols));
    m.biases.push_back(tape.param(b.offset, b.rows, b.cols));
  }
  m.A = tape.param(lay.A.offset, lay.A.rows, lay.A.cols);
  m.B = tape.param(lay.B.offset, lay.B.rows, lay.B.cols);
  m.C = tape.param(lay.C.offset, lay.C.rows, lay.C.cols);
  m.D = tape.param(lay.D.offset, lay.D.rows, lay.D.cols);
  m.E = tape.param(lay.E.offset, lay.E.rows, lay.E.cols);
  return m;
}

NodeId encode(Tape& tape, const ModelNodes& m, NodeId x_obs) {
  require(tape.value(x_obs).rows() == m.dims.n_obs, "taped encode: x_obs has wrong row count");
  NodeId a = x_obs;
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    a = tape.add(tape.matmul(m.weights[l], a), m.biases[l]);
    if (l + 1 < m.weights.size()) a = tape.tanh(a);
  }
  return a;
}

NodeId step_latent(Tape& tape, const ModelNodes& m, NodeId z, NodeId u) {
  return tape.add(tape.matmul(m.A, z), tape.matmul(m.B, u));
}

NodeId decode_state(Tape& tape, const ModelNodes& m, NodeId z) { return tape.matmul(m.C, z); }

NodeId decode_output(Tape& tape, const ModelNodes& m, NodeId z, NodeId u) {
  return tape.add(tape.matmul(m.D, z), tape.matmul(m.E, u));
}

TapedRollout rollout(Tape& tape, const ModelNodes& m, NodeId x_obs0, std::span<const NodeId> inputs) {
  TapedRollout r;
  r.latents.push_back(encode(tape, m, x_obs0));
  r.predictions.push_back(decode_state(tape, m, r.latents.back()));
  for (NodeId u : inputs) {
    const NodeId z = r.latents.back();
    r.outputs.push_back(decode_output(tape, m, z, u));
    r.latents.push_back(step_latent(tape, m, z, u));
    r.predictions.push_back(decode_state(tape, m, r.latents.back()));
  }
  return r;
}

// ---------------------------------------------------------------------------

namespace {

std::size_t arity(Op op) {
  switch (op) {
    case Op::Encode:
    case Op::DecodeState:
    case Op::Tanh:
    case Op::SumSquares:
    case Op::Scale:
    case Op::Upscale:
      return 1;
    default:
      return 2;
  }
}

void check_instruction(const Instruction& ins, std::size_t n_registers) {
  if (ins.args.size() != arity(ins.op))
    throw ContractViolation("program: wrong argument count for instruction");
  for (int a : ins.args)
    if (a < 0 || static_cast<std::size_t>(a) >= n_registers)
      throw ContractViolation("program: argument refers to an undefined register");
}

}  // namespace

Recording record_forward(const koopman::Model& model, std::span<const Mat> inputs,
                         const Program& program) {
  Recording rec;
  rec.tape = std::make_unique<Tape>(koopman::flatten(model).values());
  Tape& t = *rec.tape;
  const ModelNodes m = register_model(t, model.dims);
  std::vector<NodeId> reg;
  for (const Mat& in : inputs) reg.push_back(t.constant(in));
  for (const Instruction& ins : program.code) {
    check_instruction(ins, reg.size());
    auto r = [&](std::size_t k) { return reg[static_cast<std::size_t>(ins.args[k])]; };
    NodeId out = -1;
    switch (ins.op) {
      case Op::Encode: out = encode(t, m, r(0)); break;
      case Op::StepLatent: out = step_latent(t, m, r(0), r(1)); break;
      case Op::DecodeState: out = decode_state(t, m, r(0)); break;
      case Op::DecodeOutput: out = decode_output(t, m, r(0), r(1)); break;
      case Op::Add: out = t.add(r(0), r(1)); break;
      case Op::Sub: out = t.sub(r(0), r(1)); break;
      case Op::Mul: out = t.mul(r(0), r(1)); break;
      case Op::Tanh: out = t.tanh(r(0)); break;
      case Op::Dot: out = t.dot(r(0), r(1)); break;
      case Op::SumSquares: out = t.sum_squares(r(0)); break;
      case Op::Scale: out = t.scale(r(0), ins.scalar); break;
      case Op::Upscale:
        throw UnsupportedPrimitive(
            "upscale is not a tape primitive; upscale the model before recording");
    }
    reg.push_back(out);
  }
  for (int o : program.outputs) {
    if (o < 0 || static_cast<std::size_t>(o) >= reg.size())
      throw ContractViolation("program: output refers to an undefined register");
    rec.output_nodes.push_back(reg[static_cast<std::size_t>(o)]);
    rec.outputs.push_back(t.value(reg[static_cast<std::size_t>(o)]));
  }
  return rec;
}

std::vector<Mat> evaluate(const koopman::Model& model, std::span<const Mat> inputs,
                          const Program& program) {
  std::vector<Mat> reg(inputs.begin(), inputs.end());
  for (const Instruction& ins : program.code) {
    check_instruction(ins, reg.size());
    auto r = [&](std::size_t k) -> const Mat& { return reg[static_cast<std::size_t>(ins.args[k])]; };
    Mat out;
    switch (ins.op) {
      case Op::Encode: out = model.encoder.forward_batch(r(0)); break;
      case Op::StepLatent: out = model.A * r(0) + model.B * r(1); break;
      case Op::DecodeState: out = model.C * r(0); break;
      case Op::DecodeOutput: out = model.D * r(0) + model.E * r(1); break;
      case Op::Add: out = r(0) + r(1); break;
      case Op::Sub: out = r(0) - r(1); break;
      case Op::Mul: out = r(0).cwiseProduct(r(1)); break;
      case Op::Tanh: out = r(0).array().tanh(); break;
      case Op::Dot: out = Mat::Constant(1, 1, r(0).cwiseProduct(r(1)).sum()); break;
      case Op::SumSquares: out = Mat::Constant(1, 1, r(0).squaredNorm()); break;
      case Op::Scale: out = r(0) * ins.scalar; break;
      case Op::Upscale:
        throw UnsupportedPrimitive(
            "upscale is not a tape primitive; upscale the model before recording");
    }
    reg.push_back(std::move(out));
  }
  std::vector<Mat> outs;
  for (int o : program.outputs) outs.push_back(reg.at(static_cast<std::size_t>(o)));
  return outs;
}

koopman::ParamVector backward(Recording& rec, std::span<const Mat> seeds) {
  if (seeds.size() != rec.output_nodes.size())
    throw ContractViolation("backward: expected " + std::to_string(rec.output_nodes.size()) +
                            " seed gradients, got " + std::to_string(seeds.size()));
  std::vector<std::pair<NodeId, Mat>> s;
  for (std::size_t k = 0; k < seeds.size(); ++k) s.emplace_back(rec.output_nodes[k], seeds[k]);
  return koopman::ParamVector(rec.tape->backward(s));
}

GradCheckReport check_gradients(const LossProgram& program, const Vec& theta, double tolerance,
                                std::size_t samples, Rng& rng, double h) {
  auto loss_at = [&](const Vec& p) {
    Tape t(p);
    const NodeId l = program(t);
    require(t.value(l).size() == 1, "check_gradients: program must return a scalar node");
    return t.value(l)(0, 0);
  };
  Tape t(theta);
  const NodeId l = program(t);
  require(t.value(l).size() == 1, "check_gradients: program must return a scalar node");
  const std::pair<NodeId, Mat> seed{l, Mat::Ones(1, 1)};
  const Vec g = t.backward(std::span(&seed, 1));

  GradCheckReport rep;
  const auto n = static_cast<std::size_t>(theta.size());
  rep.indices.resize(n);
  std::iota(rep.indices.begin(), rep.indices.end(), std::size_t{0});
  if (samples < n) {
    std::shuffle(rep.indices.begin(), rep.indices.end(), rng);
    rep.indices.resize(samples);
    std::sort(rep.indices.begin(), rep.indices.end());
  }
  Vec p = theta;
  for (std::size_t i : rep.indices) {
    const auto k = static_cast<Eigen::Index>(i);
    p[k] = theta[k] + h;
    const double fp = loss_at(p);
    p[k] = theta[k] - h;
    const double fm = loss_at(p);
    p[k] = theta[k];
    const double fd = (fp - fm) / (2.0 * h);
    const double err = std::abs(g[k] - fd);
    rep.max_abs_error = std::max(rep.max_abs_error, err);
    rep.max_rel_error =
        std::max(rep.max_rel_error, err / std::max({1.0, std::abs(g[k]), std::abs(fd)}));
  }
  rep.passed = rep.max_rel_error <= tolerance;
  return rep;
}

}  // namespace kenmpc::tape
