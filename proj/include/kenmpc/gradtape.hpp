#pragma once

// Narrow reverse-mode tape over matrix-valued nodes (columns are batch
// samples). Supports exactly what the Koopman/OCP pipeline needs: parameter
// leaves, matrix products, broadcast adds, tanh, elementwise products,
// reductions, a fixed sparse affine gather and opaque nodes that bring their
// own vector-Jacobian product.

#include "kenmpc/common.hpp"
#include "kenmpc/koopman.hpp"

#include <Eigen/Sparse>

#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

namespace kenmpc::tape {

using NodeId = int;
using SparseMat = Eigen::SparseMatrix<double>;

enum class Primitive {
  Constant,
  Param,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  Tanh,
  Sum,
  Dot,
  SumSquares,
  Rows,
  VStack,
  SparseAffine,
  Opaque,
};

class UnsupportedPrimitive : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Maps an upstream gradient dL/d(output) to dL/d(input_k) for every input.
using VjpFn = std::function<std::vector<Mat>(const Mat& upstream)>;

class Tape {
public:
  /// `params` is the flat learnable vector; Param leaves are views into it.
  explicit Tape(Vec params);

  NodeId constant(Mat value);
  /// Row-major block params[offset .. offset + rows*cols) as a rows x cols matrix.
  NodeId param(std::size_t offset, int rows, int cols);

  NodeId matmul(NodeId a, NodeId b);
  /// a + b; b may be a column vector broadcast across the columns of a.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId tanh(NodeId a);
  NodeId sum(NodeId a);
  NodeId dot(NodeId a, NodeId b);
  NodeId sum_squares(NodeId a);
  NodeId rows(NodeId a, int start, int count);
  NodeId vstack(std::span<const NodeId> parts);
  /// y = S * [vec(in_0); vec(in_1); ...] + offset (column-major vec of each input).
  NodeId sparse_affine(std::span<const NodeId> inputs, std::shared_ptr<const SparseMat> S,
                       Vec offset);
  NodeId opaque(std::span<const NodeId> inputs, Mat value, VjpFn vjp);

  const Mat& value(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  Primitive kind(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).kind; }
  std::size_t size() const { return nodes_.size(); }
  const Vec& params() const { return params_; }

  /// Reverse sweep seeded with (node, dL/dnode) pairs. Returns dL/dparams.
  Vec backward(std::span<const std::pair<NodeId, Mat>> seeds);
  /// Gradient w.r.t. any node from the last backward() call (zero if unreached).
  Mat grad(NodeId id) const;
  /// Nodes processed by the last backward() call.
  std::size_t last_visit_count() const { return visits_; }

private:
  struct Node {
    Primitive kind;
    Mat value;
    std::vector<NodeId> inputs;
    std::size_t offset = 0;  // Param
    double scalar = 0.0;     // Scale
    int start = 0;           // Rows
    std::shared_ptr<const SparseMat> sparse;  // SparseAffine
    VjpFn vjp;                                // Opaque
  };

  NodeId push(Node n);
  const Node& at(NodeId id) const;
  void accumulate(std::vector<Mat>& grads, NodeId id, const Mat& g) const;

  Vec params_;
  std::vector<Node> nodes_;
  std::vector<Mat> grads_;
  std::size_t visits_ = 0;
};

/// Parameter leaves for every block of a Koopman model.
struct ModelNodes {
  koopman::Dims dims;
  std::vector<NodeId> weights;
  std::vector<NodeId> biases;
  NodeId A = -1, B = -1, C = -1, D = -1, E = -1;
};

/// Registers all model blocks as Param leaves (tape params must be flatten(model)).
ModelNodes register_model(Tape& tape, const koopman::Dims& dims);

NodeId encode(Tape& tape, const ModelNodes& m, NodeId x_obs);
NodeId step_latent(Tape& tape, const ModelNodes& m, NodeId z, NodeId u);
NodeId decode_state(Tape& tape, const ModelNodes& m, NodeId z);
NodeId decode_output(Tape& tape, const ModelNodes& m, NodeId z, NodeId u);

struct TapedRollout {
  std::vector<NodeId> latents;
  std::vector<NodeId> predictions;
  std::vector<NodeId> outputs;
};
TapedRollout rollout(Tape& tape, const ModelNodes& m, NodeId x_obs0, std::span<const NodeId> inputs);

// ---------------------------------------------------------------------------
// Programs over the Koopman primitives.

enum class Op {
  Encode,        ///< (x) -> z
  StepLatent,    ///< (z, u) -> z+
  DecodeState,   ///< (z) -> x_hat
  DecodeOutput,  ///< (z, u) -> y
  Add,
  Sub,
  Mul,
  Tanh,
  Dot,
  SumSquares,
  Scale,    ///< uses Instruction::scalar
  Upscale,  ///< not differentiable on the tape
};

/// Register machine: registers 0..n_inputs-1 hold the inputs; instruction i
/// writes register n_inputs + i.
struct Instruction {
  Op op;
  std::vector<int> args;
  double scalar = 0.0;
};

struct Program {
  std::vector<Instruction> code;
  std::vector<int> outputs;
};

struct Recording {
  std::unique_ptr<Tape> tape;
  std::vector<NodeId> output_nodes;
  std::vector<Mat> outputs;
};

Recording record_forward(const koopman::Model& model, std::span<const Mat> inputs,
                         const Program& program);

/// Plain evaluation of the same program without a tape.
std::vector<Mat> evaluate(const koopman::Model& model, std::span<const Mat> inputs,
                          const Program& program);

/// Seeds must match the recorded outputs one-to-one in shape.
koopman::ParamVector backward(Recording& rec, std::span<const Mat> seeds);

// ---------------------------------------------------------------------------
// Finite-difference gradient checks.

/// Builds a scalar (1x1) loss node on a fresh tape over the given parameters.
using LossProgram = std::function<NodeId(Tape&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::vector<std::size_t> indices;
  bool passed = true;
};

/// Compares backward() against central differences (step h) on `samples`
/// random parameter indices (all indices if samples >= size). The error per
/// entry is |g_tape - g_fd| / max(1, |g_tape|, |g_fd|).
GradCheckReport check_gradients(const LossProgram& program, const Vec& theta, double tolerance,
                                std::size_t samples, Rng& rng, double h = 1e-5);

}  // namespace kenmpc::tape
