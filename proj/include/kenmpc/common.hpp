#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kenmpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Raised when a caller breaks a documented precondition (dimensions, ranges).
class ContractViolation : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on malformed input files; carries the 1-based line number.
class ParseError : public std::runtime_error {
public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

private:
  std::size_t line_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

inline void require_size(Eigen::Index got, Eigen::Index want, const char* what) {
  if (got != want)
    throw ContractViolation(std::string(what) + ": expected size " + std::to_string(want) +
                            ", got " + std::to_string(got));
}

inline bool all_finite(const Eigen::Ref<const Mat>& m) { return m.allFinite(); }

using Rng = std::mt19937_64;

/// Affine per-channel map between physical units and the scaled range [-1, 1].
struct Scaling {
  Vec lower;
  Vec upper;

  Scaling() = default;
  Scaling(Vec lo, Vec hi) : lower(std::move(lo)), upper(std::move(hi)) {
    require(lower.size() == upper.size(), "Scaling: bound size mismatch");
    require(((upper - lower).array() > 0.0).all(), "Scaling: lower must be < upper");
  }

  Eigen::Index size() const { return lower.size(); }
  Vec center() const { return 0.5 * (lower + upper); }
  Vec half_range() const { return 0.5 * (upper - lower); }

  Vec to_scaled(const Vec& phys) const {
    require_size(phys.size(), size(), "Scaling::to_scaled");
    return ((phys - center()).array() / half_range().array()).matrix();
  }
  Vec to_physical(const Vec& scaled) const {
    require_size(scaled.size(), size(), "Scaling::to_physical");
    return (scaled.array() * half_range().array()).matrix() + center();
  }
  double to_scaled(Eigen::Index i, double phys) const {
    return (phys - 0.5 * (lower[i] + upper[i])) / (0.5 * (upper[i] - lower[i]));
  }
  double to_physical(Eigen::Index i, double scaled) const {
    return scaled * 0.5 * (upper[i] - lower[i]) + 0.5 * (lower[i] + upper[i]);
  }
};

/// Feed-forward network: tanh on hidden layers, linear output layer.
struct Mlp {
  std::vector<Mat> weights;
  std::vector<Vec> biases;

  Mlp() = default;
  /// Zero-initialised network with the given layer widths (input first, output last).
  explicit Mlp(const std::vector<int>& widths);

  int input_size() const { return weights.empty() ? 0 : static_cast<int>(weights.front().cols()); }
  int output_size() const { return weights.empty() ? 0 : static_cast<int>(weights.back().rows()); }
  std::size_t layer_count() const { return weights.size(); }
  std::size_t param_count() const;

  Vec forward(const Vec& x) const;
  /// Column-batched forward pass.
  Mat forward_batch(const Mat& x) const;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  void init_uniform(Rng& rng);
};

/// Adam with bias correction; state lives next to the parameters it updates.
struct Adam {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vec m;
  Vec v;
  std::int64_t steps = 0;

  Adam() = default;
  Adam(std::size_t n, double lr) : learning_rate(lr), m(Vec::Zero(n)), v(Vec::Zero(n)) {}

  void step(Vec& params, const Vec& grad);
};

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`; returns the norm before.
double clip_grad_norm(Vec& grad, double max_norm);

/// Shortest representation that reads back to the same double.
std::string format_double(double v);
/// Strict parse of a finite double (surrounding blanks allowed).
bool parse_double(std::string_view s, double& out);

/// Stable 64-bit FNV-1a hash, rendered as 16 hex chars.
std::string fnv1a_hex(const std::string& data);

}  // namespace kenmpc
