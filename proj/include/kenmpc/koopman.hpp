#pragma once

// Koopman surrogate model: nonlinear encoder into a latent space with linear
// dynamics z+ = A z + B u, a state decoder x_hat = C z and an output decoder
// with direct feedthrough y = D z + E u.

#include "kenmpc/common.hpp"

#include "json.hpp"

#include <span>
#include <string>
#include <vector>

namespace kenmpc::koopman {

struct Dims {
  int n_obs = 4;     ///< encoder input (observed plant variables)
  int n_latent = 10;
  int n_input = 4;
  int n_pred = 3;    ///< decoded constrained states
  int n_out = 2;     ///< feedthrough outputs (energy, production)
  std::vector<int> hidden{50, 50};

  std::vector<int> encoder_widths() const;
  bool operator==(const Dims&) const = default;
};

struct Model {
  Dims dims;
  Mlp encoder;
  Mat A, B, C, D, E;
  double dt_minutes = 5.0;

  /// Throws ContractViolation if any dimension, finiteness or dt invariant is broken.
  void validate() const;
};

/// Offsets of every learnable block inside the flat parameter vector.
///
/// Order: encoder layers (weights row-major, then biases, layer by layer),
/// then A, B, C, D, E, each row-major.
struct ParamLayout {
  struct Block {
    std::size_t offset = 0;
    int rows = 0;
    int cols = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
    std::size_t at(int r, int c) const { return offset + static_cast<std::size_t>(r) * cols + c; }
  };

  std::vector<Block> enc_weights;
  std::vector<Block> enc_biases;
  Block A, B, C, D, E;
  std::size_t total = 0;

  explicit ParamLayout(const Dims& dims);
  /// First index after the encoder; the linear blocks start here.
  std::size_t matrices_offset() const { return A.offset; }
};

/// Flat view of all learnable entries, in ParamLayout order.
class ParamVector {
public:
  ParamVector() = default;
  explicit ParamVector(Vec values) : values_(std::move(values)) {}

  Eigen::Index size() const { return values_.size(); }
  const Vec& values() const { return values_; }
  Vec& values() { return values_; }
  double operator[](Eigen::Index i) const { return values_[i]; }
  double& operator[](Eigen::Index i) { return values_[i]; }

private:
  Vec values_;
};

/// All-zero model (weights, biases and matrices zero).
Model zero_model(const Dims& dims, double dt_minutes);

/// Encoder uniform(+-1/sqrt(fan_in)), A = I, B..E uniform(+-0.01).
Model init_model(const Dims& dims, double dt_minutes, Rng& rng);

Vec encode(const Model& model, const Vec& x_obs);
Vec step_latent(const Model& model, const Vec& z, const Vec& u);
Vec decode_state(const Model& model, const Vec& z);
Vec decode_output(const Model& model, const Vec& z, const Vec& u);

struct Rollout {
  std::vector<Vec> latents;      ///< N + 1
  std::vector<Vec> predictions;  ///< N + 1
  std::vector<Vec> outputs;      ///< N, y_t uses u_t
};

Rollout rollout(const Model& model, const Vec& x_obs0, std::span<const Vec> inputs);

/// Exact k-step chaining under constant input: A^k, sum A^i B, D A^k, D sum A^i B + E.
Model upscale(const Model& model, int k);

ParamVector flatten(const Model& model);
Model unflatten(const ParamVector& params, const Dims& dims, double dt_minutes);
/// Overwrites the parameters of `model` in place (dims unchanged).
void assign(Model& model, const ParamVector& params);

nlohmann::json to_json(const Model& model);
Model model_from_json(const nlohmann::json& j);
void save_model(const Model& model, const std::string& path, const std::string& config_hash = "");
Model load_model(const std::string& path);

}  // namespace kenmpc::koopman
