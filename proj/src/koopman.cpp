#include "kenmpc/koopman.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace kenmpc::koopman {

namespace {

constexpr int kModelFormatVersion = 1;

void check_block(const Mat& m, int rows, int cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols)
    throw ContractViolation(std::string("Model: matrix ") + name + " has shape " +
                            std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                            ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  if (!m.allFinite()) throw ContractViolation(std::string("Model: matrix ") + name + " not finite");
}

void write_block(const Mat& m, Vec& out, const ParamLayout::Block& b) {
  for (int r = 0; r < b.rows; ++r)
    for (int c = 0; c < b.cols; ++c) out[static_cast<Eigen::Index>(b.at(r, c))] = m(r, c);
}

void read_block(Mat& m, const Vec& in, const ParamLayout::Block& b) {
  m.resize(b.rows, b.cols);
  for (int r = 0; r < b.rows; ++r)
    for (int c = 0; c < b.cols; ++c) m(r, c) = in[static_cast<Eigen::Index>(b.at(r, c))];
}

nlohmann::json mat_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Mat mat_from_json(const nlohmann::json& j, int rows, int cols, const char* name) {
  if (!j.is_array() || static_cast<int>(j.size()) != rows)
    throw ContractViolation(std::string("model file: bad row count for ") + name);
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    if (!j[r].is_array() || static_cast<int>(j[r].size()) != cols)
      throw ContractViolation(std::string("model file: bad column count for ") + name);
    for (int c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

}  // namespace

std::vector<int> Dims::encoder_widths() const {
  std::vector<int> w{n_obs};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(n_latent);
  return w;
}

void Model::validate() const {
  require(dims.n_obs > 0 && dims.n_latent > 0 && dims.n_input > 0 && dims.n_pred > 0 &&
              dims.n_out > 0,
          "Model: all dimensions must be positive");
  require(dt_minutes > 0.0 && std::isfinite(dt_minutes), "Model: dt_minutes must be > 0");
  const auto widths = dims.encoder_widths();
  require(encoder.weights.size() + 1 == widths.size() && encoder.biases.size() + 1 == widths.size(),
          "Model: encoder layer count does not match dims");
  for (std::size_t l = 0; l < encoder.weights.size(); ++l) {
    check_block(encoder.weights[l], widths[l + 1], widths[l], "encoder weight");
    check_block(encoder.biases[l], widths[l + 1], 1, "encoder bias");
  }
  check_block(A, dims.n_latent, dims.n_latent, "A");
  check_block(B, dims.n_latent, dims.n_input, "B");
  check_block(C, dims.n_pred, dims.n_latent, "C");
  check_block(D, dims.n_out, dims.n_latent, "D");
  check_block(E, dims.n_out, dims.n_input, "E");
}

ParamLayout::ParamLayout(const Dims& dims) {
  const auto widths = dims.encoder_widths();
  std::size_t off = 0;
  auto take = [&off](int rows, int cols) {
    Block b{off, rows, cols};
    off += b.size();
    return b;
  };
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    enc_weights.push_back(take(widths[l + 1], widths[l]));
    enc_biases.push_back(take(widths[l + 1], 1));
  }
  A = take(dims.n_latent, dims.n_latent);
  B = take(dims.n_latent, dims.n_input);
  C = take(dims.n_pred, dims.n_latent);
  D = take(dims.n_out, dims.n_latent);
  E = take(dims.n_out, dims.n_input);
  total = off;
}

Model zero_model(const Dims& dims, double dt_minutes) {
  Model m;
  m.dims = dims;
  m.encoder = Mlp(dims.encoder_widths());
  m.A = Mat::Zero(dims.n_latent, dims.n_latent);
  m.B = Mat::Zero(dims.n_latent, dims.n_input);
  m.C = Mat::Zero(dims.n_pred, dims.n_latent);
  m.D = Mat::Zero(dims.n_out, dims.n_latent);
  m.E = Mat::Zero(dims.n_out, dims.n_input);
  m.dt_minutes = dt_minutes;
  m.validate();
  return m;
}

Model init_model(const Dims& dims, double dt_minutes, Rng& rng) {
  Model m = zero_model(dims, dt_minutes);
  m.encoder.init_uniform(rng);
  std::uniform_real_distribution<double> small(-0.01, 0.01);
  auto fill = [&](Mat& x) {
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = small(rng);
  };
  m.A.setIdentity();
  fill(m.B);
  fill(m.C);
  fill(m.D);
  fill(m.E);
  return m;
}

Vec encode(const Model& model, const Vec& x_obs) {
  require_size(x_obs.size(), model.dims.n_obs, "encode: x_obs");
  return model.encoder.forward(x_obs);
}

Vec step_latent(const Model& model, const Vec& z, const Vec& u) {
  require_size(z.size(), model.dims.n_latent, "step_latent: z");
  require_size(u.size(), model.dims.n_input, "step_latent: u");
  return model.A * z + model.B * u;
}

Vec decode_state(const Model& model, const Vec& z) {
  require_size(z.size(), model.dims.n_latent, "decode_state: z");
  return model.C * z;
}

Vec decode_output(const Model& model, const Vec& z, const Vec& u) {
  require_size(z.size(), model.dims.n_latent, "decode_output: z");
  require_size(u.size(), model.dims.n_input, "decode_output: u");
  return model.D * z + model.E * u;
}

Rollout rollout(const Model& model, const Vec& x_obs0, std::span<const Vec> inputs) {
  Rollout r;
  r.latents.reserve(inputs.size() + 1);
  r.predictions.reserve(inputs.size() + 1);
  r.outputs.reserve(inputs.size());
  r.latents.push_back(encode(model, x_obs0));
  r.predictions.push_back(decode_state(model, r.latents.back()));
  for (const Vec& u : inputs) {
    require(u.allFinite(), "rollout: non-finite input");
    const Vec& z = r.latents.back();
    r.outputs.push_back(decode_output(model, z, u));
    r.latents.push_back(step_latent(model, z, u));
    r.predictions.push_back(decode_state(model, r.latents.back()));
  }
  return r;
}

Model upscale(const Model& model, int k) {
  require(k >= 1, "upscale: k must be >= 1");
  model.validate();
  const int nz = model.dims.n_latent;
  Model out = model;
  // power = A^i, geo = sum_{i<k} A^i
  Mat power = Mat::Identity(nz, nz);
  Mat geo = Mat::Zero(nz, nz);
  for (int i = 0; i < k; ++i) {
    geo += power;
    power = model.A * power;
  }
  out.A = power;
  out.B = geo * model.B;
  out.C = model.C;
  out.D = model.D * power;
  out.E = model.D * out.B + model.E;
  out.dt_minutes = model.dt_minutes * k;
  return out;
}

ParamVector flatten(const Model& model) {
  model.validate();
  const ParamLayout lay(model.dims);
  Vec v(static_cast<Eigen::Index>(lay.total));
  for (std::size_t l = 0; l < lay.enc_weights.size(); ++l) {
    write_block(model.encoder.weights[l], v, lay.enc_weights[l]);
    write_block(model.encoder.biases[l], v, lay.enc_biases[l]);
  }
  write_block(model.A, v, lay.A);
  write_block(model.B, v, lay.B);
  write_block(model.C, v, lay.C);
  write_block(model.D, v, lay.D);
  write_block(model.E, v, lay.E);
  return ParamVector(std::move(v));
}

void assign(Model& model, const ParamVector& params) {
  const ParamLayout lay(model.dims);
  if (static_cast<std::size_t>(params.size()) != lay.total)
    throw ContractViolation("unflatten: parameter vector has length " +
                            std::to_string(params.size()) + ", expected " +
                            std::to_string(lay.total));
  const Vec& v = params.values();
  model.encoder.weights.resize(lay.enc_weights.size());
  model.encoder.biases.resize(lay.enc_biases.size());
  for (std::size_t l = 0; l < lay.enc_weights.size(); ++l) {
    read_block(model.encoder.weights[l], v, lay.enc_weights[l]);
    Mat b;
    read_block(b, v, lay.enc_biases[l]);
    model.encoder.biases[l] = b.col(0);
  }
  read_block(model.A, v, lay.A);
  read_block(model.B, v, lay.B);
  read_block(model.C, v, lay.C);
  read_block(model.D, v, lay.D);
  read_block(model.E, v, lay.E);
}

Model unflatten(const ParamVector& params, const Dims& dims, double dt_minutes) {
  Model m;
  m.dims = dims;
  m.dt_minutes = dt_minutes;
  assign(m, params);
  m.validate();
  return m;
}

nlohmann::json to_json(const Model& model) {
  model.validate();
  nlohmann::json j;
  j["format"] = "kenmpc-koopman-model";
  j["version"] = kModelFormatVersion;
  j["dims"] = {{"n_obs", model.dims.n_obs},     {"n_latent", model.dims.n_latent},
               {"n_input", model.dims.n_input}, {"n_pred", model.dims.n_pred},
               {"n_out", model.dims.n_out},     {"hidden", model.dims.hidden}};
  j["dt_minutes"] = model.dt_minutes;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < model.encoder.weights.size(); ++l) {
    layers.push_back({{"weight", mat_to_json(model.encoder.weights[l])},
                      {"bias", mat_to_json(model.encoder.biases[l])}});
  }
  j["encoder"] = layers;
  j["A"] = mat_to_json(model.A);
  j["B"] = mat_to_json(model.B);
  j["C"] = mat_to_json(model.C);
  j["D"] = mat_to_json(model.D);
  j["E"] = mat_to_json(model.E);
  return j;
}

Model model_from_json(const nlohmann::json& j) {
  if (!j.contains("version") || !j.at("version").is_number_integer())
    throw ContractViolation("model file: missing version field");
  if (j.at("version").get<int>() != kModelFormatVersion)
    throw ContractViolation("model file: unsupported version " +
                            std::to_string(j.at("version").get<int>()));
  Model m;
  const auto& d = j.at("dims");
  m.dims.n_obs = d.at("n_obs").get<int>();
  m.dims.n_latent = d.at("n_latent").get<int>();
  m.dims.n_input = d.at("n_input").get<int>();
  m.dims.n_pred = d.at("n_pred").get<int>();
  m.dims.n_out = d.at("n_out").get<int>();
  m.dims.hidden = d.at("hidden").get<std::vector<int>>();
  m.dt_minutes = j.at("dt_minutes").get<double>();
  const auto widths = m.dims.encoder_widths();
  const auto& layers = j.at("encoder");
  if (layers.size() + 1 != widths.size())
    throw ContractViolation("model file: encoder layer count mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    m.encoder.weights.push_back(
        mat_from_json(layers[l].at("weight"), widths[l + 1], widths[l], "encoder weight"));
    m.encoder.biases.push_back(
        mat_from_json(layers[l].at("bias"), widths[l + 1], 1, "encoder bias").col(0));
  }
  m.A = mat_from_json(j.at("A"), m.dims.n_latent, m.dims.n_latent, "A");
  m.B = mat_from_json(j.at("B"), m.dims.n_latent, m.dims.n_input, "B");
  m.C = mat_from_json(j.at("C"), m.dims.n_pred, m.dims.n_latent, "C");
  m.D = mat_from_json(j.at("D"), m.dims.n_out, m.dims.n_latent, "D");
  m.E = mat_from_json(j.at("E"), m.dims.n_out, m.dims.n_input, "E");
  m.validate();
  return m;
}

void save_model(const Model& model, const std::string& path, const std::string& config_hash) {
  nlohmann::json j = to_json(model);
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write model file " + path);
  out << j.dump(1) << '\n';
}

Model load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read model file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("model file " + path + ": " + e.what());
  }
  if (j.contains("model")) return model_from_json(j.at("model"));
  return model_from_json(j);
}

}  // namespace kenmpc::koopman
