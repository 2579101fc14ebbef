#include "kenmpc/common.hpp"

#include <charconv>
#include <cmath>

#include <cstdio>

namespace kenmpc {

Mlp::Mlp(const std::vector<int>& widths) {
  require(widths.size() >= 2, "Mlp: need at least input and output width");
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    require(widths[l] > 0 && widths[l + 1] > 0, "Mlp: widths must be positive");
    weights.push_back(Mat::Zero(widths[l + 1], widths[l]));
    biases.push_back(Vec::Zero(widths[l + 1]));
  }
}

std::size_t Mlp::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l)
    n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
  return n;
}

Vec Mlp::forward(const Vec& x) const {
  require_size(x.size(), input_size(), "Mlp::forward input");
  Vec a = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Vec pre = weights[l] * a + biases[l];
    a = (l + 1 < weights.size()) ? Vec(pre.array().tanh()) : pre;
  }
  return a;
}

Mat Mlp::forward_batch(const Mat& x) const {
  require_size(x.rows(), input_size(), "Mlp::forward_batch input");
  Mat a = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Mat pre = (weights[l] * a).colwise() + biases[l];
    a = (l + 1 < weights.size()) ? Mat(pre.array().tanh()) : pre;
  }
  return a;
}

void Mlp::init_uniform(Rng& rng) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(weights[l].cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < weights[l].size(); ++i) weights[l].data()[i] = dist(rng);
    for (Eigen::Index i = 0; i < biases[l].size(); ++i) biases[l][i] = dist(rng);
  }
}

void Adam::step(Vec& params, const Vec& grad) {
  require_size(grad.size(), params.size(), "Adam::step");
  if (m.size() != params.size()) {
    m = Vec::Zero(params.size());
    v = Vec::Zero(params.size());
  }
  ++steps;
  m = beta1 * m + (1.0 - beta1) * grad;
  v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
  params.array() -= learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

double clip_grad_norm(Vec& grad, double max_norm) {
  const double norm = grad.norm();
  if (norm > max_norm && norm > 0.0) grad *= max_norm / norm;
  return norm;
}

std::string fnv1a_hex(const std::string& data) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size() && std::isfinite(out);
}

}  // namespace kenmpc
