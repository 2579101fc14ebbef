#include "kenmpc/envsim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace kenmpc::env {

namespace {

std::string fmt(double v) { return format_double(v); }

Vec rk4(const SurrogatePlant& p, const Vec& xi, const Vec& v, double h) {
  const Vec k1 = p.rhs(xi, v);
  const Vec k2 = p.rhs(xi + 0.5 * h * k1, v);
  const Vec k3 = p.rhs(xi + 0.5 * h * k2, v);
  const Vec k4 = p.rhs(xi + h * k3, v);
  return xi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

}  // namespace

// ---------------------------------------------------------------------------
// SurrogatePlant

SurrogatePlant::SurrogatePlant(SurrogateParams params) : p_(std::move(params)) {
  require(p_.inputs.size() == 4 && p_.states.size() == 4, "SurrogatePlant: expects 4 inputs and 4 states");
  require(p_.tau_impurity > 0 && p_.tau_dtrc > 0 && p_.tau_tray > 0 && p_.substep_minutes > 0,
          "SurrogatePlant: time constants must be positive");
  // Relax to the steady state of the nominal input.
  Vec xi = Vec::Zero(4);
  xi[2] = p_.holdup_ss;
  const Vec v = Vec::Zero(4);
  for (int k = 0; k < 20000; ++k) {
    const Vec next = rk4(*this, xi, v, 1.0);
    const double change = (next - xi).lpNorm<Eigen::Infinity>();
    xi = next;
    if (change < 1e-15) break;
  }
  xi_ss_ = xi;
  xi_ = xi_ss_;
}

std::vector<std::string> SurrogatePlant::obs_names() const {
  return {"I_prod", "dT_rc", "N_r", "T_tray20"};
}
std::vector<std::string> SurrogatePlant::output_names() const { return {"E", "n_product"}; }

void SurrogatePlant::reset() { xi_ = xi_ss_; }

Vec SurrogatePlant::observe() const { return p_.states.to_physical(xi_); }

Vec SurrogatePlant::rhs(const Vec& xi, const Vec& v) const {
  Vec d(4);
  // Impurity breaks through sharply at high air flow unless the condenser works harder.
  const double breakthrough = 0.18 * std::log1p(std::exp(5.0 * (v[0] - 0.4 - 0.3 * v[3])));
  d[0] = (-0.32 + 0.3 * v[0] - 0.4 * v[3] + breakthrough + 0.2 * std::tanh(2.0 * xi[2]) - xi[0]) /
         p_.tau_impurity;
  d[1] = (0.1 + 0.5 * v[0] + 0.25 * v[0] * v[0] - 0.35 * v[2] + 0.15 * v[3] - 0.2 * xi[0] - xi[1]) /
         p_.tau_dtrc;
  const double dev = xi[2] - p_.holdup_ss;
  d[2] = p_.holdup_gain * std::tanh(1.5 * (v[0] - 0.7 * v[1] + 0.25 * v[2])) - p_.holdup_leak * dev -
         p_.holdup_cubic * dev * dev * dev;
  d[3] = (0.1 + 0.5 * xi[0] - 0.3 * xi[1] + 0.2 * v[3] - xi[3]) / p_.tau_tray;
  return d;
}

Vec SurrogatePlant::output(const Vec& u) const {
  require_size(u.size(), 4, "SurrogatePlant::output");
  const Vec v = p_.inputs.to_scaled(u);
  Vec y(2);
  y[0] = 3500.0 + 1000.0 * v[0] + 120.0 * v[0] * v[0] + 30.0 * v[1] + 20.0 * v[1] * v[1] - 40.0 * v[2] +
         40.0 * v[2] * v[2] + 30.0 * v[3] + 20.0 * v[3] * v[3] + 150.0 * (xi_[1] - xi_ss_[1]);
  y[1] = 1.0 + 0.5 * v[0] - 0.05 * v[0] * v[0] + 0.08 * (xi_[2] - xi_ss_[2]);
  return y;
}

bool SurrogatePlant::advance(const Vec& u, double minutes) {
  require_size(u.size(), 4, "SurrogatePlant::advance");
  require(minutes >= 0.0, "SurrogatePlant::advance: negative duration");
  const Vec v = p_.inputs.to_scaled(u);
  const int n = static_cast<int>(std::ceil(minutes / p_.substep_minutes - 1e-9));
  if (n == 0) return true;
  const double h = minutes / n;
  Vec xi = xi_;
  for (int k = 0; k < n; ++k) {
    xi = rk4(*this, xi, v, h);
    if (!xi.allFinite()) return false;
  }
  xi_ = xi;
  return true;
}

Vec SurrogatePlant::steady_input() const { return p_.inputs.center(); }

Vec SurrogatePlant::steady_output() const {
  SurrogatePlant copy(*this);
  copy.xi_ = xi_ss_;
  return copy.output(steady_input());
}

void SurrogatePlant::set_state(const Vec& x) {
  require_size(x.size(), 4, "SurrogatePlant::set_state");
  xi_ = x;
}

std::unique_ptr<PlantModel> SurrogatePlant::clone() const { return std::make_unique<SurrogatePlant>(*this); }

// ---------------------------------------------------------------------------
// LinearLatentPlant

LinearLatentPlant::LinearLatentPlant(Mat A, Mat B, Mat C_obs, Mat D, Mat E, double dt_minutes)
    : A_(std::move(A)), B_(std::move(B)), C_(std::move(C_obs)), D_(std::move(D)), E_(std::move(E)),
      dt_(dt_minutes) {
  const Eigen::Index n = A_.rows();
  require(A_.cols() == n && B_.rows() == n && C_.cols() == n && D_.cols() == n &&
              E_.rows() == D_.rows() && E_.cols() == B_.cols(),
          "LinearLatentPlant: inconsistent matrix shapes");
  require(dt_ > 0.0, "LinearLatentPlant: dt must be positive");
  z_ = Vec::Zero(n);
}

std::vector<std::string> LinearLatentPlant::obs_names() const {
  std::vector<std::string> s;
  for (Eigen::Index i = 0; i < C_.rows(); ++i) s.push_back("x" + std::to_string(i));
  return s;
}
std::vector<std::string> LinearLatentPlant::output_names() const {
  std::vector<std::string> s;
  for (Eigen::Index i = 0; i < D_.rows(); ++i) s.push_back("y" + std::to_string(i));
  return s;
}

bool LinearLatentPlant::advance(const Vec& u, double minutes) {
  require_size(u.size(), B_.cols(), "LinearLatentPlant::advance");
  const double steps = minutes / dt_;
  const long n = std::lround(steps);
  require(std::abs(steps - static_cast<double>(n)) < 1e-9, "LinearLatentPlant: duration not a multiple of dt");
  for (long k = 0; k < n; ++k) z_ = A_ * z_ + B_ * u;
  return z_.allFinite();
}

void LinearLatentPlant::set_state(const Vec& x) {
  require_size(x.size(), A_.rows(), "LinearLatentPlant::set_state");
  z_ = x;
}

std::unique_ptr<PlantModel> LinearLatentPlant::clone() const {
  return std::make_unique<LinearLatentPlant>(*this);
}

// ---------------------------------------------------------------------------
// Prices

double PriceSeries::mean() const {
  require(!hourly.empty(), "PriceSeries: empty");
  return std::accumulate(hourly.begin(), hourly.end(), 0.0) / static_cast<double>(hourly.size());
}

double PriceSeries::variance() const {
  const double m = mean();
  double s = 0.0;
  for (double p : hourly) s += (p - m) * (p - m);
  return s / static_cast<double>(hourly.size());
}

std::vector<double> PriceSeries::window(std::size_t from, std::size_t hours) const {
  require(from + hours <= hourly.size(), "PriceSeries::window reads past the end of the series");
  return {hourly.begin() + static_cast<std::ptrdiff_t>(from),
          hourly.begin() + static_cast<std::ptrdiff_t>(from + hours)};
}

std::vector<double> PriceSeries::per_step(std::size_t from_hour, int minute_offset, int steps,
                                          double dt_minutes) const {
  require(steps >= 0 && minute_offset >= 0 && dt_minutes > 0.0, "PriceSeries::per_step: bad arguments");
  std::vector<double> out(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    const double minute = minute_offset + k * dt_minutes;
    const std::size_t h = from_hour + static_cast<std::size_t>(std::floor(minute / 60.0 + 1e-12));
    require(h < hourly.size(), "PriceSeries::per_step reads past the end of the series");
    out[static_cast<std::size_t>(k)] = hourly[h];
  }
  return out;
}

TimePoint parse_timestamp(const std::string& s) {
  int Y = 0, M = 0, D = 0, h = 0, m = 0, sec = 0;
  char tail[8] = {0};
  const int got = std::sscanf(s.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%7s", &Y, &M, &D, &h, &m, &sec, tail);
  if (got < 6 || (got == 7 && std::string(tail) != "Z"))
    throw ContractViolation("bad timestamp '" + s + "'");
  using namespace std::chrono;
  const year_month_day ymd{year{Y}, month{static_cast<unsigned>(M)}, day{static_cast<unsigned>(D)}};
  if (!ymd.ok() || h < 0 || h > 23 || m < 0 || m > 59 || sec < 0 || sec > 59)
    throw ContractViolation("bad timestamp '" + s + "'");
  return sys_days{ymd} + hours{h} + minutes{m} + seconds{sec};
}

std::string format_timestamp(TimePoint t) {
  using namespace std::chrono;
  const sys_days d = floor<days>(t);
  const year_month_day ymd{d};
  const hh_mm_ss hms{t - d};
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02ld:%02ld:%02ld", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<long>(hms.hours().count()), static_cast<long>(hms.minutes().count()),
                static_cast<long>(hms.seconds().count()));
  return buf;
}

PriceSeries parse_prices(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  PriceSeries out;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "timestamp,price_eur_mwh") throw ParseError("expected header 'timestamp,price_eur_mwh'", lineno);
      header = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
      throw ParseError("expected two comma-separated fields", lineno);
    TimePoint ts;
    try {
      ts = parse_timestamp(line.substr(0, comma));
    } catch (const ContractViolation& e) {
      throw ParseError(e.what(), lineno);
    }
    double price = 0.0;
    if (!parse_double(std::string_view(line).substr(comma + 1), price))
      throw ParseError("bad price value", lineno);
    if (out.hourly.empty()) {
      out.start = ts;
    } else if (ts != out.start + std::chrono::hours(static_cast<long>(out.hourly.size()))) {
      throw ParseError("timestamps must be hourly and contiguous", lineno);
    }
    out.hourly.push_back(price);
  }
  if (!header) throw ParseError("missing header", lineno == 0 ? 1 : lineno);
  if (out.hourly.empty()) throw ParseError("no price rows", lineno);
  return out;
}

PriceSeries load_prices(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open price file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_prices(ss.str());
}

std::string format_prices(const PriceSeries& prices, const std::string& config_hash) {
  std::string s;
  if (!config_hash.empty()) s += "# config_hash " + config_hash + "\n";
  s += "timestamp,price_eur_mwh\n";
  for (std::size_t i = 0; i < prices.hourly.size(); ++i) {
    s += format_timestamp(prices.start + std::chrono::hours(static_cast<long>(i)));
    s += ',';
    s += fmt(prices.hourly[i]);
    s += '\n';
  }
  return s;
}

void save_prices(const PriceSeries& prices, const std::string& path, const std::string& config_hash) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write price file " + path);
  f << format_prices(prices, config_hash);
}

PriceSeries synthetic_reference(int days, std::uint64_t seed) {
  require(days > 0, "synthetic_reference: days must be positive");
  constexpr double pi = 3.14159265358979323846;
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 6.0);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  PriceSeries out;
  out.start = std::chrono::sys_days{std::chrono::year{2023} / 1 / 1};
  double ar = 0.0;
  for (int d = 0; d < days; ++d) {
    const double season = std::cos(2.0 * pi * (d - 15) / 365.0);
    const double summer = 0.5 * (1.0 - season);
    const double level = 95.0 + 20.0 * season + ((d % 7 == 5 || d % 7 == 6) ? -15.0 : 0.0);
    for (int h = 0; h < 24; ++h) {
      auto bump = [&](double c, double w) { return std::exp(-(h - c) * (h - c) / w); };
      const double profile = 22.0 * bump(8, 4) + 30.0 * bump(19, 5) - (10.0 + 15.0 * summer) * bump(13, 6) -
                             15.0 * bump(3, 8);
      ar = 0.85 * ar + noise(rng);
      double p = level + profile + ar;
      if (U(rng) < 0.005) p += 40.0 + 80.0 * U(rng);
      out.hourly.push_back(std::max(p, 1.0));
    }
  }
  return out;
}

bool is_reference_slice(const PriceSeries& reference, const PriceSeries& candidate, double tol) {
  const auto& r = reference.hourly;
  const auto& c = candidate.hourly;
  if (c.empty() || c.size() > r.size()) return false;
  for (std::size_t off = 0; off + c.size() <= r.size(); ++off) {
    std::size_t i = 0;
    while (i < c.size() && std::abs(r[off + i] - c[i]) <= tol) ++i;
    if (i == c.size()) return true;
  }
  return false;
}

PriceSeries gen_prices(const PriceSeries& reference, std::size_t length, std::uint64_t seed) {
  require(!reference.hourly.empty(), "gen_prices: empty reference");
  require(length > 0, "gen_prices: length must be positive");
  const double mu = reference.mean();
  const double sd = std::sqrt(reference.variance());
  PriceSeries out;
  out.start = reference.start + std::chrono::hours(static_cast<long>(reference.size()));
  if (sd == 0.0) {
    out.hourly.assign(length, mu);
    return out;
  }
  const std::size_t block = std::min<std::size_t>(24, reference.size());
  const std::size_t n_blocks = reference.size() / block;
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(seed + 0x9e3779b97f4a7c15ULL * attempt);
    std::uniform_int_distribution<std::size_t> pick(0, n_blocks - 1);
    std::normal_distribution<double> gain(1.0, 0.05);
    std::normal_distribution<double> jitter(0.0, 0.1 * sd);
    std::vector<double> x;
    x.reserve(length);
    while (x.size() < length) {
      const std::size_t b = pick(rng);
      const double g = gain(rng);
      for (std::size_t h = 0; h < block && x.size() < length; ++h)
        x.push_back(g * reference.hourly[b * block + h] + jitter(rng));
    }
    double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    double v = 0.0;
    for (double p : x) v += (p - m) * (p - m);
    v /= static_cast<double>(x.size());
    out.hourly.resize(length);
    for (std::size_t i = 0; i < length; ++i)
      out.hourly[i] = v > 0.0 ? mu + (x[i] - m) * sd / std::sqrt(v) : mu;
    if (length < 2 || !is_reference_slice(reference, out)) return out;
  }
}

// ---------------------------------------------------------------------------
// Reward

void RewardConfig::validate() const {
  require(beta > 0.0, "RewardConfig: beta must be positive");
  require(violation_weights.size() == 4 && (violation_weights.array() >= 0.0).all(),
          "RewardConfig: need 4 nonnegative violation weights");
}

double compute_reward(double step_cost, double steady_cost, const Vec& violations,
                      const RewardConfig& config) {
  require_size(violations.size(), config.violation_weights.size(), "compute_reward: violations");
  require((violations.array() >= 0.0).all(), "compute_reward: violations must be nonnegative");
  if ((violations.array() > 0.0).any()) return -config.violation_weights.dot(violations);
  return config.beta * (steady_cost - step_cost);
}

// ---------------------------------------------------------------------------
// Environment

int EnvConfig::substeps() const { return static_cast<int>(std::lround(dt_minutes / record_minutes)); }

std::size_t EnvConfig::hours_needed() const {
  const double minutes = episode_steps * dt_minutes;
  return static_cast<std::size_t>(std::ceil(minutes / 60.0)) + static_cast<std::size_t>(forecast_hours) + 1;
}

void EnvConfig::validate() const {
  require(dt_minutes > 0.0 && record_minutes > 0.0, "EnvConfig: step lengths must be positive");
  require(std::abs(dt_minutes / record_minutes - substeps()) < 1e-9,
          "EnvConfig: dt_minutes must be a multiple of record_minutes");
  require(std::abs(60.0 / dt_minutes - std::round(60.0 / dt_minutes)) < 1e-9,
          "EnvConfig: dt_minutes must divide one hour");
  require(forecast_hours > 0 && episode_steps > 0, "EnvConfig: forecast and episode length must be positive");
  require(inputs.size() == 4 && observations.size() == 4, "EnvConfig: expects 4 inputs and 4 observations");
  require(storage_lower < storage_upper, "EnvConfig: storage bounds");
  require(demand_rate >= 0.0, "EnvConfig: demand must be nonnegative");
  reward.validate();
}

Vec Observation::flat(bool expanded) const {
  const auto& f = expanded ? forecast_steps : forecast_hourly;
  Vec v(x_obs_scaled.size() + 1 + static_cast<Eigen::Index>(f.size()));
  v.head(x_obs_scaled.size()) = x_obs_scaled;
  v[x_obs_scaled.size()] = storage;
  for (std::size_t i = 0; i < f.size(); ++i) v[x_obs_scaled.size() + 1 + static_cast<Eigen::Index>(i)] = f[i];
  return v;
}

Env::Env(std::unique_ptr<PlantModel> plant, EnvConfig config, std::shared_ptr<const PriceSeries> prices)
    : plant_(std::move(plant)), config_(std::move(config)), prices_(std::move(prices)) {
  require(plant_ != nullptr && prices_ != nullptr, "Env: plant and prices required");
  config_.validate();
  require(plant_->n_input() == config_.inputs.size() && plant_->n_obs() == config_.observations.size(),
          "Env: plant layout does not match the configuration");
  require(prices_->size() >= config_.hours_needed(), "Env: price series shorter than one episode plus forecast");
  plant_->reset();
  steady_y_ = plant_->steady_output();
  storage_ = config_.storage_midpoint();
}

Env::Env(const Env& o)
    : plant_(o.plant_->clone()), config_(o.config_), prices_(o.prices_), steady_y_(o.steady_y_), t_(o.t_),
      offset_(o.offset_), storage_(o.storage_) {}

std::size_t Env::max_offset() const { return prices_->size() - config_.hours_needed(); }

Observation Env::reset(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, max_offset());
  return reset_at(pick(rng));
}

Observation Env::reset_at(std::size_t offset) {
  require(offset <= max_offset(), "Env::reset_at: offset leaves no room for an episode");
  plant_->reset();
  offset_ = offset;
  t_ = 0;
  storage_ = config_.storage_midpoint();
  return observe();
}

std::vector<double> Env::step_prices(int steps) const {
  return prices_->per_step(offset_, static_cast<int>(std::lround(t_ * config_.dt_minutes)), steps,
                           config_.dt_minutes);
}

Observation Env::observe() const {
  Observation o;
  o.x_obs_scaled = config_.observations.to_scaled(plant_->observe());
  o.storage = storage_;
  const int minute = static_cast<int>(std::lround(t_ * config_.dt_minutes));
  o.forecast_hourly = prices_->window(offset_ + static_cast<std::size_t>(minute / 60),
                                     static_cast<std::size_t>(config_.forecast_hours));
  o.forecast_steps = step_prices(static_cast<int>(std::lround(config_.forecast_hours * 60.0 / config_.dt_minutes)));
  return o;
}

StepResult Env::step(const Vec& u_scaled) {
  require_size(u_scaled.size(), config_.inputs.size(), "Env::step: action");
  require(u_scaled.allFinite(), "Env::step: non-finite action");
  require(t_ < config_.episode_steps, "Env::step: episode already finished");
  StepResult r;
  StepInfo& info = r.info;
  const Vec clipped = u_scaled.cwiseMax(-1.0).cwiseMin(1.0);
  info.action_clipped = (clipped - u_scaled).cwiseAbs().maxCoeff() > 0.0;
  info.u_applied = config_.inputs.to_physical(clipped);
  info.y = plant_->output(info.u_applied);
  info.price = step_prices(1)[0];
  const double dt_h = config_.dt_hours();
  info.cost = info.price * info.y[config_.energy_output] * dt_h;
  info.steady_cost = info.price * steady_y_[config_.energy_output] * dt_h;

  const int n_sub = config_.substeps();
  for (int k = 0; k < n_sub; ++k) {
    info.substeps.push_back({plant_->observe(), info.u_applied, plant_->output(info.u_applied)});
    if (!plant_->advance(info.u_applied, config_.record_minutes)) {
      info.integrator_failed = true;
      break;
    }
  }

  info.storage_before = storage_;
  info.storage_delta = dt_h * (info.y[config_.production_output] - config_.demand_rate);
  const double unclipped = storage_ + info.storage_delta;
  storage_ = std::clamp(unclipped, config_.storage_lower, config_.storage_upper);
  info.storage_correction = storage_ - unclipped;

  const Vec xs = config_.observations.to_scaled(plant_->observe());
  info.violations = Vec::Zero(4);
  for (int i = 0; i < 3; ++i) info.violations[i] = std::max(0.0, std::abs(xs[i]) - 1.0);
  info.violations[3] = std::abs(info.storage_correction);
  info.any_violation = (info.violations.array() > 0.0).any();

  r.reward = compute_reward(info.cost, info.steady_cost, info.violations, config_.reward);
  ++t_;
  r.done = info.integrator_failed || t_ >= config_.episode_steps;
  r.observation = observe();
  return r;
}

// ---------------------------------------------------------------------------
// Trajectory CSV

void write_trajectory_csv(const std::string& path, std::span<const TrajectoryRow> rows,
                          const std::string& config_hash) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write trajectory file " + path);
  if (!config_hash.empty()) f << "# config_hash " << config_hash << "\n";
  f << "t,u_F_mac,u_F_dr,u_xi_phx,u_xi_cond,x_I_prod,x_dT_rc,x_N_r,x_T_tray20,N_s,y_E,y_n_product,price,"
       "reward,viol_I_prod,viol_dT_rc,viol_N_r,viol_N_s,violation\n";
  for (const auto& r : rows) {
    f << r.t;
    for (Eigen::Index i = 0; i < r.u.size(); ++i) f << ',' << fmt(r.u[i]);
    for (Eigen::Index i = 0; i < r.x_obs.size(); ++i) f << ',' << fmt(r.x_obs[i]);
    f << ',' << fmt(r.storage);
    for (Eigen::Index i = 0; i < r.y.size(); ++i) f << ',' << fmt(r.y[i]);
    f << ',' << fmt(r.price) << ',' << fmt(r.reward);
    for (Eigen::Index i = 0; i < r.violations.size(); ++i) f << ',' << fmt(r.violations[i]);
    f << ',' << ((r.violations.array() > 0.0).any() ? 1 : 0) << '\n';
  }
}

std::vector<TrajectoryRow> read_trajectory_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open trajectory file " + path);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  std::vector<TrajectoryRow> rows;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    std::vector<double> v;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const auto next = std::min(line.find(',', pos), line.size());
      double d = 0.0;
      if (!parse_double(std::string_view(line).substr(pos, next - pos), d))
        throw ParseError("bad number in trajectory row", lineno);
      v.push_back(d);
      pos = next + 1;
    }
    if (v.size() != 19) throw ParseError("expected 19 columns", lineno);
    TrajectoryRow r;
    r.t = static_cast<int>(v[0]);
    r.u = Eigen::Map<Vec>(v.data() + 1, 4);
    r.x_obs = Eigen::Map<Vec>(v.data() + 5, 4);
    r.storage = v[9];
    r.y = Eigen::Map<Vec>(v.data() + 10, 2);
    r.price = v[12];
    r.reward = v[13];
    r.violations = Eigen::Map<Vec>(v.data() + 14, 4);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace kenmpc::env
