#include "fedsb/privacy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

#include "nlohmann/json.hpp"

namespace fedsb {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

double log_add(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

double log_sub(double a, double b) {
  if (b == -kInf) return a;
  if (b > a) fail("log_sub: negative result");
  if (a == b) return -kInf;
  return a + std::log1p(-std::exp(b - a));
}

double log_erfc(double x) {
  if (x <= 25.0) return std::log(std::erfc(x));
  // Asymptotic expansion; erfc underflows past this point.
  const double x2 = x * x;
  return -x2 - std::log(x) - 0.5 * std::log(M_PI) +
         std::log1p(-0.5 / x2 + 0.75 / (x2 * x2));
}

// log E_{z~mu0}[(mu(z)/mu0(z))^alpha] for integer alpha via the exact
// binomial expansion.
double log_a_int(double q, double sigma, long alpha) {
  double log_a = -kInf;
  double log_binom = 0.0;
  const double s2 = sigma * sigma;
  for (long k = 0; k <= alpha; ++k) {
    if (k > 0) log_binom += std::log(static_cast<double>(alpha - k + 1)) -
                            std::log(static_cast<double>(k));
    const double term = log_binom + k * std::log(q) +
                        (alpha - k) * std::log1p(-q) +
                        (static_cast<double>(k) * k - k) / (2.0 * s2);
    log_a = log_add(log_a, term);
  }
  return log_a;
}

// Fractional alpha: split the integral at z0 and expand each half in a
// signed series accumulated in log space.
double log_a_frac(double q, double sigma, double alpha) {
  double log_a0 = -kInf;
  double log_a1 = -kInf;
  const double s2 = sigma * sigma;
  const double z0 = s2 * std::log(1.0 / q - 1.0) + 0.5;
  double log_coef = 0.0;  // log |C(alpha, i)|, updated iteratively
  double sign = 1.0;
  for (long i = 0;; ++i) {
    if (i > 0) {
      const double factor = (alpha - i + 1) / static_cast<double>(i);
      if (factor == 0.0) break;
      log_coef += std::log(std::fabs(factor));
      if (factor < 0.0) sign = -sign;
    }
    const double j = alpha - i;
    const double log_t0 = log_coef + i * std::log(q) + j * std::log1p(-q);
    const double log_t1 = log_coef + j * std::log(q) + i * std::log1p(-q);
    const double log_e0 = std::log(0.5) + log_erfc((i - z0) / (M_SQRT2 * sigma));
    const double log_e1 = std::log(0.5) + log_erfc((z0 - j) / (M_SQRT2 * sigma));
    const double log_s0 = log_t0 + (static_cast<double>(i) * i - i) / (2.0 * s2) + log_e0;
    const double log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
    if (sign > 0.0) {
      log_a0 = log_add(log_a0, log_s0);
      log_a1 = log_add(log_a1, log_s1);
    } else {
      log_a0 = log_sub(log_a0, log_s0);
      log_a1 = log_sub(log_a1, log_s1);
    }
    // Stop once the terms can no longer move the result: below e^-40 in
    // absolute terms (A >= 1 always) or 60 logs under the running sums.
    const double cut = std::max(-40.0, std::max(log_a0, log_a1) - 60.0);
    if (i > alpha && std::max(log_s0, log_s1) < cut) break;
    if (i > 200000) fail("subsampled_gaussian_rdp: series did not converge");
  }
  return log_add(log_a0, log_a1);
}

bool is_integer(double x) { return std::fabs(x - std::round(x)) < 1e-12; }

}  // namespace

void PrivacyParams::validate() const {
  if (!(clip_norm > 0.0)) fail("privacy: clip_norm must be positive");
  if (noise_multiplier < 0.0) fail("privacy: negative noise multiplier");
  if (!(delta > 0.0 && delta < 1.0)) fail("privacy: delta must lie in (0, 1)");
  if (!(sample_rate > 0.0 && sample_rate <= 1.0))
    fail("privacy: sample_rate must lie in (0, 1]");
  if (steps < 0) fail("privacy: negative step count");
}

std::vector<double> dp_sgd_step(std::span<const std::vector<double>> per_sample_grads,
                                const PrivacyParams& params, std::uint64_t noise_seed) {
  params.validate();
  if (per_sample_grads.empty()) fail("dp_sgd_step: empty batch");
  const std::size_t dim = per_sample_grads.front().size();
  const double batch = static_cast<double>(per_sample_grads.size());
  std::vector<double> out(dim, 0.0);
  for (const std::vector<double>& g : per_sample_grads) {
    if (g.size() != dim) fail("dp_sgd_step: inconsistent gradient dimensions");
    double norm_sq = 0.0;
    for (double v : g) norm_sq += v * v;
    const double norm = std::sqrt(norm_sq);
    const double clip = norm > params.clip_norm ? params.clip_norm / norm : 1.0;
    for (std::size_t i = 0; i < dim; ++i) out[i] += clip * g[i];
  }
  for (double& v : out) v /= batch;
  if (params.noise_multiplier > 0.0) {
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> dist(0.0,
                                          params.noise_multiplier * params.clip_norm);
    for (double& v : out) v += dist(rng) / batch;
  }
  return out;
}

const std::vector<double>& rdp_alpha_grid() {
  static const std::vector<double> grid = [] {
    std::vector<double> g;
    for (int i = 5; i <= 256; ++i) g.push_back(i * 0.25);
    return g;
  }();
  return grid;
}

double subsampled_gaussian_rdp(double alpha, double sigma, double sample_rate) {
  if (!(alpha > 1.0)) fail("subsampled_gaussian_rdp: alpha must exceed 1");
  if (!(sigma > 0.0)) fail("subsampled_gaussian_rdp: sigma must be positive");
  if (!(sample_rate > 0.0 && sample_rate <= 1.0))
    fail("subsampled_gaussian_rdp: sample_rate out of range");
  if (sample_rate == 1.0) return alpha / (2.0 * sigma * sigma);
  const double log_a = is_integer(alpha)
                           ? log_a_int(sample_rate, sigma,
                                       static_cast<long>(std::llround(alpha)))
                           : log_a_frac(sample_rate, sigma, alpha);
  return log_a / (alpha - 1.0);
}

double accountant_epsilon(const PrivacyParams& params) {
  params.validate();
  if (params.steps == 0) return 0.0;
  if (params.noise_multiplier == 0.0) return kInf;
  const double log_inv_delta = std::log(1.0 / params.delta);
  double best = kInf;
  for (double alpha : rdp_alpha_grid()) {
    const double rdp =
        subsampled_gaussian_rdp(alpha, params.noise_multiplier, params.sample_rate);
    best = std::min(best, params.steps * rdp + log_inv_delta / (alpha - 1.0));
  }
  return best;
}

double calibrate_sigma(double target_epsilon, double delta, double sample_rate,
                       long steps) {
  if (!(target_epsilon > 0.0)) fail("calibrate_sigma: target epsilon must be positive");
  PrivacyParams p;
  p.delta = delta;
  p.sample_rate = sample_rate;
  p.steps = steps;
  const auto eps_at = [&](double sigma) {
    p.noise_multiplier = sigma;
    return accountant_epsilon(p);
  };
  double hi = 1.0;
  int grow = 0;
  while (eps_at(hi) > target_epsilon) {
    hi *= 2.0;
    if (++grow > 40) fail("calibrate_sigma: target epsilon unreachable");
  }
  double lo = hi / 2.0;
  while (lo > 1e-4 && eps_at(lo) <= target_epsilon) {
    hi = lo;
    lo /= 2.0;
  }
  while (hi - lo > 1e-3) {
    const double mid = 0.5 * (lo + hi);
    if (eps_at(mid) <= target_epsilon) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

namespace {

void check_pair_shapes(const Matrix& b, const Matrix& a, const Matrix& xi_b,
                       const Matrix& xi_a) {
  if (!b.same_shape(xi_b) || !a.same_shape(xi_a) || b.cols() != a.rows())
    fail("noise_decompose_lora: shape mismatch");
}

}  // namespace

NoiseDecomposition noise_decompose_lora(const Matrix& b, const Matrix& a,
                                        const Matrix& xi_b, const Matrix& xi_a,
                                        double scaling) {
  check_pair_shapes(b, a, xi_b, xi_a);
  NoiseDecomposition d;
  d.first_order = scale(add(matmul(xi_b, a), matmul(b, xi_a)), scaling);
  d.second_order = scale(matmul(xi_b, xi_a), scaling);
  d.total = add(d.first_order, d.second_order);
  return d;
}

NoiseDecomposition noise_decompose_sb(const Matrix& b, const Matrix& a,
                                      const Matrix& xi_r) {
  if (b.cols() != xi_r.rows() || xi_r.cols() != a.rows())
    fail("noise_decompose_sb: shape mismatch");
  NoiseDecomposition d;
  d.first_order = matmul(b, matmul(xi_r, a));
  d.second_order = Matrix(d.first_order.rows(), d.first_order.cols());
  d.total = d.first_order;
  return d;
}

Accountant::Accountant(double sigma, double delta, double sample_rate)
    : sigma_(sigma), delta_(delta), sample_rate_(sample_rate) {
  PrivacyParams p;
  p.noise_multiplier = sigma;
  p.delta = delta;
  p.sample_rate = sample_rate;
  p.validate();
}

void Accountant::record_steps(long n) {
  if (n < 0) fail("accountant: negative step count");
  steps_ += n;
}

double Accountant::epsilon() const {
  PrivacyParams p;
  p.noise_multiplier = sigma_;
  p.delta = delta_;
  p.sample_rate = sample_rate_;
  p.steps = steps_;
  return accountant_epsilon(p);
}

std::string Accountant::dump_json() const {
  nlohmann::ordered_json j;
  j["sigma"] = sigma_;
  j["sample_rate"] = sample_rate_;
  j["steps"] = steps_;
  j["delta"] = delta_;
  const double eps = epsilon();
  j["epsilon"] = std::isfinite(eps) ? nlohmann::ordered_json(eps)
                                    : nlohmann::ordered_json("inf");
  nlohmann::ordered_json orders = nlohmann::ordered_json::array();
  if (sigma_ > 0.0 && steps_ > 0) {
    const double log_inv_delta = std::log(1.0 / delta_);
    for (double alpha : rdp_alpha_grid()) {
      const double rdp = subsampled_gaussian_rdp(alpha, sigma_, sample_rate_);
      nlohmann::ordered_json entry;
      entry["alpha"] = alpha;
      entry["rdp"] = steps_ * rdp;
      entry["epsilon"] = steps_ * rdp + log_inv_delta / (alpha - 1.0);
      orders.push_back(std::move(entry));
    }
  }
  j["orders"] = std::move(orders);
  return j.dump(2);
}

}  // namespace fedsb
