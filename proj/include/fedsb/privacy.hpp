#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedsb/matrix.hpp"

namespace fedsb {

struct PrivacyParams {
  double clip_norm = 1.0;         // C, per-sample L2 clipping bound
  double noise_multiplier = 0.0;  // sigma (noise stddev = sigma * C)
  double delta = 1e-5;
  double sample_rate = 1.0;       // q, batch / dataset size
  long steps = 0;                 // T, optimizer steps composed so far
  void validate() const;
};

// One DP-SGD step over the flattened trainable coordinates: clips each
// per-sample gradient to L2 norm C, averages, and adds N(0, sigma^2 C^2 I) /
// batch. With sigma = 0 and no clipping active this is bit-identical to the
// plain mean. Deterministic per seed.
std::vector<double> dp_sgd_step(std::span<const std::vector<double>> per_sample_grads,
                                const PrivacyParams& params, std::uint64_t noise_seed);

// Fixed Renyi order grid used by the accountant: 1.25, 1.50, ..., 64.00.
const std::vector<double>& rdp_alpha_grid();

// Renyi divergence of one subsampled-Gaussian step at order alpha: exact
// binomial expansion for integer alpha, the stable two-part series otherwise.
double subsampled_gaussian_rdp(double alpha, double sigma, double sample_rate);

// (epsilon, delta)-DP via RDP composition over T steps:
//   epsilon = min_alpha [ T * rdp(alpha, sigma, q) + log(1/delta) / (alpha - 1) ].
double accountant_epsilon(const PrivacyParams& params);

// Smallest sigma (within 1e-3) whose accounted epsilon is <= target.
double calibrate_sigma(double target_epsilon, double delta, double sample_rate,
                       long steps);

struct NoiseDecomposition {
  Matrix first_order;
  Matrix second_order;
  Matrix total;  // == first_order + second_order
};

// Error of a privately trained pair against the noiseless one:
//   (B + xi_B)(A + xi_A) - B A = xi_B A + B xi_A + xi_B xi_A (times scaling).
// The cross term is the amplification unique to training both factors.
NoiseDecomposition noise_decompose_lora(const Matrix& b, const Matrix& a,
                                        const Matrix& xi_b, const Matrix& xi_a,
                                        double scaling);

// Same for the SB triple: the update is linear in R, so the second-order term
// is identically zero and the error is exactly B xi_R A.
NoiseDecomposition noise_decompose_sb(const Matrix& b, const Matrix& a,
                                      const Matrix& xi_r);

// Sequential privacy ledger owned by the orchestrator: accumulates steps and
// converts to epsilon on demand.
class Accountant {
 public:
  Accountant() = default;
  Accountant(double sigma, double delta, double sample_rate);

  void record_steps(long n);
  long steps() const { return steps_; }
  double sigma() const { return sigma_; }
  double delta() const { return delta_; }
  double sample_rate() const { return sample_rate_; }
  double epsilon() const;

  // Audit dump: sigma, q, T, delta, epsilon, and the per-alpha ledger.
  std::string dump_json() const;

 private:
  double sigma_ = 0.0;
  double delta_ = 1e-5;
  double sample_rate_ = 1.0;
  long steps_ = 0;
};

}  // namespace fedsb
