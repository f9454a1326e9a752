#pragma once

#include <cstdint>
#include <string_view>
#include <variant>
#include <vector>

#include "fedsb/matrix.hpp"
#include "fedsb/model.hpp"

namespace fedsb {

// The five aggregation strategies supported by the simulator.
enum class Method { kFedIt, kFedExLora, kFlora, kFfaLora, kFedSb };

std::string_view method_name(Method m);
Method method_from_name(std::string_view name);

// Classic low-rank pair: dW = (alpha / r) * B * A. The same struct backs the
// frozen-A variant (FFA), where only B trains.
struct LoraPair {
  Matrix b;  // m x r
  Matrix a;  // r x n
  double alpha = 16.0;
  std::size_t rank() const { return b.cols(); }
  double scaling() const { return alpha / static_cast<double>(rank()); }
};

// Square-core triple: dW = B * R * A with B, A frozen (orthonormal from the
// update-estimate SVD) and only the r x r core R trainable. No alpha scaling.
struct SbTriple {
  Matrix b;  // m x r, frozen
  Matrix r;  // r x r, trainable
  Matrix a;  // r x n, frozen
  std::size_t rank() const { return r.rows(); }
};

using Adapter = std::variant<LoraPair, SbTriple>;

Matrix effective_update(const LoraPair& p);
Matrix effective_update(const SbTriple& t);
Matrix effective_update(const Adapter& a);

struct LoraGradient {
  Matrix d_b;
  Matrix d_a;
};

// Chain rule from a full-site gradient G = dLoss/dW to the trainable parts.
LoraGradient lora_trainable_gradient(const LoraPair& p, const Matrix& d_loss_d_w);
// FFA freezes A: the gradient has a B slot only.
Matrix ffa_trainable_gradient(const LoraPair& p, const Matrix& d_loss_d_w);
Matrix sb_trainable_gradient(const SbTriple& t, const Matrix& d_loss_d_w);

// Standard pair init: A ~ N(0, 1/r), B = 0 (so the initial update is zero).
LoraPair init_lora(std::size_t out_dim, std::size_t in_dim, std::size_t rank,
                   double alpha, std::uint64_t seed);

// Initial value of the core R after the basis SVD.
enum class SbInitPolicy {
  kZeroR,      // R = 0: training starts exactly from the base model
  kSigmaStep,  // R = diag(S_r): start having taken the estimated first step
};

// Basis initialization from the estimated first full fine-tuning step:
// G_hat = -lr * batch gradient at dW = 0, truncated SVD at `rank`, then
// B = U_r and A = V_r^T (frozen thereafter). One triple per site.
std::vector<SbTriple> init_sb(const ArchShape& shape, const SiteMatrices& weights,
                              const Batch& init_batch, double lr, std::size_t rank,
                              SbInitPolicy policy = SbInitPolicy::kZeroR);

// Leading-block slice of a shared basis for a client with local rank
// local_rank <= basis rank: B[:, :r_i], R = 0 (r_i x r_i), A[:r_i, :].
SbTriple slice_sb(const SbTriple& global, std::size_t local_rank);

}  // namespace fedsb
