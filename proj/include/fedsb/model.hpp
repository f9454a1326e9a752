#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedsb/matrix.hpp"

namespace fedsb {

enum class LossKind { kSquaredError, kSoftmaxCrossEntropy };
enum class ModelKind { kLinear, kMlpTanh };

// One adapted weight site: an out_dim x in_dim matrix that receives a
// low-rank update on top of its frozen base value.
struct SiteSpec {
  std::string name;
  std::size_t out_dim = 0;
  std::size_t in_dim = 0;
};

// Stand-in for the frozen pre-trained model: a single linear map y = W x or a
// two-layer tanh MLP y = W2 tanh(W1 x). Both weight matrices of the MLP are
// adapted sites.
struct ArchShape {
  ModelKind kind = ModelKind::kLinear;
  LossKind loss = LossKind::kSquaredError;
  std::vector<SiteSpec> sites;

  static ArchShape linear(std::size_t out_dim, std::size_t in_dim,
                          LossKind loss = LossKind::kSquaredError);
  static ArchShape mlp(std::size_t out_dim, std::size_t hidden, std::size_t in_dim,
                       LossKind loss = LossKind::kSquaredError);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  void validate() const;
};

struct Batch {
  Matrix inputs;   // batch x input_dim
  Matrix targets;  // batch x output_dim
  std::size_t size() const { return inputs.rows(); }
};

Batch take_batch(const Batch& b, std::span<const std::size_t> indices);
void validate_batch(const ArchShape& shape, const Batch& batch);

// One Matrix per site, aligned with ArchShape::sites.
using SiteMatrices = std::vector<Matrix>;

// Mean loss over the batch, evaluated at weights + effective_updates per site.
// Squared error sums over output coordinates; cross entropy expects target
// rows that sum to one.
double forward_loss(const ArchShape& shape, const SiteMatrices& weights,
                    const SiteMatrices& effective_updates, const Batch& batch);

// d(mean loss)/dW per site.
SiteMatrices batch_gradient(const ArchShape& shape, const SiteMatrices& weights,
                            const SiteMatrices& effective_updates, const Batch& batch);

// Per-example gradients; their mean equals batch_gradient.
std::vector<SiteMatrices> per_sample_gradients(const ArchShape& shape,
                                               const SiteMatrices& weights,
                                               const SiteMatrices& effective_updates,
                                               const Batch& batch);

// Model outputs (logits) for a block of inputs, one row per example.
Matrix model_predictions(const ArchShape& shape, const SiteMatrices& weights,
                         const SiteMatrices& effective_updates, const Matrix& inputs);

// Random m x n matrix with the given Frobenius norm and rank (0 = full).
Matrix random_low_rank(std::size_t m, std::size_t n, double norm, std::size_t rank,
                       std::uint64_t seed);

// Input designs for synthetic tasks. kOrthogonal builds inputs whose empirical
// second moment is exactly isotropic, which removes the finite-sample floor
// from span-recovery experiments.
enum class InputDesign { kGaussian, kOrthogonal };

struct TeacherSpec {
  ArchShape shape;
  double delta_scale = 1.0;    // Frobenius norm of the true update, per site
  std::size_t delta_rank = 0;  // 0 = full rank
  std::size_t samples = 256;
  double noise_std = 0.0;
  InputDesign design = InputDesign::kGaussian;
};

struct TeacherTask {
  ArchShape shape;
  SiteMatrices weights;     // W0 per site
  SiteMatrices delta_star;  // true update per site (teacher = W0 + delta_star)
  Batch data;
};

// Samples a teacher task: data generated by the model at W0 + delta_star plus
// observation noise. Deterministic per seed.
TeacherTask make_teacher_task(const TeacherSpec& spec, std::uint64_t seed);

}  // namespace fedsb
