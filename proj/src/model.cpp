#include "fedsb/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "fedsb/rng.hpp"

namespace fedsb {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

// Effective weight of one site: W0 + dW.
Matrix site_weight(const SiteMatrices& weights, const SiteMatrices& updates,
                   std::size_t s) {
  return add(weights[s], updates[s]);
}

void check_site_matrices(const ArchShape& shape, const SiteMatrices& m,
                         const char* label) {
  if (m.size() != shape.sites.size()) {
    fail(std::string(label) + ": expected " + std::to_string(shape.sites.size()) +
         " site matrices, got " + std::to_string(m.size()));
  }
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (m[s].rows() != shape.sites[s].out_dim || m[s].cols() != shape.sites[s].in_dim) {
      fail(std::string(label) + ": shape mismatch at site " + shape.sites[s].name);
    }
  }
}

double sample_loss(LossKind loss, std::span<const double> pred,
                   std::span<const double> target) {
  if (loss == LossKind::kSquaredError) {
    double sum = 0.0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
      const double d = pred[k] - target[k];
      sum += d * d;
    }
    return sum;
  }
  // Softmax cross entropy, stabilized by the max logit.
  double mx = pred[0];
  for (double v : pred) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : pred) z += std::exp(v - mx);
  const double log_z = std::log(z) + mx;
  double sum = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) sum -= target[k] * (pred[k] - log_z);
  return sum;
}

// d(sample loss)/d(prediction).
void loss_backward(LossKind loss, std::span<const double> pred,
                   std::span<const double> target, std::span<double> d_pred) {
  if (loss == LossKind::kSquaredError) {
    for (std::size_t k = 0; k < pred.size(); ++k)
      d_pred[k] = 2.0 * (pred[k] - target[k]);
    return;
  }
  double mx = pred[0];
  for (double v : pred) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : pred) z += std::exp(v - mx);
  double target_mass = 0.0;
  for (double t : target) target_mass += t;
  for (std::size_t k = 0; k < pred.size(); ++k)
    d_pred[k] = target_mass * std::exp(pred[k] - mx) / z - target[k];
}

struct SampleView {
  std::span<const double> x;
  std::span<const double> y;
};

SampleView sample_at(const Batch& batch, std::size_t row) {
  return {batch.inputs.data().subspan(row * batch.inputs.cols(), batch.inputs.cols()),
          batch.targets.data().subspan(row * batch.targets.cols(), batch.targets.cols())};
}

// Forward pass for one example; for the MLP also returns the hidden
// activations needed by the backward pass.
void sample_forward(const ArchShape& shape, const std::vector<Matrix>& w,
                    std::span<const double> x, std::vector<double>& hidden,
                    std::vector<double>& pred) {
  if (shape.kind == ModelKind::kLinear) {
    const Matrix& w0 = w[0];
    pred.assign(w0.rows(), 0.0);
    for (std::size_t i = 0; i < w0.rows(); ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < w0.cols(); ++j) acc += w0(i, j) * x[j];
      pred[i] = acc;
    }
    return;
  }
  const Matrix& w1 = w[0];
  const Matrix& w2 = w[1];
  hidden.assign(w1.rows(), 0.0);
  for (std::size_t i = 0; i < w1.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < w1.cols(); ++j) acc += w1(i, j) * x[j];
    hidden[i] = std::tanh(acc);
  }
  pred.assign(w2.rows(), 0.0);
  for (std::size_t i = 0; i < w2.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < w2.cols(); ++j) acc += w2(i, j) * hidden[j];
    pred[i] = acc;
  }
}

// Accumulates d(sample loss)/dW into `grads` (scaled by `weight`).
void sample_backward(const ArchShape& shape, const std::vector<Matrix>& w,
                     SampleView sample, const std::vector<double>& hidden,
                     const std::vector<double>& pred, double weight,
                     SiteMatrices& grads) {
  std::vector<double> d_pred(pred.size());
  loss_backward(shape.loss, pred, sample.y, d_pred);
  if (shape.kind == ModelKind::kLinear) {
    Matrix& g = grads[0];
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j)
        g(i, j) += weight * d_pred[i] * sample.x[j];
    return;
  }
  const Matrix& w2 = w[1];
  Matrix& g1 = grads[0];
  Matrix& g2 = grads[1];
  for (std::size_t i = 0; i < g2.rows(); ++i)
    for (std::size_t j = 0; j < g2.cols(); ++j)
      g2(i, j) += weight * d_pred[i] * hidden[j];
  std::vector<double> d_hidden(hidden.size(), 0.0);
  for (std::size_t j = 0; j < hidden.size(); ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < w2.rows(); ++i) acc += w2(i, j) * d_pred[i];
    d_hidden[j] = acc * (1.0 - hidden[j] * hidden[j]);
  }
  for (std::size_t i = 0; i < g1.rows(); ++i)
    for (std::size_t j = 0; j < g1.cols(); ++j)
      g1(i, j) += weight * d_hidden[i] * sample.x[j];
}

std::vector<Matrix> effective_weights(const ArchShape& shape, const SiteMatrices& weights,
                                      const SiteMatrices& updates) {
  check_site_matrices(shape, weights, "weights");
  check_site_matrices(shape, updates, "effective_updates");
  std::vector<Matrix> w;
  w.reserve(weights.size());
  for (std::size_t s = 0; s < weights.size(); ++s) w.push_back(site_weight(weights, updates, s));
  return w;
}

SiteMatrices zero_gradients(const ArchShape& shape) {
  SiteMatrices g;
  g.reserve(shape.sites.size());
  for (const SiteSpec& site : shape.sites) g.emplace_back(site.out_dim, site.in_dim);
  return g;
}

}  // namespace

ArchShape ArchShape::linear(std::size_t out_dim, std::size_t in_dim, LossKind loss) {
  ArchShape shape;
  shape.kind = ModelKind::kLinear;
  shape.loss = loss;
  shape.sites = {{"w", out_dim, in_dim}};
  shape.validate();
  return shape;
}

ArchShape ArchShape::mlp(std::size_t out_dim, std::size_t hidden, std::size_t in_dim,
                         LossKind loss) {
  ArchShape shape;
  shape.kind = ModelKind::kMlpTanh;
  shape.loss = loss;
  shape.sites = {{"w1", hidden, in_dim}, {"w2", out_dim, hidden}};
  shape.validate();
  return shape;
}

std::size_t ArchShape::input_dim() const { return sites.front().in_dim; }
std::size_t ArchShape::output_dim() const { return sites.back().out_dim; }

void ArchShape::validate() const {
  const std::size_t expected = kind == ModelKind::kLinear ? 1u : 2u;
  if (sites.size() != expected) fail("arch: wrong site count for model kind");
  for (const SiteSpec& s : sites) {
    if (s.out_dim == 0 || s.in_dim == 0) fail("arch: zero site dimension");
    if (s.name.empty()) fail("arch: unnamed site");
  }
  for (std::size_t a = 0; a < sites.size(); ++a)
    for (std::size_t b = a + 1; b < sites.size(); ++b)
      if (sites[a].name == sites[b].name) fail("arch: duplicate site name");
  if (kind == ModelKind::kMlpTanh && sites[1].in_dim != sites[0].out_dim)
    fail("arch: mlp hidden dimensions disagree");
}

Batch take_batch(const Batch& b, std::span<const std::size_t> indices) {
  Batch out;
  out.inputs = Matrix(indices.size(), b.inputs.cols());
  out.targets = Matrix(indices.size(), b.targets.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    for (std::size_t j = 0; j < b.inputs.cols(); ++j)
      out.inputs(r, j) = b.inputs(indices[r], j);
    for (std::size_t j = 0; j < b.targets.cols(); ++j)
      out.targets(r, j) = b.targets(indices[r], j);
  }
  return out;
}

void validate_batch(const ArchShape& shape, const Batch& batch) {
  if (batch.inputs.rows() != batch.targets.rows()) fail("batch: row counts differ");
  if (batch.inputs.cols() != shape.input_dim()) fail("batch: input width mismatch");
  if (batch.targets.cols() != shape.output_dim()) fail("batch: target width mismatch");
  if (!all_finite(batch.inputs) || !all_finite(batch.targets))
    fail("batch: non-finite entries");
}

double forward_loss(const ArchShape& shape, const SiteMatrices& weights,
                    const SiteMatrices& effective_updates, const Batch& batch) {
  validate_batch(shape, batch);
  const std::vector<Matrix> w = effective_weights(shape, weights, effective_updates);
  std::vector<double> hidden;
  std::vector<double> pred;
  double total = 0.0;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const SampleView s = sample_at(batch, r);
    sample_forward(shape, w, s.x, hidden, pred);
    total += sample_loss(shape.loss, pred, s.y);
  }
  return batch.size() == 0 ? 0.0 : total / static_cast<double>(batch.size());
}

SiteMatrices batch_gradient(const ArchShape& shape, const SiteMatrices& weights,
                            const SiteMatrices& effective_updates, const Batch& batch) {
  validate_batch(shape, batch);
  if (batch.size() == 0) fail("batch_gradient: empty batch");
  const std::vector<Matrix> w = effective_weights(shape, weights, effective_updates);
  SiteMatrices grads = zero_gradients(shape);
  const double weight = 1.0 / static_cast<double>(batch.size());
  std::vector<double> hidden;
  std::vector<double> pred;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const SampleView s = sample_at(batch, r);
    sample_forward(shape, w, s.x, hidden, pred);
    sample_backward(shape, w, s, hidden, pred, weight, grads);
  }
  return grads;
}

std::vector<SiteMatrices> per_sample_gradients(const ArchShape& shape,
                                               const SiteMatrices& weights,
                                               const SiteMatrices& effective_updates,
                                               const Batch& batch) {
  validate_batch(shape, batch);
  if (batch.size() == 0) fail("per_sample_gradients: empty batch");
  const std::vector<Matrix> w = effective_weights(shape, weights, effective_updates);
  std::vector<SiteMatrices> out;
  out.reserve(batch.size());
  std::vector<double> hidden;
  std::vector<double> pred;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const SampleView s = sample_at(batch, r);
    sample_forward(shape, w, s.x, hidden, pred);
    SiteMatrices grads = zero_gradients(shape);
    sample_backward(shape, w, s, hidden, pred, 1.0, grads);
    out.push_back(std::move(grads));
  }
  return out;
}

Matrix model_predictions(const ArchShape& shape, const SiteMatrices& weights,
                         const SiteMatrices& effective_updates, const Matrix& inputs) {
  if (inputs.cols() != shape.input_dim()) fail("model_predictions: input width mismatch");
  const std::vector<Matrix> w = effective_weights(shape, weights, effective_updates);
  Matrix out(inputs.rows(), shape.output_dim());
  std::vector<double> hidden;
  std::vector<double> pred;
  for (std::size_t r = 0; r < inputs.rows(); ++r) {
    const auto x = inputs.data().subspan(r * inputs.cols(), inputs.cols());
    sample_forward(shape, w, x, hidden, pred);
    for (std::size_t k = 0; k < pred.size(); ++k) out(r, k) = pred[k];
  }
  return out;
}

Matrix random_low_rank(std::size_t m, std::size_t n, double norm, std::size_t rank,
                       std::uint64_t seed) {
  if (norm == 0.0) return Matrix(m, n);
  const std::size_t max_rank = std::min(m, n);
  const std::size_t r = rank == 0 ? max_rank : std::min(rank, max_rank);
  const Matrix u = orthonormal_columns(m, r, seed_stream(seed, "u"));
  const Matrix v = orthonormal_columns(n, r, seed_stream(seed, "v"));
  std::mt19937_64 rng(seed_stream(seed, "spectrum"));
  std::uniform_real_distribution<double> spread(0.5, 1.5);
  Matrix us = u;
  for (std::size_t j = 0; j < r; ++j) {
    const double sj = spread(rng);
    for (std::size_t i = 0; i < m; ++i) us(i, j) *= sj;
  }
  Matrix d = matmul(us, transpose(v));
  return scale(d, norm / frobenius_norm(d));
}

TeacherTask make_teacher_task(const TeacherSpec& spec, std::uint64_t seed) {
  spec.shape.validate();
  if (spec.samples < 1) fail("teacher: need at least one sample");
  if (spec.design == InputDesign::kOrthogonal && spec.samples < spec.shape.input_dim())
    fail("teacher: orthogonal design needs samples >= input_dim");

  TeacherTask task;
  task.shape = spec.shape;
  for (std::size_t s = 0; s < spec.shape.sites.size(); ++s) {
    const SiteSpec& site = spec.shape.sites[s];
    const double w0_std = 1.0 / std::sqrt(static_cast<double>(site.in_dim));
    task.weights.push_back(gaussian_matrix(site.out_dim, site.in_dim, w0_std,
                                           seed_stream(seed, "teacher-w0", s)));
    task.delta_star.push_back(random_low_rank(site.out_dim, site.in_dim,
                                              spec.delta_scale, spec.delta_rank,
                                              seed_stream(seed, "teacher-delta", s)));
  }

  const std::size_t n_in = spec.shape.input_dim();
  if (spec.design == InputDesign::kOrthogonal) {
    task.data.inputs = scale(
        orthonormal_columns(spec.samples, n_in, seed_stream(seed, "teacher-x")),
        std::sqrt(static_cast<double>(spec.samples)));
  } else {
    task.data.inputs =
        gaussian_matrix(spec.samples, n_in, 1.0, seed_stream(seed, "teacher-x"));
  }

  // Teacher labels at W0 + delta_star, plus observation noise on the targets.
  std::vector<Matrix> teacher;
  for (std::size_t s = 0; s < task.weights.size(); ++s)
    teacher.push_back(add(task.weights[s], task.delta_star[s]));
  Matrix targets(spec.samples, spec.shape.output_dim());
  std::vector<double> hidden;
  std::vector<double> pred;
  for (std::size_t r = 0; r < spec.samples; ++r) {
    const auto x = task.data.inputs.data().subspan(r * n_in, n_in);
    sample_forward(spec.shape, teacher, x, hidden, pred);
    for (std::size_t k = 0; k < pred.size(); ++k) targets(r, k) = pred[k];
  }
  if (spec.noise_std > 0.0) {
    const Matrix noise = gaussian_matrix(targets.rows(), targets.cols(), spec.noise_std,
                                         seed_stream(seed, "teacher-noise"));
    targets = add(targets, noise);
  }
  if (spec.shape.loss == LossKind::kSoftmaxCrossEntropy) {
    // Soft labels: row-wise softmax of the (noisy) teacher logits.
    for (std::size_t r = 0; r < targets.rows(); ++r) {
      double mx = targets(r, 0);
      for (std::size_t k = 0; k < targets.cols(); ++k) mx = std::max(mx, targets(r, k));
      double z = 0.0;
      for (std::size_t k = 0; k < targets.cols(); ++k) z += std::exp(targets(r, k) - mx);
      for (std::size_t k = 0; k < targets.cols(); ++k)
        targets(r, k) = std::exp(targets(r, k) - mx) / z;
    }
  }
  task.data.targets = std::move(targets);
  return task;
}

}  // namespace fedsb
