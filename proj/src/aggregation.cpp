#include "fedsb/aggregation.hpp"

#include <stdexcept>
#include <string>

namespace fedsb {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

std::vector<double> resolve_weights(std::size_t count, ClientWeights weights) {
  if (count == 0) fail("aggregation: no client updates");
  if (weights.empty())
    return std::vector<double>(count, 1.0 / static_cast<double>(count));
  if (weights.size() != count) fail("aggregation: weight count mismatch");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) fail("aggregation: weights must be positive");
    sum += w;
  }
  std::vector<double> out(weights.begin(), weights.end());
  for (double& w : out) w /= sum;
  return out;
}

const LoraPair& as_lora(const ClientUpdate& u) {
  const LoraPair* p = std::get_if<LoraPair>(&u.adapter);
  if (p == nullptr) fail("aggregation: expected a LoRA pair update");
  return *p;
}

const SbTriple& as_sb(const ClientUpdate& u) {
  const SbTriple* t = std::get_if<SbTriple>(&u.adapter);
  if (t == nullptr) fail("aggregation: expected an SB triple update");
  return *t;
}

void check_lora_family(std::span<const ClientUpdate> updates) {
  const LoraPair& first = as_lora(updates.front());
  for (const ClientUpdate& u : updates) {
    if (u.method != updates.front().method) fail("aggregation: mixed methods");
    const LoraPair& p = as_lora(u);
    if (p.rank() != first.rank()) fail("aggregation: mixed ranks");
    if (!p.b.same_shape(first.b) || !p.a.same_shape(first.a))
      fail("aggregation: mixed site shapes");
    if (p.alpha != first.alpha) fail("aggregation: mixed alpha");
  }
}

// Weighted elementwise mean of the B and A factors.
LoraPair mean_pair(std::span<const ClientUpdate> updates,
                   std::span<const double> w) {
  const LoraPair& first = as_lora(updates.front());
  LoraPair mean;
  mean.alpha = first.alpha;
  mean.b = Matrix(first.b.rows(), first.b.cols());
  mean.a = Matrix(first.a.rows(), first.a.cols());
  for (std::size_t i = 0; i < updates.size(); ++i) {
    const LoraPair& p = as_lora(updates[i]);
    add_scaled_in_place(mean.b, p.b, w[i]);
    add_scaled_in_place(mean.a, p.a, w[i]);
  }
  return mean;
}

Matrix mean_effective(std::span<const ClientUpdate> updates,
                      std::span<const double> w) {
  Matrix mean = scale(effective_update(updates.front().adapter), w[0]);
  for (std::size_t i = 1; i < updates.size(); ++i)
    add_scaled_in_place(mean, effective_update(updates[i].adapter), w[i]);
  return mean;
}

}  // namespace

AggregateResult agg_fedit(std::span<const ClientUpdate> updates, ClientWeights weights) {
  const std::vector<double> w = resolve_weights(updates.size(), weights);
  check_lora_family(updates);
  LoraPair mean = mean_pair(updates, w);
  AggregateResult out;
  out.delta_agg = effective_update(mean);
  out.global = std::move(mean);
  return out;
}

AggregateResult agg_fedex(std::span<const ClientUpdate> updates, ClientWeights weights) {
  const std::vector<double> w = resolve_weights(updates.size(), weights);
  check_lora_family(updates);
  LoraPair mean = mean_pair(updates, w);
  const Matrix averaged_product = effective_update(mean);
  // Residual between the ideal mean of client updates and the product of the
  // averaged factors; folding it into the base weight restores exactness.
  Matrix ideal(averaged_product.rows(), averaged_product.cols());
  for (std::size_t i = 0; i < updates.size(); ++i) {
    const LoraPair& p = as_lora(updates[i]);
    add_scaled_in_place(ideal, matmul(p.b, p.a), w[i] * p.scaling());
  }
  AggregateResult out;
  out.w_err = sub(ideal, averaged_product);
  out.delta_agg = add(averaged_product, *out.w_err);
  out.global = std::move(mean);
  return out;
}

AggregateResult agg_flora(std::span<const ClientUpdate> updates,
                          std::uint64_t reinit_seed, ClientWeights weights) {
  const std::vector<double> w = resolve_weights(updates.size(), weights);
  check_lora_family(updates);
  const LoraPair& first = as_lora(updates.front());

  // Stack [B_1 ... B_c] against [w_1 A_1; ...; w_c A_c]; the product is the
  // exact weighted mean of the client updates.
  std::vector<Matrix> b_blocks;
  std::vector<Matrix> a_blocks;
  b_blocks.reserve(updates.size());
  a_blocks.reserve(updates.size());
  for (std::size_t i = 0; i < updates.size(); ++i) {
    const LoraPair& p = as_lora(updates[i]);
    b_blocks.push_back(p.b);
    a_blocks.push_back(scale(p.a, w[i]));
  }
  const Matrix stacked = matmul(hcat(b_blocks), vcat(a_blocks));

  AggregateResult out;
  out.delta_agg = scale(stacked, first.scaling());
  out.global = init_lora(first.b.rows(), first.a.cols(), first.rank(), first.alpha,
                         reinit_seed);
  return out;
}

AggregateResult agg_ffa(std::span<const ClientUpdate> updates, const Matrix& shared_a,
                        ClientWeights weights) {
  const std::vector<double> w = resolve_weights(updates.size(), weights);
  check_lora_family(updates);
  for (const ClientUpdate& u : updates) {
    if (!(as_lora(u).a == shared_a))
      fail("agg_ffa: client A deviates from the shared frozen A");
  }
  const LoraPair& first = as_lora(updates.front());
  LoraPair global;
  global.alpha = first.alpha;
  global.a = shared_a;
  global.b = Matrix(first.b.rows(), first.b.cols());
  for (std::size_t i = 0; i < updates.size(); ++i)
    add_scaled_in_place(global.b, as_lora(updates[i]).b, w[i]);
  AggregateResult out;
  out.delta_agg = effective_update(global);
  out.global = std::move(global);
  return out;
}

AggregateResult agg_fedsb(std::span<const ClientUpdate> updates, ClientWeights weights) {
  const std::vector<double> w = resolve_weights(updates.size(), weights);
  const SbTriple& first = as_sb(updates.front());
  for (const ClientUpdate& u : updates) {
    if (u.method != updates.front().method) fail("aggregation: mixed methods");
    const SbTriple& t = as_sb(u);
    if (t.rank() != first.rank()) fail("agg_fedsb: mixed ranks");
    if (!(t.b == first.b) || !(t.a == first.a))
      fail("agg_fedsb: frozen basis differs between clients");
  }
  SbTriple global;
  global.b = first.b;
  global.a = first.a;
  global.r = Matrix(first.rank(), first.rank());
  for (std::size_t i = 0; i < updates.size(); ++i)
    add_scaled_in_place(global.r, as_sb(updates[i]).r, w[i]);
  AggregateResult out;
  out.delta_agg = effective_update(global);
  out.global = std::move(global);
  return out;
}

AggregateResult agg_fedsb_hetero(std::span<const ClientUpdate> updates,
                                 const Matrix& basis_b, const Matrix& basis_a,
                                 ClientWeights weights) {
  const std::vector<double> w = resolve_weights(updates.size(), weights);
  const std::size_t r_max = basis_b.cols();
  if (basis_a.rows() != r_max) fail("agg_fedsb_hetero: basis shapes disagree");
  Matrix core(r_max, r_max);
  for (std::size_t i = 0; i < updates.size(); ++i) {
    const SbTriple& t = as_sb(updates[i]);
    const std::size_t ri = t.rank();
    if (ri > r_max) fail("agg_fedsb_hetero: client rank exceeds basis rank");
    if (!(t.b == take_cols(basis_b, ri)) || !(t.a == take_rows(basis_a, ri)))
      fail("agg_fedsb_hetero: client basis is not a leading slice of the global basis");
    // Zero-pad the client core to r_max x r_max before averaging.
    for (std::size_t p = 0; p < ri; ++p)
      for (std::size_t q = 0; q < ri; ++q) core(p, q) += w[i] * t.r(p, q);
  }
  SbTriple global;
  global.b = basis_b;
  global.a = basis_a;
  global.r = std::move(core);
  AggregateResult out;
  out.delta_agg = effective_update(global);
  out.global = std::move(global);
  return out;
}

double divergence(std::span<const ClientUpdate> updates, const Matrix& delta_agg,
                  ClientWeights weights) {
  const std::vector<double> w = resolve_weights(updates.size(), weights);
  return frobenius_norm(sub(delta_agg, mean_effective(updates, w)));
}

}  // namespace fedsb
