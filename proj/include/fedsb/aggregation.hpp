#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedsb/adapters.hpp"
#include "fedsb/matrix.hpp"

namespace fedsb {

// One client's trained adapter for a single site, as received by the server.
struct ClientUpdate {
  int client_id = 0;
  Method method = Method::kFedIt;
  Adapter adapter;
};

struct AggregateResult {
  Adapter global;                // new global adapter state for the site
  std::optional<Matrix> w_err;   // FedEx residual (with alpha/r scaling applied)
  Matrix delta_agg;              // reconstructed global update for the site
};

// Client weights for all aggregation rules. Empty span means uniform 1/c;
// otherwise weights must be positive and are normalized to sum to one.
using ClientWeights = std::span<const double>;

// Plain FedAvg of B and A separately. The product of the means generally
// differs from the mean of the products, so this rule is inexact.
AggregateResult agg_fedit(std::span<const ClientUpdate> updates,
                          ClientWeights weights = {});

// FedAvg of the factors plus the dense residual
//   W_err = mean(B_i A_i) - mean(B_i) mean(A_i)
// folded into the base weight, which restores exactness.
AggregateResult agg_fedex(std::span<const ClientUpdate> updates,
                          ClientWeights weights = {});

// Exact aggregation computed by stacking the client factors; the returned
// global adapter is a fresh pair from init_lora(reinit_seed) with B = 0.
AggregateResult agg_flora(std::span<const ClientUpdate> updates,
                          std::uint64_t reinit_seed, ClientWeights weights = {});

// A frozen and shared bit-identically across clients; only B is averaged.
// Exact by linearity of dW in B.
AggregateResult agg_ffa(std::span<const ClientUpdate> updates, const Matrix& shared_a,
                        ClientWeights weights = {});

// Frozen shared basis, trainable cores averaged elementwise. Exact.
AggregateResult agg_fedsb(std::span<const ClientUpdate> updates,
                          ClientWeights weights = {});

// Rank-heterogeneous variant: every client trains the leading r_i x r_i block
// of the core in the shared basis; cores are zero-padded to r_max x r_max and
// averaged. Exact.
AggregateResult agg_fedsb_hetero(std::span<const ClientUpdate> updates,
                                 const Matrix& basis_b, const Matrix& basis_a,
                                 ClientWeights weights = {});

// Frobenius distance between the aggregated update and the (weighted) mean of
// the client updates: zero for the exact rules, positive for FedIT in general.
double divergence(std::span<const ClientUpdate> updates, const Matrix& delta_agg,
                  ClientWeights weights = {});

}  // namespace fedsb
