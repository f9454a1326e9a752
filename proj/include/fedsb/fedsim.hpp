#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedsb/adapters.hpp"
#include "fedsb/aggregation.hpp"
#include "fedsb/commcost.hpp"
#include "fedsb/model.hpp"
#include "fedsb/privacy.hpp"

namespace fedsb {

struct PartitionSpec {
  enum class Mode { kIidRandom, kPerSource };
  Mode mode = Mode::kIidRandom;
  std::size_t clients = 1;
  // Per-source mode: source k is assigned wholly to source_to_client[k]
  // (identity when empty).
  std::vector<std::size_t> source_to_client;
};

// Uniform random disjoint split; shard sizes differ by at most one.
std::vector<Batch> partition_iid(const Batch& data, std::size_t clients,
                                 std::uint64_t seed);
// Each source dataset goes wholly to one client; sizes may differ.
std::vector<Batch> partition_sources(std::span<const Batch> sources,
                                     const PartitionSpec& spec);

struct OptimizerState {
  double learning_rate = 0.1;
  long step_count = 0;
  long epoch_count = 0;
};

// A client's private world: its shard, adapters, optimizer and seeds. Shard
// reads go through an access-counting accessor so tests can verify isolation.
class ClientState {
 public:
  ClientState(int id, Batch shard, std::uint64_t train_seed, std::uint64_t noise_seed)
      : id_(id), shard_(std::move(shard)), train_seed_(train_seed),
        noise_seed_(noise_seed) {}

  int id() const { return id_; }
  const Batch& shard() const {
    ++shard_reads_;
    return shard_;
  }
  std::size_t shard_size() const { return shard_.size(); }
  std::size_t shard_access_count() const { return shard_reads_; }
  std::uint64_t train_seed() const { return train_seed_; }
  std::uint64_t noise_seed() const { return noise_seed_; }

  std::vector<Adapter> adapters;  // one per site
  OptimizerState opt;

 private:
  int id_ = 0;
  Batch shard_;
  std::uint64_t train_seed_ = 0;
  std::uint64_t noise_seed_ = 0;
  mutable std::size_t shard_reads_ = 0;
};

// When DP noise is injected: every optimizer step (DP-SGD), or once per round
// on the uploaded update (update-level Gaussian mechanism).
enum class NoiseScope { kPerStep, kPerRound };

struct LocalDp {
  double clip_norm = 1.0;
  double noise_multiplier = 1.0;
  NoiseScope scope = NoiseScope::kPerStep;
};

// Runs local SGD (or DP-SGD) on the trainable part only; frozen parts are
// untouched. Deterministic per client seeds. Returns one update per site.
std::vector<ClientUpdate> local_train(ClientState& client, const ArchShape& shape,
                                      const SiteMatrices& weights,
                                      const SiteMatrices& base_shift, long epochs,
                                      std::size_t batch_size,
                                      const std::optional<LocalDp>& privacy,
                                      Method method);

struct RoundReport {
  int round = 0;
  std::vector<double> client_losses;  // on own shard, after local training
  double global_loss = 0.0;
  double divergence = 0.0;
  long params_up_per_client = 0;  // max over clients (uniform unless hetero)
  long params_up_total = 0;
  long params_down = 0;
  double epsilon = 0.0;  // privacy spent so far; 0 for non-private runs
};

struct FederationConfig {
  TeacherSpec task;
  Method method = Method::kFedSb;
  std::size_t rank = 4;
  std::vector<std::size_t> client_ranks;  // Fed-SB rank-heterogeneous mode
  std::size_t clients = 1;
  long rounds = 1;
  long local_epochs = 1;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  double lora_alpha = 16.0;
  SbInitPolicy sb_init_policy = SbInitPolicy::kZeroR;
  double sb_init_lr = 0.1;
  // Fraction of the pooled data held by the server for the basis estimate.
  double init_batch_fraction = 1.0;
  PartitionSpec::Mode partition = PartitionSpec::Mode::kIidRandom;
  std::optional<LocalDp> privacy;
  double dp_delta = 1e-5;
  bool weight_by_shard_size = false;
  std::uint64_t master_seed = 1;

  void validate() const;
  std::size_t max_rank() const;
};

struct FederationResult {
  std::vector<RoundReport> rounds;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  SiteMatrices final_delta;            // global effective update per site
  std::vector<Adapter> final_adapters; // global adapter state per site
  CommLedger ledger;
  std::optional<Accountant> accountant;
};

// One full federated run: partition, init, then per round parallel local
// training, aggregation, ledger update and broadcast. The measured ledger is
// reconciled against the closed-form cost predictions before returning.
FederationResult run_federation(const FederationConfig& config);

}  // namespace fedsb
