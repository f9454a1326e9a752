#pragma once

#include <optional>
#include <string>

#include "fedsb/fedsim.hpp"

namespace fedsb {

// Privacy block of an experiment file. Exactly one of sigma / epsilon may be
// set; a target epsilon is resolved to the smallest sufficient sigma before
// the run starts.
struct PrivacyConfig {
  double clip_norm = 1.0;
  std::optional<double> sigma;
  std::optional<double> epsilon;
  double delta = 1e-5;
  NoiseScope scope = NoiseScope::kPerStep;
};

// Full experiment description, readable from and writable to a sectioned
// key-value text file ([task] / [federation] / [privacy] / [output]).
struct ExperimentConfig {
  // [task]
  ModelKind model = ModelKind::kLinear;
  std::size_t out_dim = 8;
  std::size_t in_dim = 6;
  std::size_t hidden = 16;  // MLP only
  LossKind loss = LossKind::kSquaredError;
  std::size_t samples = 2000;
  double noise_std = 0.0;
  double delta_scale = 1.0;
  std::size_t delta_rank = 0;  // 0 = full rank
  InputDesign design = InputDesign::kGaussian;

  // [federation]
  Method method = Method::kFedSb;
  std::size_t rank = 4;
  std::vector<std::size_t> client_ranks;
  std::size_t clients = 1;
  long rounds = 1;
  long local_epochs = 1;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  double alpha = 16.0;
  SbInitPolicy sb_init_policy = SbInitPolicy::kZeroR;
  double sb_init_lr = 0.1;
  double init_batch_fraction = 1.0;
  PartitionSpec::Mode partition = PartitionSpec::Mode::kIidRandom;
  bool weight_by_shard_size = false;

  // [privacy], optional
  std::optional<PrivacyConfig> privacy;

  // [output]
  std::uint64_t seed = 1;
  std::string out_dir = "out";

  void validate() const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

// Canonical serialization; parse(format(c)) == c for valid configs.
std::string format_config(const ExperimentConfig& config);

// The accounting inputs a run will use, derived from the deterministic
// partition sizes: worst-case sample rate and per-round step count.
struct DpAccountingPlan {
  double sample_rate = 1.0;
  long steps_per_round = 1;
};
DpAccountingPlan dp_accounting_plan(const ExperimentConfig& config);

// Builds the runnable configuration; resolves a target epsilon to sigma via
// the accountant when requested.
FederationConfig to_federation_config(const ExperimentConfig& config);

}  // namespace fedsb
