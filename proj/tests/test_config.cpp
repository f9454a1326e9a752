#include <stdexcept>

#include "doctest.h"
#include "fedsb/config.hpp"

using namespace fedsb;

namespace {

const char* kSample = R"(# sample experiment
[task]
model = linear
out_dim = 6
in_dim = 5
samples = 200
noise_std = 0.0
delta_scale = 1.0
delta_rank = 2
design = orthogonal

[federation]
method = fed-sb
rank = 2
clients = 4
rounds = 3
local_epochs = 1
batch_size = 16
learning_rate = 0.1

[privacy]
clip_norm = 0.5
sigma = 1.2
delta = 1e-05
scope = step

[output]
seed = 9
out_dir = out/demo
)";

}  // namespace

TEST_CASE("config parse picks up every section") {
  const ExperimentConfig c = parse_config_text(kSample);
  CHECK(c.model == ModelKind::kLinear);
  CHECK(c.out_dim == 6);
  CHECK(c.in_dim == 5);
  CHECK(c.design == InputDesign::kOrthogonal);
  CHECK(c.method == Method::kFedSb);
  CHECK(c.rank == 2);
  CHECK(c.clients == 4);
  CHECK(c.rounds == 3);
  REQUIRE(c.privacy.has_value());
  CHECK(c.privacy->clip_norm == 0.5);
  CHECK(c.privacy->sigma == 1.2);
  CHECK(c.privacy->delta == 1e-5);
  CHECK(c.seed == 9);
  CHECK(c.out_dir == "out/demo");
}

TEST_CASE("config round-trip is the identity") {
  const ExperimentConfig c = parse_config_text(kSample);
  const std::string once = format_config(c);
  const std::string twice = format_config(parse_config_text(once));
  CHECK(once == twice);

  // Also without a privacy section and with hetero ranks.
  ExperimentConfig plain = c;
  plain.privacy.reset();
  plain.client_ranks = {1, 2, 2, 2};
  const std::string p1 = format_config(plain);
  const std::string p2 = format_config(parse_config_text(p1));
  CHECK(p1 == p2);
}

TEST_CASE("config rejects malformed input") {
  CHECK_THROWS_AS(parse_config_text("[task]\nmodel = cnn\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("[nope]\nx = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("[task]\nbogus_key = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("stray = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("[task]\nsamples = twenty\n"),
                  std::invalid_argument);
  // sigma and epsilon are mutually exclusive.
  std::string both(kSample);
  both.insert(both.find("delta = 1e-05"), "epsilon = 3.0\n");
  CHECK_THROWS_AS(parse_config_text(both), std::invalid_argument);
  // privacy section without either is incomplete.
  CHECK_THROWS_AS(parse_config_text("[privacy]\nclip_norm = 1\n"),
                  std::invalid_argument);
}

TEST_CASE("epsilon targets resolve to a calibrated sigma") {
  ExperimentConfig c = parse_config_text(kSample);
  c.privacy->sigma.reset();
  c.privacy->epsilon = 3.0;
  c.rounds = 5;
  const FederationConfig fed = to_federation_config(c);
  REQUIRE(fed.privacy.has_value());
  CHECK(fed.privacy->noise_multiplier > 0.0);
  const DpAccountingPlan plan = dp_accounting_plan(c);
  PrivacyParams p;
  p.noise_multiplier = fed.privacy->noise_multiplier;
  p.sample_rate = plan.sample_rate;
  p.steps = plan.steps_per_round * c.rounds;
  p.delta = c.privacy->delta;
  CHECK(accountant_epsilon(p) <= 3.0);
}

TEST_CASE("accounting plan mirrors the deterministic partition sizes") {
  ExperimentConfig c = parse_config_text(kSample);
  // 200 samples over 4 clients: shards of 50, batch 16 -> q = 0.32, 4 steps.
  const DpAccountingPlan plan = dp_accounting_plan(c);
  CHECK(plan.sample_rate == doctest::Approx(16.0 / 50.0));
  CHECK(plan.steps_per_round == 4);
}
