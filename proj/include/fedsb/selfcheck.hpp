#pragma once

#include <string>
#include <vector>

namespace fedsb {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Fault hooks for exercising the harness itself: a check must turn red when
// the behavior it guards is broken on purpose.
struct FaultInjection {
  bool fedex_skip_werr = false;
};

// Named end-to-end invariant suite behind the `verify` subcommand: exactness
// of the four exact aggregation rules, the constructed FedIT counterexample,
// both noise decompositions, the accountant against a quadrature oracle,
// sigma calibration round trips, and the cost-ledger reconciliation.
std::vector<CheckResult> run_verification(const FaultInjection& faults = {});

}  // namespace fedsb
