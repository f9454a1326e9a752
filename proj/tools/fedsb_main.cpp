// Command-line front end: run experiments, sweep methods, print communication
// cost tables, and run the verification suite. Outputs are deterministic for
// a fixed config and seed.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nlohmann/json.hpp"

#include "fedsb/commcost.hpp"
#include "fedsb/config.hpp"
#include "fedsb/fedsim.hpp"
#include "fedsb/selfcheck.hpp"
#include "fedsb/serialize.hpp"

namespace {

using fedsb::ExperimentConfig;
using fedsb::FederationResult;
using json = nlohmann::ordered_json;

constexpr const char* kRoundsCsvSchema = "fedsb.rounds.v1";
constexpr const char* kCostsCsvSchema = "fedsb.costs.v1";

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> clients;
  std::optional<std::string> method;
  std::optional<std::size_t> rank;
  std::optional<double> epsilon;
  std::optional<double> delta;
  std::optional<double> clip;
  std::optional<double> sigma;
};

void add_override_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Master seed override");
  cmd->add_option("--out-dir", o.out_dir, "Output directory override");
  cmd->add_option("--clients", o.clients, "Client count override");
  cmd->add_option("--method", o.method, "Method override");
  cmd->add_option("--rank", o.rank, "Adapter rank override");
  cmd->add_option("--epsilon", o.epsilon, "Target privacy epsilon (calibrates sigma)");
  cmd->add_option("--delta", o.delta, "Privacy delta override");
  cmd->add_option("--clip", o.clip, "DP clip norm override");
  cmd->add_option("--sigma", o.sigma, "DP noise multiplier override");
}

ExperimentConfig apply_overrides(ExperimentConfig config, const Overrides& o) {
  if (o.seed) config.seed = *o.seed;
  if (o.out_dir) config.out_dir = *o.out_dir;
  if (o.clients) config.clients = *o.clients;
  if (o.method) config.method = fedsb::method_from_name(*o.method);
  if (o.rank) config.rank = *o.rank;
  if (o.epsilon && o.sigma)
    throw std::invalid_argument("--epsilon and --sigma are mutually exclusive");
  if (o.epsilon || o.sigma || o.delta || o.clip) {
    if (!config.privacy) config.privacy = fedsb::PrivacyConfig{};
    if (o.delta) config.privacy->delta = *o.delta;
    if (o.clip) config.privacy->clip_norm = *o.clip;
    if (o.epsilon) {
      config.privacy->epsilon = *o.epsilon;
      config.privacy->sigma.reset();
    }
    if (o.sigma) {
      config.privacy->sigma = *o.sigma;
      config.privacy->epsilon.reset();
    }
  }
  config.validate();
  return config;
}

std::string rounds_csv(const FederationResult& result) {
  std::ostringstream out;
  out << "schema_version,round,global_loss,divergence,client_loss_mean,client_loss_max,"
         "params_up_per_client,params_up_total,params_down,epsilon\n";
  for (const fedsb::RoundReport& r : result.rounds) {
    double mean = 0.0, mx = 0.0;
    for (double l : r.client_losses) {
      mean += l;
      mx = std::max(mx, l);
    }
    if (!r.client_losses.empty()) mean /= static_cast<double>(r.client_losses.size());
    out << kRoundsCsvSchema << ',' << r.round << ',' << fmt(r.global_loss) << ','
        << fmt(r.divergence) << ',' << fmt(mean) << ',' << fmt(mx) << ','
        << r.params_up_per_client << ',' << r.params_up_total << ',' << r.params_down
        << ',' << fmt(r.epsilon) << "\n";
  }
  return out.str();
}

json summary_json(const ExperimentConfig& config, const fedsb::FederationConfig& fed,
                  const FederationResult& result) {
  json j;
  j["method"] = std::string(fedsb::method_name(config.method));
  j["clients"] = config.clients;
  j["rounds"] = result.rounds.size();
  j["seed"] = config.seed;
  j["initial_loss"] = result.initial_loss;
  j["final_loss"] = result.final_loss;
  double max_div = 0.0, mean_div = 0.0;
  for (const fedsb::RoundReport& r : result.rounds) {
    max_div = std::max(max_div, r.divergence);
    mean_div += r.divergence;
  }
  if (!result.rounds.empty()) mean_div /= static_cast<double>(result.rounds.size());
  j["divergence_max"] = max_div;
  j["divergence_mean"] = mean_div;
  j["comm"] = {{"upload_total", result.ledger.total_upload()},
               {"download_total", result.ledger.total_download()}};
  if (!result.rounds.empty())
    j["client_losses_final"] = result.rounds.back().client_losses;
  if (fed.privacy) {
    j["privacy"] = {{"sigma", fed.privacy->noise_multiplier},
                    {"clip_norm", fed.privacy->clip_norm},
                    {"delta", fed.dp_delta},
                    {"scope", fed.privacy->scope == fedsb::NoiseScope::kPerStep
                                  ? "step"
                                  : "round"},
                    {"epsilon", result.rounds.empty()
                                    ? 0.0
                                    : result.rounds.back().epsilon}};
  }
  return j;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

void write_checkpoint(const std::filesystem::path& path, fedsb::Method method,
                      const std::vector<fedsb::Adapter>& adapters) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const fedsb::Adapter& a : adapters) {
    const std::vector<std::uint8_t> frame = fedsb::serialize_adapter(method, a);
    out.write(reinterpret_cast<const char*>(frame.data()),
              static_cast<std::streamsize>(frame.size()));
  }
}

int run_once(const ExperimentConfig& config, const std::filesystem::path& dir) {
  const fedsb::FederationConfig fed = fedsb::to_federation_config(config);
  const FederationResult result = fedsb::run_federation(fed);
  std::filesystem::create_directories(dir);
  write_file(dir / "rounds.csv", rounds_csv(result));
  write_file(dir / "summary.json", summary_json(config, fed, result).dump(2) + "\n");
  write_checkpoint(dir / "adapters.bin", config.method, result.final_adapters);
  if (result.accountant)
    write_file(dir / "accountant.json", result.accountant->dump_json() + "\n");
  std::cout << "method=" << fedsb::method_name(config.method)
            << " rounds=" << result.rounds.size() << " final_loss=" << result.final_loss
            << " out=" << dir.string() << "\n";
  return 0;
}

int cmd_run(const std::string& config_path, const Overrides& overrides) {
  const ExperimentConfig config =
      apply_overrides(fedsb::parse_config_file(config_path), overrides);
  return run_once(config, config.out_dir);
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& methods,
              const Overrides& overrides) {
  const ExperimentConfig base =
      apply_overrides(fedsb::parse_config_file(config_path), overrides);
  std::vector<ExperimentConfig> configs;
  for (const std::string& name : methods) {
    ExperimentConfig c = base;
    c.method = fedsb::method_from_name(name);
    c.validate();
    configs.push_back(std::move(c));
  }
  const std::filesystem::path root = base.out_dir;
  std::filesystem::create_directories(root);
  std::ostringstream sweep;
  sweep << "schema_version,method,final_loss,divergence_max,upload_total,download_total,"
           "epsilon\n";
  for (const ExperimentConfig& c : configs) {
    const fedsb::FederationConfig fed = fedsb::to_federation_config(c);
    const FederationResult result = fedsb::run_federation(fed);
    const std::filesystem::path dir = root / std::string(fedsb::method_name(c.method));
    std::filesystem::create_directories(dir);
    write_file(dir / "rounds.csv", rounds_csv(result));
    write_file(dir / "summary.json", summary_json(c, fed, result).dump(2) + "\n");
    if (result.accountant)
      write_file(dir / "accountant.json", result.accountant->dump_json() + "\n");
    double max_div = 0.0;
    for (const fedsb::RoundReport& r : result.rounds)
      max_div = std::max(max_div, r.divergence);
    sweep << kRoundsCsvSchema << ',' << fedsb::method_name(c.method) << ','
          << fmt(result.final_loss) << ',' << fmt(max_div) << ','
          << result.ledger.total_upload() << ',' << result.ledger.total_download() << ','
          << fmt(result.rounds.empty() ? 0.0 : result.rounds.back().epsilon) << "\n";
  }
  write_file(root / "sweep.csv", sweep.str());
  std::cout << "sweep over " << configs.size() << " methods -> "
            << (root / "sweep.csv").string() << "\n";
  return 0;
}

int cmd_cost(const std::string& arch_name, const std::string& method_name,
             long rank, long clients, const std::string& arch_file,
             const std::string& csv_path) {
  fedsb::ArchCatalog arch;
  if (!arch_file.empty()) {
    std::ifstream in(arch_file);
    if (!in) throw std::runtime_error("cannot open " + arch_file);
    arch = fedsb::parse_catalog(in);
  } else {
    arch = fedsb::builtin_arch(arch_name);
  }
  const fedsb::Method method = fedsb::method_from_name(method_name);
  const fedsb::CostBreakdown cost = fedsb::cost_per_round(arch, method, rank, clients);

  char trunc[32];
  std::snprintf(trunc, sizeof(trunc), "%.2f", fedsb::trunc2_millions(cost.reported));

  std::ostringstream csv;
  csv << "schema_version,arch,method,rank,clients,params,millions_rounded,"
         "millions_truncated,upload_per_client,download,init_download\n";
  csv << kCostsCsvSchema << ',' << arch.name << ',' << fedsb::method_name(method) << ','
      << rank << ',' << clients << ',' << cost.reported << ','
      << fedsb::format_millions(cost.reported) << ',' << trunc << ','
      << cost.upload_per_client << ',' << cost.download << ',' << cost.init_download
      << "\n";

  std::cout << "arch=" << arch.name << " method=" << fedsb::method_name(method)
            << " rank=" << rank << " clients=" << clients << "\n"
            << "communicated per round: " << cost.reported << " params ("
            << fedsb::format_millions(cost.reported) << "M rounded, " << trunc
            << "M truncated)\n"
            << "upload per client: " << cost.upload_per_client
            << "  download: " << cost.download
            << "  one-time init download: " << cost.init_download << "\n";
  if (!csv_path.empty()) write_file(csv_path, csv.str());
  return 0;
}

int cmd_verify(const std::string& inject_fault) {
  fedsb::FaultInjection faults;
  if (!inject_fault.empty()) {
    if (inject_fault == "fedex-skip-werr") {
      faults.fedex_skip_werr = true;
    } else {
      throw std::invalid_argument("unknown fault '" + inject_fault + "'");
    }
  }
  const auto start = std::chrono::steady_clock::now();
  const std::vector<fedsb::CheckResult> results = fedsb::run_verification(faults);
  bool all_ok = true;
  for (const fedsb::CheckResult& r : results) {
    std::cout << (r.passed ? "PASS" : "FAIL") << "  " << r.name;
    if (!r.detail.empty()) std::cout << "  (" << r.detail << ")";
    std::cout << "\n";
    all_ok = all_ok && r.passed;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << (all_ok ? "verify: all checks passed" : "verify: FAILURES above") << " in "
            << secs << "s\n";
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated low-rank fine-tuning simulator"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides run_overrides;
  CLI::App* run = app.add_subcommand("run", "Run one federated experiment");
  run->add_option("--config", config_path, "Experiment config file")->required();
  add_override_flags(run, run_overrides);

  std::string sweep_config;
  std::vector<std::string> sweep_methods;
  Overrides sweep_overrides;
  CLI::App* sweep = app.add_subcommand("sweep", "Run the same experiment per method");
  sweep->add_option("--config", sweep_config, "Experiment config file")->required();
  sweep->add_option("--methods", sweep_methods, "Methods to sweep")
      ->delimiter(',')
      ->required();
  add_override_flags(sweep, sweep_overrides);

  std::string arch, cost_method, arch_file, cost_csv;
  long rank = 0, cost_clients = 2;
  CLI::App* cost = app.add_subcommand("cost", "Closed-form communication cost");
  cost->add_option("arch", arch, "Architecture name (or use --arch-file)");
  cost->add_option("method", cost_method, "Aggregation method")->required();
  cost->add_option("rank", rank, "Adapter rank")->required();
  cost->add_option("--clients", cost_clients, "Client count");
  cost->add_option("--arch-file", arch_file, "Catalog file instead of a built-in");
  cost->add_option("--csv", cost_csv, "Also write a costs.csv to this path");

  std::string inject_fault;
  CLI::App* verify = app.add_subcommand("verify", "Run the invariant suite");
  verify->add_option("--inject-fault", inject_fault,
                     "Break a named behavior to exercise the harness");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, run_overrides);
    if (sweep->parsed()) return cmd_sweep(sweep_config, sweep_methods, sweep_overrides);
    if (cost->parsed())
      return cmd_cost(arch, cost_method, rank, cost_clients, arch_file, cost_csv);
    if (verify->parsed()) return cmd_verify(inject_fault);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
