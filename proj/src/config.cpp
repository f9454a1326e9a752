#include "fedsb/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace fedsb {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    fail("config: bad numeric value for " + key);
  }
  if (used != value.size()) fail("config: bad numeric value for " + key);
  return v;
}

long parse_long(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(value, &used);
  } catch (const std::exception&) {
    fail("config: bad integer value for " + key);
  }
  if (used != value.size()) fail("config: bad integer value for " + key);
  return v;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  const long v = parse_long(key, value);
  if (v < 0) fail("config: negative value for " + key);
  return static_cast<std::size_t>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  fail("config: expected true/false for " + key);
}

std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_size(key, item));
  }
  return out;
}

std::string format_size_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace

namespace {

ArchShape shape_of(const ExperimentConfig& c) {
  return c.model == ModelKind::kLinear
             ? ArchShape::linear(c.out_dim, c.in_dim, c.loss)
             : ArchShape::mlp(c.out_dim, c.hidden, c.in_dim, c.loss);
}

FederationConfig build_fed(const ExperimentConfig& c) {
  FederationConfig fed;
  fed.task.shape = shape_of(c);
  fed.task.delta_scale = c.delta_scale;
  fed.task.delta_rank = c.delta_rank;
  fed.task.samples = c.samples;
  fed.task.noise_std = c.noise_std;
  fed.task.design = c.design;
  fed.method = c.method;
  fed.rank = c.rank;
  fed.client_ranks = c.client_ranks;
  fed.clients = c.clients;
  fed.rounds = c.rounds;
  fed.local_epochs = c.local_epochs;
  fed.batch_size = c.batch_size;
  fed.learning_rate = c.learning_rate;
  fed.lora_alpha = c.alpha;
  fed.sb_init_policy = c.sb_init_policy;
  fed.sb_init_lr = c.sb_init_lr;
  fed.init_batch_fraction = c.init_batch_fraction;
  fed.partition = c.partition;
  fed.weight_by_shard_size = c.weight_by_shard_size;
  fed.master_seed = c.seed;
  if (c.privacy) {
    LocalDp dp;
    dp.clip_norm = c.privacy->clip_norm;
    dp.noise_multiplier = c.privacy->sigma.value_or(1.0);
    dp.scope = c.privacy->scope;
    fed.privacy = dp;
    fed.dp_delta = c.privacy->delta;
  }
  return fed;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (privacy && privacy->sigma && privacy->epsilon)
    fail("config: sigma and epsilon are mutually exclusive");
  if (privacy && !privacy->sigma && !privacy->epsilon)
    fail("config: privacy section needs sigma or epsilon");
  if (privacy && privacy->epsilon && !(*privacy->epsilon > 0.0))
    fail("config: epsilon must be positive");
  if (privacy && privacy->sigma && *privacy->sigma < 0.0)
    fail("config: sigma must be non-negative");
  // Structural validation on the runnable form (no sigma calibration here;
  // an unreachable epsilon target should fail at resolution time instead).
  build_fed(*this).validate();
}

DpAccountingPlan dp_accounting_plan(const ExperimentConfig& c) {
  std::size_t min_shard = 0;
  std::size_t max_shard = 0;
  if (c.partition == PartitionSpec::Mode::kIidRandom) {
    min_shard = c.samples / c.clients;
    max_shard = min_shard + (c.samples % c.clients != 0 ? 1 : 0);
  } else {
    min_shard = max_shard = std::max<std::size_t>(1, c.samples / c.clients);
  }
  DpAccountingPlan plan;
  if (c.privacy && c.privacy->scope == NoiseScope::kPerRound) {
    plan.sample_rate = 1.0;
    plan.steps_per_round = 1;
    return plan;
  }
  plan.sample_rate =
      std::min(1.0, static_cast<double>(c.batch_size) / static_cast<double>(min_shard));
  plan.steps_per_round =
      c.local_epochs * static_cast<long>((max_shard + c.batch_size - 1) / c.batch_size);
  return plan;
}

FederationConfig to_federation_config(const ExperimentConfig& c) {
  FederationConfig fed = build_fed(c);
  fed.validate();
  if (c.privacy && c.privacy->epsilon) {
    const DpAccountingPlan plan = dp_accounting_plan(c);
    fed.privacy->noise_multiplier = calibrate_sigma(
        *c.privacy->epsilon, c.privacy->delta, plan.sample_rate,
        plan.steps_per_round * c.rounds);
  }
  return fed;
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  std::string section;
  bool privacy_seen = false;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("config: bad section header at line " + std::to_string(line_no));
      section = line.substr(1, line.size() - 2);
      if (section != "task" && section != "federation" && section != "privacy" &&
          section != "output")
        fail("config: unknown section [" + section + "]");
      if (section == "privacy") {
        c.privacy = PrivacyConfig{};
        privacy_seen = true;
      }
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) fail("config: expected key = value at line " + std::to_string(line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section == "task") {
      if (key == "model") {
        if (value == "linear") c.model = ModelKind::kLinear;
        else if (value == "mlp") c.model = ModelKind::kMlpTanh;
        else fail("config: model must be linear or mlp");
      } else if (key == "out_dim") c.out_dim = parse_size(key, value);
      else if (key == "in_dim") c.in_dim = parse_size(key, value);
      else if (key == "hidden") c.hidden = parse_size(key, value);
      else if (key == "loss") {
        if (value == "squared-error") c.loss = LossKind::kSquaredError;
        else if (value == "cross-entropy") c.loss = LossKind::kSoftmaxCrossEntropy;
        else fail("config: loss must be squared-error or cross-entropy");
      } else if (key == "samples") c.samples = parse_size(key, value);
      else if (key == "noise_std") c.noise_std = parse_double(key, value);
      else if (key == "delta_scale") c.delta_scale = parse_double(key, value);
      else if (key == "delta_rank") c.delta_rank = parse_size(key, value);
      else if (key == "design") {
        if (value == "gaussian") c.design = InputDesign::kGaussian;
        else if (value == "orthogonal") c.design = InputDesign::kOrthogonal;
        else fail("config: design must be gaussian or orthogonal");
      } else fail("config: unknown key " + key + " in [task]");
    } else if (section == "federation") {
      if (key == "method") c.method = method_from_name(value);
      else if (key == "rank") c.rank = parse_size(key, value);
      else if (key == "client_ranks") c.client_ranks = parse_size_list(key, value);
      else if (key == "clients") c.clients = parse_size(key, value);
      else if (key == "rounds") c.rounds = parse_long(key, value);
      else if (key == "local_epochs") c.local_epochs = parse_long(key, value);
      else if (key == "batch_size") c.batch_size = parse_size(key, value);
      else if (key == "learning_rate") c.learning_rate = parse_double(key, value);
      else if (key == "alpha") c.alpha = parse_double(key, value);
      else if (key == "sb_init_policy") {
        if (value == "zero") c.sb_init_policy = SbInitPolicy::kZeroR;
        else if (value == "sigma-step") c.sb_init_policy = SbInitPolicy::kSigmaStep;
        else fail("config: sb_init_policy must be zero or sigma-step");
      } else if (key == "sb_init_lr") c.sb_init_lr = parse_double(key, value);
      else if (key == "init_batch_fraction") c.init_batch_fraction = parse_double(key, value);
      else if (key == "partition") {
        if (value == "iid") c.partition = PartitionSpec::Mode::kIidRandom;
        else if (value == "per-source") c.partition = PartitionSpec::Mode::kPerSource;
        else fail("config: partition must be iid or per-source");
      } else if (key == "weight_by_shard_size") c.weight_by_shard_size = parse_bool(key, value);
      else fail("config: unknown key " + key + " in [federation]");
    } else if (section == "privacy") {
      if (key == "clip_norm") c.privacy->clip_norm = parse_double(key, value);
      else if (key == "sigma") c.privacy->sigma = parse_double(key, value);
      else if (key == "epsilon") c.privacy->epsilon = parse_double(key, value);
      else if (key == "delta") c.privacy->delta = parse_double(key, value);
      else if (key == "scope") {
        if (value == "step") c.privacy->scope = NoiseScope::kPerStep;
        else if (value == "round") c.privacy->scope = NoiseScope::kPerRound;
        else fail("config: scope must be step or round");
      } else fail("config: unknown key " + key + " in [privacy]");
    } else if (section == "output") {
      if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_long(key, value));
      else if (key == "out_dir") c.out_dir = value;
      else fail("config: unknown key " + key + " in [output]");
    } else {
      fail("config: key outside of any section at line " + std::to_string(line_no));
    }
  }
  (void)privacy_seen;
  c.validate();
  return c;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string format_config(const ExperimentConfig& c) {
  std::ostringstream out;
  out << "[task]\n";
  out << "model = " << (c.model == ModelKind::kLinear ? "linear" : "mlp") << "\n";
  out << "out_dim = " << c.out_dim << "\n";
  out << "in_dim = " << c.in_dim << "\n";
  out << "hidden = " << c.hidden << "\n";
  out << "loss = "
      << (c.loss == LossKind::kSquaredError ? "squared-error" : "cross-entropy") << "\n";
  out << "samples = " << c.samples << "\n";
  out << "noise_std = " << fmt_double(c.noise_std) << "\n";
  out << "delta_scale = " << fmt_double(c.delta_scale) << "\n";
  out << "delta_rank = " << c.delta_rank << "\n";
  out << "design = " << (c.design == InputDesign::kGaussian ? "gaussian" : "orthogonal")
      << "\n";
  out << "\n[federation]\n";
  out << "method = " << method_name(c.method) << "\n";
  out << "rank = " << c.rank << "\n";
  if (!c.client_ranks.empty())
    out << "client_ranks = " << format_size_list(c.client_ranks) << "\n";
  out << "clients = " << c.clients << "\n";
  out << "rounds = " << c.rounds << "\n";
  out << "local_epochs = " << c.local_epochs << "\n";
  out << "batch_size = " << c.batch_size << "\n";
  out << "learning_rate = " << fmt_double(c.learning_rate) << "\n";
  out << "alpha = " << fmt_double(c.alpha) << "\n";
  out << "sb_init_policy = "
      << (c.sb_init_policy == SbInitPolicy::kZeroR ? "zero" : "sigma-step") << "\n";
  out << "sb_init_lr = " << fmt_double(c.sb_init_lr) << "\n";
  out << "init_batch_fraction = " << fmt_double(c.init_batch_fraction) << "\n";
  out << "partition = "
      << (c.partition == PartitionSpec::Mode::kIidRandom ? "iid" : "per-source") << "\n";
  out << "weight_by_shard_size = " << (c.weight_by_shard_size ? "true" : "false") << "\n";
  if (c.privacy) {
    out << "\n[privacy]\n";
    out << "clip_norm = " << fmt_double(c.privacy->clip_norm) << "\n";
    if (c.privacy->sigma) out << "sigma = " << fmt_double(*c.privacy->sigma) << "\n";
    if (c.privacy->epsilon) out << "epsilon = " << fmt_double(*c.privacy->epsilon) << "\n";
    out << "delta = " << fmt_double(c.privacy->delta) << "\n";
    out << "scope = " << (c.privacy->scope == NoiseScope::kPerStep ? "step" : "round")
        << "\n";
  }
  out << "\n[output]\n";
  out << "seed = " << c.seed << "\n";
  out << "out_dir = " << c.out_dir << "\n";
  return out.str();
}

}  // namespace fedsb
