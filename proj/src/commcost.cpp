#include "fedsb/commcost.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace fedsb {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

// Built-in catalogs, in the external file syntax. Attention projections fold
// grouped-query head layouts into the output dimension; the BERT catalog
// carries its 3-class classification head as an extra dense component.
constexpr std::string_view kLlama32_3b = R"(# Llama-3.2 3B, decoder weights adapted per layer
name llama32-3b
site q_proj 3072 3072 28
site k_proj 1024 3072 28
site v_proj 1024 3072 28
site o_proj 3072 3072 28
site gate_proj 8192 3072 28
site up_proj 8192 3072 28
site down_proj 3072 8192 28
)";

constexpr std::string_view kMistral7b = R"(# Mistral-7B, decoder weights adapted per layer
name mistral-7b
site q_proj 4096 4096 32
site k_proj 1024 4096 32
site v_proj 1024 4096 32
site o_proj 4096 4096 32
site gate_proj 14336 4096 32
site up_proj 14336 4096 32
site down_proj 4096 14336 32
)";

constexpr std::string_view kGemma2_9b = R"(# Gemma-2 9B, decoder weights adapted per layer
name gemma2-9b
site q_proj 4096 3584 42
site k_proj 2048 3584 42
site v_proj 2048 3584 42
site o_proj 3584 4096 42
site gate_proj 14336 3584 42
site up_proj 14336 3584 42
site down_proj 3584 14336 42
)";

constexpr std::string_view kBertBaseAttn = R"(# BERT-base, self-attention query/value adapted,
# plus the 3-class sequence classification head (768*3 weights + 3 biases)
# which is trained and communicated by every method.
name bert-base-attn
site query 768 768 12
site value 768 768 12
extra 2307
)";

constexpr std::string_view kToy2Site = R"(# Two-site toy architecture for exercising the calculator
name toy2site
site alpha 8 6 1
site beta 5 7 2
)";

long lora_pair_params(const ArchCatalog& arch, long rank) {
  long total = 0;
  for (const SiteDims& s : arch.sites)
    total += (s.out_dim + s.in_dim) * rank * s.multiplicity;
  return total;
}

long b_only_params(const ArchCatalog& arch, long rank) {
  long total = 0;
  for (const SiteDims& s : arch.sites) total += s.out_dim * rank * s.multiplicity;
  return total;
}

long core_params(const ArchCatalog& arch, long rank) {
  return arch.total_sites() * rank * rank;
}

long stacked_or_dense_params(const ArchCatalog& arch, long rank, long clients) {
  long total = 0;
  for (const SiteDims& s : arch.sites) {
    const long stacked = clients * (s.out_dim + s.in_dim) * rank;
    const long dense = s.out_dim * s.in_dim;
    total += std::min(stacked, dense) * s.multiplicity;
  }
  return total;
}

}  // namespace

long ArchCatalog::total_sites() const {
  long total = 0;
  for (const SiteDims& s : sites) total += s.multiplicity;
  return total;
}

long ArchCatalog::min_site_dim() const {
  long best = 0;
  for (const SiteDims& s : sites) {
    const long d = std::min(s.out_dim, s.in_dim);
    best = best == 0 ? d : std::min(best, d);
  }
  return best;
}

void ArchCatalog::validate() const {
  if (name.empty()) fail("catalog: missing name");
  if (sites.empty()) fail("catalog: no sites");
  for (const SiteDims& s : sites) {
    if (s.out_dim < 1 || s.in_dim < 1) fail("catalog: site dims must be >= 1");
    if (s.multiplicity < 1) fail("catalog: multiplicity must be >= 1");
    if (s.name.empty()) fail("catalog: unnamed site");
  }
  if (extra_params < 0) fail("catalog: negative extra params");
}

ArchCatalog parse_catalog(std::istream& in) {
  ArchCatalog arch;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string directive;
    if (!(ls >> directive)) continue;
    if (directive == "name") {
      if (!(ls >> arch.name)) fail("catalog: bad name directive");
    } else if (directive == "site") {
      SiteDims s;
      if (!(ls >> s.name >> s.out_dim >> s.in_dim >> s.multiplicity))
        fail("catalog: bad site directive at line " + std::to_string(line_no));
      arch.sites.push_back(std::move(s));
    } else if (directive == "extra") {
      if (!(ls >> arch.extra_params)) fail("catalog: bad extra directive");
    } else {
      fail("catalog: unknown directive '" + directive + "'");
    }
  }
  arch.validate();
  return arch;
}

ArchCatalog parse_catalog_text(const std::string& text) {
  std::istringstream in(text);
  return parse_catalog(in);
}

std::string format_catalog(const ArchCatalog& arch) {
  std::ostringstream out;
  out << "name " << arch.name << "\n";
  for (const SiteDims& s : arch.sites)
    out << "site " << s.name << " " << s.out_dim << " " << s.in_dim << " "
        << s.multiplicity << "\n";
  if (arch.extra_params != 0) out << "extra " << arch.extra_params << "\n";
  return out.str();
}

ArchCatalog builtin_arch(std::string_view name) {
  if (name == "llama32-3b") return parse_catalog_text(std::string(kLlama32_3b));
  if (name == "mistral-7b") return parse_catalog_text(std::string(kMistral7b));
  if (name == "gemma2-9b") return parse_catalog_text(std::string(kGemma2_9b));
  if (name == "bert-base-attn") return parse_catalog_text(std::string(kBertBaseAttn));
  if (name == "toy2site") return parse_catalog_text(std::string(kToy2Site));
  fail("unknown architecture '" + std::string(name) + "'");
}

std::vector<std::string> builtin_arch_names() {
  return {"llama32-3b", "mistral-7b", "gemma2-9b", "bert-base-attn", "toy2site"};
}

double CostBreakdown::reported_millions() const { return round2_millions(reported); }

CostBreakdown cost_per_round(const ArchCatalog& arch, Method method, long rank,
                             long clients) {
  arch.validate();
  if (clients < 1) fail("cost_per_round: clients must be >= 1");
  if (rank < 1) fail("cost_per_round: rank must be >= 1");
  for (const SiteDims& s : arch.sites) {
    if (rank > std::min(s.out_dim, s.in_dim))
      fail("cost_per_round: rank " + std::to_string(rank) + " too large for site " +
           s.name);
  }

  CostBreakdown cost;
  cost.site_upload.reserve(arch.sites.size());
  for (const SiteDims& s : arch.sites) {
    long per_site = 0;
    switch (method) {
      case Method::kFedIt:
      case Method::kFedExLora:
      case Method::kFlora:
        per_site = (s.out_dim + s.in_dim) * rank;
        break;
      case Method::kFfaLora:
        per_site = s.out_dim * rank;
        break;
      case Method::kFedSb:
        per_site = rank * rank;
        break;
    }
    cost.site_upload.push_back(per_site * s.multiplicity);
    cost.upload_per_client += per_site * s.multiplicity;
  }
  cost.upload_per_client += arch.extra_params;

  switch (method) {
    case Method::kFedIt:
      cost.download = lora_pair_params(arch, rank) + arch.extra_params;
      cost.reported = lora_pair_params(arch, rank) + arch.extra_params;
      break;
    case Method::kFedExLora:
    case Method::kFlora:
      cost.download = stacked_or_dense_params(arch, rank, clients) + arch.extra_params;
      cost.reported = cost.download;
      break;
    case Method::kFfaLora:
      cost.download = b_only_params(arch, rank) + arch.extra_params;
      cost.reported = lora_pair_params(arch, rank) / 2 + arch.extra_params;
      break;
    case Method::kFedSb:
      cost.download = core_params(arch, rank) + arch.extra_params;
      // Round-0 basis broadcast: the full initial triple (B, R, A) per site.
      cost.init_download = lora_pair_params(arch, rank) + core_params(arch, rank);
      cost.reported = core_params(arch, rank) + arch.extra_params;
      break;
  }
  return cost;
}

double round2_millions(long params) {
  return std::floor(static_cast<double>(params) / 1e6 * 100.0 + 0.5) / 100.0;
}

double trunc2_millions(long params) {
  return std::floor(static_cast<double>(params) / 1e6 * 100.0) / 100.0;
}

std::string format_millions(long params) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", round2_millions(params));
  return buf;
}

void CommLedger::record(int round, std::vector<long> up_per_client, long down) {
  entries_.push_back({round, std::move(up_per_client), down});
}

long CommLedger::total_upload() const {
  long total = 0;
  for (const CommLedgerEntry& e : entries_)
    for (long up : e.up_per_client) total += up;
  return total;
}

long CommLedger::total_download() const {
  long total = 0;
  for (const CommLedgerEntry& e : entries_) total += e.down;
  return total;
}

void CommLedger::reconcile(const std::vector<CommLedgerEntry>& expected) const {
  if (expected.size() != entries_.size())
    throw std::logic_error("comm ledger: round count mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const CommLedgerEntry& got = entries_[i];
    const CommLedgerEntry& want = expected[i];
    if (got.round != want.round || got.up_per_client != want.up_per_client ||
        got.down != want.down) {
      throw std::logic_error("comm ledger: measured counts diverge from prediction at round " +
                             std::to_string(got.round));
    }
  }
}

}  // namespace fedsb
