#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "fedsb/adapters.hpp"

namespace fedsb {

// One adapted weight site of an architecture, with a multiplicity for
// repeated layers.
struct SiteDims {
  std::string name;
  long out_dim = 0;  // m
  long in_dim = 0;   // n
  long multiplicity = 1;
};

struct ArchCatalog {
  std::string name;
  std::vector<SiteDims> sites;
  // Small dense trainable component communicated verbatim by every method
  // (e.g. a classification head in sequence-classification fine-tunes).
  long extra_params = 0;

  long total_sites() const;
  long min_site_dim() const;
  void validate() const;
};

// Plain-text catalog format: one directive per line,
//   name <arch-name>
//   site <site-name> <m> <n> <multiplicity>
//   extra <params>
// '#' starts a comment.
ArchCatalog parse_catalog(std::istream& in);
ArchCatalog parse_catalog_text(const std::string& text);
std::string format_catalog(const ArchCatalog& arch);

ArchCatalog builtin_arch(std::string_view name);
std::vector<std::string> builtin_arch_names();

// Exact parameter counts for one aggregation round. `upload_per_client` and
// `download` meter the simulator's wire protocol and reconcile against the
// ledger; `reported` follows the convention used for published per-round
// numbers (per-client upload for FedIT/FFA/Fed-SB, the aggregate exact-update
// transfer min(c(m+n)r, mn) for FedEx/FLoRA, FFA displayed at half the LoRA
// pair).
struct CostBreakdown {
  std::vector<long> site_upload;  // per catalog site, multiplicity included
  long upload_per_client = 0;
  long download = 0;       // broadcast payload per round
  long init_download = 0;  // one-time round-0 payload (Fed-SB basis)
  long reported = 0;
  double reported_millions() const;
};

CostBreakdown cost_per_round(const ArchCatalog& arch, Method method, long rank,
                             long clients);

// 2-decimal million renderings. Published tables mix the two modes, so both
// are exposed; round-half-up is the display default.
double round2_millions(long params);
double trunc2_millions(long params);
std::string format_millions(long params);

// Measured communication per round, from real serialization.
struct CommLedgerEntry {
  int round = 0;
  std::vector<long> up_per_client;
  long down = 0;
};

class CommLedger {
 public:
  void record(int round, std::vector<long> up_per_client, long down);
  const std::vector<CommLedgerEntry>& entries() const { return entries_; }
  long total_upload() const;
  long total_download() const;

  // Zero-tolerance check of measured counts against expectations (one
  // expected entry per recorded round). Throws std::logic_error on mismatch.
  void reconcile(const std::vector<CommLedgerEntry>& expected) const;

 private:
  std::vector<CommLedgerEntry> entries_;
};

}  // namespace fedsb
