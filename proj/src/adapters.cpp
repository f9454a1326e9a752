#include "fedsb/adapters.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fedsb {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

}  // namespace

std::string_view method_name(Method m) {
  switch (m) {
    case Method::kFedIt: return "fedit";
    case Method::kFedExLora: return "fedex-lora";
    case Method::kFlora: return "flora";
    case Method::kFfaLora: return "ffa-lora";
    case Method::kFedSb: return "fed-sb";
  }
  fail("unknown method");
}

Method method_from_name(std::string_view name) {
  if (name == "fedit" || name == "fed-it") return Method::kFedIt;
  if (name == "fedex-lora" || name == "fedex") return Method::kFedExLora;
  if (name == "flora") return Method::kFlora;
  if (name == "ffa-lora" || name == "ffa") return Method::kFfaLora;
  if (name == "fed-sb" || name == "fedsb") return Method::kFedSb;
  fail("unknown method name: " + std::string(name));
}

Matrix effective_update(const LoraPair& p) {
  if (p.b.cols() != p.a.rows()) fail("lora pair: rank mismatch between B and A");
  return scale(matmul(p.b, p.a), p.scaling());
}

Matrix effective_update(const SbTriple& t) {
  if (t.b.cols() != t.r.rows() || t.r.cols() != t.a.rows() || t.r.rows() != t.r.cols())
    fail("sb triple: inconsistent shapes");
  return matmul(t.b, matmul(t.r, t.a));
}

Matrix effective_update(const Adapter& a) {
  return std::visit([](const auto& x) { return effective_update(x); }, a);
}

LoraGradient lora_trainable_gradient(const LoraPair& p, const Matrix& g) {
  if (g.rows() != p.b.rows() || g.cols() != p.a.cols())
    fail("lora gradient: site gradient shape mismatch");
  const double s = p.scaling();
  return {scale(matmul(g, transpose(p.a)), s), scale(matmul(transpose(p.b), g), s)};
}

Matrix ffa_trainable_gradient(const LoraPair& p, const Matrix& g) {
  if (g.rows() != p.b.rows() || g.cols() != p.a.cols())
    fail("ffa gradient: site gradient shape mismatch");
  return scale(matmul(g, transpose(p.a)), p.scaling());
}

Matrix sb_trainable_gradient(const SbTriple& t, const Matrix& g) {
  if (g.rows() != t.b.rows() || g.cols() != t.a.cols())
    fail("sb gradient: site gradient shape mismatch");
  return matmul(transpose(t.b), matmul(g, transpose(t.a)));
}

LoraPair init_lora(std::size_t out_dim, std::size_t in_dim, std::size_t rank,
                   double alpha, std::uint64_t seed) {
  if (rank < 1 || rank > std::min(out_dim, in_dim))
    fail("init_lora: rank out of range");
  LoraPair p;
  p.alpha = alpha;
  p.b = Matrix(out_dim, rank);
  p.a = gaussian_matrix(rank, in_dim, 1.0 / std::sqrt(static_cast<double>(rank)), seed);
  return p;
}

std::vector<SbTriple> init_sb(const ArchShape& shape, const SiteMatrices& weights,
                              const Batch& init_batch, double lr, std::size_t rank,
                              SbInitPolicy policy) {
  if (init_batch.size() == 0) fail("init_sb: empty init batch");
  for (const SiteSpec& site : shape.sites) {
    if (rank < 1 || rank > std::min(site.out_dim, site.in_dim))
      fail("init_sb: rank out of range for site " + site.name);
  }
  SiteMatrices zero_updates;
  for (const SiteSpec& site : shape.sites)
    zero_updates.emplace_back(site.out_dim, site.in_dim);
  const SiteMatrices grads = batch_gradient(shape, weights, zero_updates, init_batch);

  std::vector<SbTriple> out;
  out.reserve(shape.sites.size());
  for (std::size_t s = 0; s < shape.sites.size(); ++s) {
    const Matrix estimated_step = scale(grads[s], -lr);
    const SvdResult svd = truncated_svd(estimated_step, rank);
    SbTriple t;
    t.b = svd.u;
    t.a = transpose(svd.v);
    t.r = Matrix(rank, rank);
    if (policy == SbInitPolicy::kSigmaStep) {
      for (std::size_t j = 0; j < rank; ++j) t.r(j, j) = svd.s[j];
    }
    out.push_back(std::move(t));
  }
  return out;
}

SbTriple slice_sb(const SbTriple& global, std::size_t local_rank) {
  if (local_rank < 1 || local_rank > global.rank())
    fail("slice_sb: local rank out of range");
  SbTriple t;
  t.b = take_cols(global.b, local_rank);
  t.a = take_rows(global.a, local_rank);
  t.r = Matrix(local_rank, local_rank);
  return t;
}

}  // namespace fedsb
