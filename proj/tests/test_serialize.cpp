#include <random>
#include <stdexcept>

#include "doctest.h"
#include "fedsb/serialize.hpp"

using namespace fedsb;

TEST_CASE("adapter frames round-trip exactly") {
  std::mt19937_64 rng(1);
  for (int it = 0; it < 10; ++it) {
    const std::size_t m = 1 + rng() % 8, n = 1 + rng() % 8;
    const std::size_t r = 1 + rng() % std::min(m, n);
    if (rng() % 2 == 0) {
      LoraPair p;
      p.alpha = 16.0;
      p.b = gaussian_matrix(m, r, 1.0, rng());
      p.a = gaussian_matrix(r, n, 1.0, rng());
      const auto bytes = serialize_adapter(Method::kFedIt, p);
      const auto [method, back] = deserialize_adapter(bytes);
      CHECK(method == Method::kFedIt);
      const LoraPair& q = std::get<LoraPair>(back);
      CHECK(q.b == p.b);
      CHECK(q.a == p.a);
      CHECK(q.alpha == p.alpha);
      CHECK(measure_params(bytes) == p.b.size() + p.a.size());
    } else {
      SbTriple t;
      t.b = gaussian_matrix(m, r, 1.0, rng());
      t.r = gaussian_matrix(r, r, 1.0, rng());
      t.a = gaussian_matrix(r, n, 1.0, rng());
      const auto bytes = serialize_adapter(Method::kFedSb, t);
      const auto [method, back] = deserialize_adapter(bytes);
      CHECK(method == Method::kFedSb);
      const SbTriple& u = std::get<SbTriple>(back);
      CHECK(u.b == t.b);
      CHECK(u.r == t.r);
      CHECK(u.a == t.a);
      CHECK(measure_params(bytes) == t.b.size() + t.r.size() + t.a.size());
    }
  }
}

TEST_CASE("matrix frames round-trip and meter their payload") {
  const Matrix m = gaussian_matrix(5, 7, 1.0, 12);
  const auto bytes = serialize_matrix(m);
  CHECK(deserialize_matrix(bytes) == m);
  CHECK(measure_params(bytes) == 35);
}

TEST_CASE("corrupt frames are rejected") {
  const Matrix m = gaussian_matrix(2, 2, 1.0, 3);
  auto bytes = serialize_matrix(m);
  bytes[0] = 'X';
  CHECK_THROWS_AS(deserialize_matrix(bytes), std::runtime_error);

  auto truncated = serialize_matrix(m);
  truncated.resize(truncated.size() - 4);
  CHECK_THROWS_AS(deserialize_matrix(truncated), std::runtime_error);
  CHECK_THROWS_AS(measure_params(truncated), std::runtime_error);
}
