#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "fedsb/adapters.hpp"
#include "fedsb/matrix.hpp"

namespace fedsb {

// Flat binary layout for adapters and bare matrices:
//   magic "FSBA" | u16 version | u16 kind tag | f64 alpha | u32 tensor count |
//   per tensor: u32 rows | u32 cols | row-major f64 entries.
// Little-endian, used for checkpoints and for metering communication. The
// parameter count of a message is the number of f64 payload entries.

std::vector<std::uint8_t> serialize_adapter(Method method, const Adapter& adapter);
std::pair<Method, Adapter> deserialize_adapter(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> serialize_matrix(const Matrix& m);
Matrix deserialize_matrix(std::span<const std::uint8_t> bytes);

// Parses any frame produced above and counts its payload parameters. This is
// the "measured" side of the communication ledger.
std::size_t measure_params(std::span<const std::uint8_t> bytes);

}  // namespace fedsb
