#pragma once

#include <cstdint>
#include <string_view>

namespace fedsb {

// Derives independent named seed streams from one master seed so that every
// randomized component (partition, init, per-client training, DP noise) is
// reproducible in isolation. Same (master, name, index) -> same seed.
std::uint64_t seed_stream(std::uint64_t master, std::string_view name,
                          std::uint64_t index = 0);

}  // namespace fedsb
