#pragma once

#include <cstdint>
#include <functional>
#include <random>

namespace dtr {

/// Runs body(0) .. body(count - 1) on up to `jobs` threads. Callers store
/// results by index, so output never depends on the thread count. The
/// exception from the lowest failing index, if any, is rethrown.
void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& body);

/// Independent generator for stream `index` under a master seed.
std::mt19937_64 make_stream(std::uint64_t master_seed, std::uint64_t index);

}  // namespace dtr
