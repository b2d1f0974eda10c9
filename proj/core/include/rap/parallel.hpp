#pragma once

#include <cstddef>
#include <functional>

namespace rap {

/// Worker count: min(hardware_concurrency, RAPSOLVE_THREADS) when the
/// environment variable is set, else hardware_concurrency.
unsigned worker_count();

/// Runs fn(begin, end) over [0, n) split into fixed-size chunks. Chunk
/// boundaries depend only on n, never on the worker count, so results that
/// write to disjoint slots are bit-identical for any thread configuration.
void parallel_for_chunks(std::size_t n, std::size_t chunk,
                         const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace rap
