#pragma once

#include <cstddef>
#include <functional>

namespace hbasin {

/// Resolve a user thread count; 0 means hardware concurrency.
std::size_t resolve_threads(std::size_t requested);

/// Runs body(i) for i in [0, n) on up to `threads` workers. Each index is
/// processed exactly once and callers write results into per-index slots, so
/// the outcome never depends on the thread count. The first exception thrown
/// by any body is rethrown on the calling thread.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body);

}  // namespace hbasin
