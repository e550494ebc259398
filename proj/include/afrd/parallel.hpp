#pragma once

#include <cstddef>
#include <functional>

namespace afrd {

/// Worker cap from AFRD_THREADS (default 1, minimum 1).
std::size_t default_threads();

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// handled by exactly one worker, so writes keyed by i are deterministic.
/// The first exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace afrd
