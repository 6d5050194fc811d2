// Worker cap and an index-parallel loop for inference-only work.
#pragma once

#include <cstddef>
#include <functional>

namespace dcn {

/// Process-wide worker cap; 1 (the default) runs everything on the caller.
void set_worker_threads(std::size_t n);
std::size_t worker_threads();

/// Calls fn(i) for i in [0, n) on up to worker_threads() threads. Each index
/// runs exactly once; the first exception thrown is rethrown after all workers
/// have joined.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace dcn
