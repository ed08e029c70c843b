#pragma once

#include <cstddef>
#include <functional>

namespace josa {

// --threads default: JOSA_THREADS if set, else hardware concurrency.
int default_threads();

// Runs fn(0..n-1) on up to `threads` workers with a static partition. Each
// index must write only to its own outputs. The first exception is rethrown.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)> &fn);

} // namespace josa
