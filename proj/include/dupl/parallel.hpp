#pragma once

#include <functional>

namespace dupl {

// DUPL_THREADS if set (>= 1), otherwise the hardware concurrency.
int worker_count();

// Runs fn(0..n-1) on up to max_workers threads (0 = worker_count()).
// Each index runs exactly once; the first exception by index is rethrown.
void parallel_for(int n, const std::function<void(int)>& fn, int max_workers = 0);

}  // namespace dupl
