#pragma once

#include <cstdint>
#include <functional>

namespace capdet {

// Worker count: CAPDET_THREADS env var, else hardware concurrency capped at 16.
int worker_count();

// Runs body(i) for i in [0, n). Each index writes only its own output slot,
// so results are independent of scheduling; callers assemble them in index
// order to stay deterministic.
void parallel_for(int64_t n, const std::function<void(int64_t)>& body);

}  // namespace capdet
