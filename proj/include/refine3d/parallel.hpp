#pragma once

#include <cstdint>
#include <functional>

namespace refine3d {

// Worker count. Resolved once from REFINE3D_THREADS (0 or unset = auto);
// tests may override at a quiescent point.
int worker_threads();
void set_worker_threads(int n);

// Runs body(begin, end) over a fixed contiguous partition of [0, n).
// Each index is handled by exactly one invocation and each invocation is a
// serial loop, so results are bitwise independent of the thread count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

}  // namespace refine3d
