#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace splatgen {

// Global worker count. Work is always partitioned into a fixed set of chunks
// that write disjoint memory, so results are bit-identical for any setting.
void set_num_threads(int n);
int num_threads();

// Runs fn(chunk) for chunk in [0, n_chunks). The chunk decomposition is the
// caller's; this only distributes chunks over workers.
void parallel_for(int64_t n_chunks, const std::function<void(int64_t)>& fn);

}  // namespace splatgen
