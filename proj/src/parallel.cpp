#include "splatgen/parallel.hpp"

#include <atomic>

namespace splatgen {

namespace {
int g_num_threads = 1;
}

void set_num_threads(int n) { g_num_threads = n < 1 ? 1 : n; }
int num_threads() { return g_num_threads; }

void parallel_for(int64_t n_chunks, const std::function<void(int64_t)>& fn) {
    if (n_chunks <= 0) return;
    int workers = g_num_threads;
    if (workers <= 1 || n_chunks == 1) {
        for (int64_t i = 0; i < n_chunks; ++i) fn(i);
        return;
    }
    if (static_cast<int64_t>(workers) > n_chunks) workers = static_cast<int>(n_chunks);
    std::atomic<int64_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                int64_t i = next.fetch_add(1);
                if (i >= n_chunks) return;
                fn(i);
            }
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace splatgen
