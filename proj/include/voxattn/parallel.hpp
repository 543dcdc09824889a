#pragma once

#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

namespace vx {

inline std::atomic<int>& thread_count_slot() {
    static std::atomic<int> n{1};
    return n;
}

inline void set_num_threads(int n) { thread_count_slot().store(n < 1 ? 1 : n); }
inline int num_threads() { return thread_count_slot().load(); }

// Splits [0, n) into contiguous chunks, one worker per chunk. Every output
// element is produced by exactly one worker and inner reduction loops keep
// their order, so results are bit-identical for any thread count.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
    const int threads = num_threads();
    if (threads <= 1 || n < 4096) {
        fn(std::int64_t(0), n);
        return;
    }
    const int workers = static_cast<int>(std::min<std::int64_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    const std::int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const std::int64_t lo = w * chunk;
        const std::int64_t hi = std::min<std::int64_t>(lo + chunk, n);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace vx
