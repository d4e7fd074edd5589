#pragma once

// Range splitter for compute kernels. Each output element is owned by exactly
// one task, so kernel results are bitwise identical for any worker count.

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace dc {

inline void parallel_for(int64_t n, int workers, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    if (workers <= 1 || n == 1) {
        fn(0, n);
        return;
    }
    const int64_t nw = std::min<int64_t>(workers, n);
    const int64_t chunk = (n + nw - 1) / nw;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(nw - 1));
    for (int64_t w = 1; w < nw; ++w) {
        const int64_t lo = w * chunk;
        const int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    fn(0, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

} // namespace dc
