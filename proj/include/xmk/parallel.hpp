#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace xmk {

/// Upper bound on worker threads used by parallel_for (the CLI --jobs flag).
inline std::atomic<int>& max_workers() {
    static std::atomic<int> n{1};
    return n;
}

/// Runs fn(i) for i in [0, n) on up to max_workers() threads. fn must only
/// write to per-index state; the first exception is rethrown.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
    const auto workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, max_workers().load())));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex mu;
    auto work = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!err) err = std::current_exception();
                next = n;
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
        work();
    }
    if (err) std::rethrow_exception(err);
}

}  // namespace xmk
