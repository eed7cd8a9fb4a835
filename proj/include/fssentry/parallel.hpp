#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace fssentry {

/// Runs fn(i) for i in [0, n) across up to `threads` workers (0 = hardware
/// concurrency). Callers must make iterations independent; determinism comes
/// from per-index RNG streams and index-addressed outputs, not from ordering.
inline void parallel_for(size_t n, const std::function<void(size_t)>& fn, int threads = 0) {
    if (n == 0) return;
    size_t workers = threads > 0 ? static_cast<size_t>(threads) : std::thread::hardware_concurrency();
    if (workers <= 1 || n == 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    workers = std::min(workers, n);
    std::atomic<size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

} // namespace fssentry
