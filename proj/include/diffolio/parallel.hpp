#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace diffolio {

struct ParallelOptions {
    int threads = 0;            // 0 = hardware concurrency
    bool deterministic = false; // static task assignment instead of a shared counter

    int resolved_threads() const {
        if (threads > 0) return threads;
        const unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : static_cast<int>(hw);
    }
};

/// Runs fn(task) for task in [0, n). Callers write results into per-task slots and
/// reduce them in task order afterwards, so outputs never depend on scheduling.
inline void parallel_for(std::size_t n, const ParallelOptions& opt, const std::function<void(std::size_t)>& fn) {
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(opt.resolved_threads()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::exception_ptr error;
    std::mutex error_mu;
    std::atomic<std::size_t> next{0};
    auto body = [&](std::size_t w) {
        try {
            if (opt.deterministic) {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } else {
                for (std::size_t i = next++; i < n; i = next++) fn(i);
            }
        } catch (...) {
            std::lock_guard lock(error_mu);
            if (!error) error = std::current_exception();
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body, w);
    body(0);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace diffolio
