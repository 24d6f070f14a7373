// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace samkit {

/// Runs fn(i) for i in [0, count) on up to hardware_concurrency() threads.
/// Work items must be independent; the first exception thrown by any item is
/// rethrown on the caller's thread after all workers join.
template <typename Fn>
void parallel_for(size_t count, Fn&& fn, size_t max_threads = 0) {
    if (count == 0) return;
    size_t hw = max_threads ? max_threads : std::thread::hardware_concurrency();
    if (hw == 0) hw = 4;
    const size_t workers = std::min(hw, count);
    if (workers <= 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }

    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace samkit
