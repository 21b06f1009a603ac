// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#include "linex/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace linex {

int resolve_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("LINEX_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

void parallel_chunks(std::size_t n_items, std::size_t n_chunks, int threads,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
    if (n_items == 0 || n_chunks == 0) return;
    if (n_chunks > n_items) n_chunks = n_items;
    const std::size_t base = n_items / n_chunks;
    const std::size_t rem = n_items % n_chunks;
    auto chunk_range = [&](std::size_t c) {
        const std::size_t begin = c * base + (c < rem ? c : rem);
        const std::size_t len = base + (c < rem ? 1 : 0);
        return std::pair<std::size_t, std::size_t>{begin, begin + len};
    };

    const int workers = std::min<std::size_t>(resolve_threads(threads), n_chunks);
    if (workers <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) {
            auto [b, e] = chunk_range(c);
            fn(c, b, e);
        }
        return;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto work = [&]() {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= n_chunks) return;
            try {
                auto [b, e] = chunk_range(c);
                fn(c, b, e);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };

    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int i = 0; i < workers; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace linex
