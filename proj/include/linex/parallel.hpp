// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace linex {

// Worker count resolution: explicit request > LINEX_THREADS env > hardware.
int resolve_threads(int requested);

// Runs fn(chunk, begin, end) over [0, n_items) split into exactly n_chunks
// contiguous ranges. The chunking is a function of (n_items, n_chunks) only,
// never of the worker count, so per-chunk partial results merged in chunk
// order give thread-count-independent totals.
void parallel_chunks(std::size_t n_items, std::size_t n_chunks, int threads,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

}  // namespace linex
