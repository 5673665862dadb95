// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <optional>

namespace wplab {

/// Worker count: explicit request if given, else WPLAB_THREADS, else 1.
int resolve_threads(std::optional<int> requested = std::nullopt);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// processed exactly once; callers write results into index-owned slots and
/// reduce afterwards in index order, which keeps results independent of the
/// worker count. The first exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

/// Number of workers parallel_for would start.
std::size_t worker_count(std::size_t n, int threads);

/// As parallel_for, but fn also receives the worker slot in
/// [0, worker_count(n, threads)) so workers can own scratch state.
void parallel_for_workers(std::size_t n, int threads, const std::function<void(std::size_t worker, std::size_t i)>& fn);

}  // namespace wplab
