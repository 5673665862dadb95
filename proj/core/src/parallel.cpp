// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace wplab {

int resolve_threads(std::optional<int> requested) {
  if (requested) {
    if (*requested < 1) throw std::invalid_argument("thread count must be >= 1");
    return *requested;
  }
  if (const char* env = std::getenv("WPLAB_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
    throw std::invalid_argument(std::string("WPLAB_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

std::size_t worker_count(std::size_t n, int threads) {
  return std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
}

void parallel_for_workers(std::size_t n, int threads, const std::function<void(std::size_t, std::size_t)>& fn) {
  const std::size_t workers = worker_count(n, threads);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(0, i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto work = [&](std::size_t w) {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(w, i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next.store(n);
        return;
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
  pool.clear();
  if (error) std::rethrow_exception(error);
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  parallel_for_workers(n, threads, [&](std::size_t, std::size_t i) { fn(i); });
}

}  // namespace wplab
