#pragma once

// Deterministic parallel_for over an index range. Each index writes only
// its own outputs, so any schedule gives bit-identical results.
// YUVNET_THREADS caps the worker count (0 or unset = hardware default).

#include <cstdlib>
#include <thread>
#include <vector>

namespace yuvnet {

inline unsigned worker_count() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (const char *env = std::getenv("YUVNET_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v > 0) return unsigned(v);
  }
  return hw;
}

template <typename Fn>
void parallel_for(std::size_t n, Fn &&fn) {
  unsigned workers = worker_count();
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (workers > n) workers = unsigned(n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += workers) fn(i);
    });
  }
  for (auto &th : pool) th.join();
}

}  // namespace yuvnet
