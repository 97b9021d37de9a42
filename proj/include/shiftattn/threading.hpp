#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <thread>
#include <vector>

namespace shiftattn {

/// Worker count for data-parallel loops. SHIFTATTN_THREADS overrides the
/// hardware default; a value of 1 forces strictly serial execution.
inline std::size_t thread_count() {
  static const std::size_t n = [] {
    if (const char* env = std::getenv("SHIFTATTN_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1) return static_cast<std::size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<std::size_t>(hw ? hw : 1);
  }();
  return n;
}

/// Static partition of [0, n) across threads. Each index is processed by
/// exactly one worker, so results are identical for any thread count as long
/// as distinct indices write disjoint outputs.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(thread_count(), n ? n : std::size_t{1});
  if (workers <= 1 || n <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = std::min(n, w * chunk);
    const std::size_t e = std::min(n, b + chunk);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace shiftattn
