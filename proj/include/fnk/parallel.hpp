#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace fnk {

/// Worker count for internal parallel loops: FNK_THREADS if set (>= 1),
/// otherwise the hardware concurrency.
inline std::size_t thread_count() {
  static const std::size_t count = [] {
    if (const char* env = std::getenv("FNK_THREADS")) {
      try {
        const long v = std::stol(env);
        if (v >= 1) return static_cast<std::size_t>(v);
      } catch (...) {
      }
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
  }();
  return count;
}

/// Runs body(i) for i in [0, n). Each index is visited exactly once and bodies
/// must write disjoint memory, so results never depend on the thread count.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += workers) body(i);
    });
  }
}

}  // namespace fnk
