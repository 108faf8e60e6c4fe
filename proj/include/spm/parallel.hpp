#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace spm {

namespace detail {
inline std::atomic<std::size_t>& thread_cap() {
  static std::atomic<std::size_t> cap{0};
  return cap;
}
}  // namespace detail

/// Worker count for parallel_for. Defaults to SPM_THREADS when set, else 1.
inline std::size_t num_threads() {
  std::size_t cap = detail::thread_cap().load();
  if (cap != 0) return cap;
  std::size_t resolved = 1;
  if (const char* env = std::getenv("SPM_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) resolved = static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  detail::thread_cap().store(resolved);
  return resolved;
}

inline void set_num_threads(std::size_t n) { detail::thread_cap().store(std::max<std::size_t>(n, 1)); }

/// Runs fn(begin, end) over contiguous chunks of [0, n). Chunk boundaries
/// depend only on n and the worker count; callers write disjoint outputs.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t min_chunk = 64) {
  const std::size_t workers = std::min(num_threads(), std::max<std::size_t>(1, n / std::max<std::size_t>(min_chunk, 1)));
  if (workers <= 1 || n == 0) {
    fn(std::size_t{0}, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = w * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
}

}  // namespace spm
