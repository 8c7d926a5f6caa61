#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace carvemap {

/// Global worker cap, settable from the CLI (--threads). 0 = hardware default.
inline int& thread_cap() {
  static int cap = 0;
  return cap;
}

inline int effective_threads() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  const int cap = thread_cap();
  return cap > 0 ? std::min(cap, hw) : hw;
}

/// Chunked parallel loop. `fn(begin, end)` is called on contiguous index
/// ranges; ranges partition [0, n) deterministically, so per-chunk outputs can
/// be merged in index order to keep results schedule-independent.
inline void parallel_chunks(size_t n, const std::function<void(size_t, size_t)>& fn) {
  if (n == 0) return;
  const int workers = std::min<size_t>(effective_threads(), n);
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(workers);
  const size_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const size_t begin = static_cast<size_t>(w) * chunk;
    const size_t end = std::min(begin + chunk, n);
    if (begin >= end) break;
    threads.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : threads) t.join();
}

/// Element-wise parallel loop over [0, n).
inline void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
  parallel_chunks(n, [&fn](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) fn(i);
  });
}

}  // namespace carvemap
