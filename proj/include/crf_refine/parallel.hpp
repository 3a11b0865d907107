#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace crf_refine {

// Runs fn(i) for every i in [0, count) on up to `threads` workers. Work is
// claimed dynamically, so fn must write only to per-index state; callers get
// deterministic results by reducing in index order afterwards. The exception
// thrown for the lowest index, if any, is rethrown after all workers join.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  std::size_t error_index = count;
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (i < error_index) {
          error_index = i;
          error = std::current_exception();
        }
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t n = threads < count ? threads : count;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace crf_refine
