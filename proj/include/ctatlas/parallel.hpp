#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ctatlas::parallel {

namespace detail {
inline std::atomic<int>& global_workers() {
  static std::atomic<int> n{1};
  return n;
}
inline int& local_override() {
  thread_local int n = 0;
  return n;
}
}  // namespace detail

inline void set_workers(int n) { detail::global_workers() = std::max(1, n); }

inline int workers() {
  const int local = detail::local_override();
  return local > 0 ? local : detail::global_workers().load();
}

// Forces nested loops on the current thread to run with a fixed worker count.
class ScopedWorkers {
 public:
  explicit ScopedWorkers(int n) : saved_(detail::local_override()) {
    detail::local_override() = std::max(1, n);
  }
  ~ScopedWorkers() { detail::local_override() = saved_; }
  ScopedWorkers(const ScopedWorkers&) = delete;
  ScopedWorkers& operator=(const ScopedWorkers&) = delete;

 private:
  int saved_;
};

// Runs fn(begin, end) over static contiguous chunks of [0, n). Every index is
// visited exactly once; callers must write only to per-index outputs so that
// results do not depend on the chunking.
template <typename Fn>
void for_range(std::size_t n, Fn&& fn) {
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(workers()), n);
  if (w <= 1) {
    if (n > 0) fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(w);
  std::exception_ptr error;
  std::mutex error_mutex;
  const std::size_t chunk = (n + w - 1) / w;
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([&, begin, end] {
      ScopedWorkers nested(1);
      try {
        fn(begin, end);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  if (error) std::rethrow_exception(error);
}

template <typename Fn>
void for_each_index(std::size_t n, Fn&& fn) {
  for_range(n, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) fn(i);
  });
}

}  // namespace ctatlas::parallel
