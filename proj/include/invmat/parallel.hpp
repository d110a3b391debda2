#pragma once
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace invmat {

// Worker count: INVMAT_WORKERS env var overrides hardware concurrency.
inline int worker_count() {
  if (const char* env = std::getenv("INVMAT_WORKERS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc ? int(hc) : 1;
}

// Runs fn(i, worker) for i in [0, n); worker identifies the executing pool
// thread so callers can hand each one private scratch state. Work items must
// write only to their own output slots; scheduling is dynamic, so determinism
// relies on that discipline. The first exception thrown by any item is
// rethrown after all threads join.
inline void parallel_for_worker(size_t n, const std::function<void(size_t, int)>& fn,
                                int workers = 0) {
  if (workers <= 0) workers = worker_count();
  if (workers == 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mutex;
  auto body = [&](int worker) {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i, worker);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  size_t nt = std::min<size_t>(workers, n);
  pool.reserve(nt);
  for (size_t i = 0; i < nt; ++i) pool.emplace_back(body, int(i));
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline void parallel_for(size_t n, const std::function<void(size_t)>& fn,
                         int workers = 0) {
  parallel_for_worker(
      n, [&fn](size_t i, int) { fn(i); }, workers);
}

}  // namespace invmat
