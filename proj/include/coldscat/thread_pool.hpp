#pragma once

#include <atomic>
#include <condition_variable>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace coldscat {

// Minimal work pool for embarrassingly parallel sweeps. Tasks write into
// preallocated slots indexed by work item, and callers reduce in index
// order, so results do not depend on scheduling. The harness owns the only
// instance during a run; engines stay synchronous.
class ThreadPool {
 public:
  explicit ThreadPool(int workers)
      : workers_(workers < 1 ? 1 : workers) {}

  int workers() const { return workers_; }

  // Runs fn(i) for i in [0, count). Rethrows the first task exception.
  void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) const {
    if (count == 0) return;
    const int n_threads = static_cast<int>(
        std::min<std::size_t>(static_cast<std::size_t>(workers_), count));
    if (n_threads <= 1) {
      for (std::size_t i = 0; i < count; ++i) fn(i);
      return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr error;
    auto worker = [&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    };
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
  }

 private:
  int workers_;
};

}  // namespace coldscat
