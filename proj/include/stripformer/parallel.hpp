// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace stripformer {

// Small persistent worker pool. Work is split into fixed, disjoint index
// ranges, so results are bit-identical for any thread count (each output
// element is written by exactly one thread with the same inner loop order).
// Pool size comes from SPF_THREADS (0 or unset = hardware concurrency).
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool(threads_from_env());
    return pool;
  }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

  // fn(begin, end) over [0, n), executed across the pool.
  void run(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    int chunks = size();
    if (grain > 0) {
      chunks = static_cast<int>(std::min<int64_t>(chunks, (n + grain - 1) / grain));
    }
    if (chunks <= 1 || in_worker_) {
      fn(0, n);
      return;
    }
    // Completion counter lives under done_mutex so the last worker's notify
    // finishes before this frame can unwind.
    int remaining = chunks - 1;
    std::mutex done_mutex;
    std::condition_variable done_cv;
    {
      std::lock_guard<std::mutex> lock(queue_mutex_);
      for (int c = 1; c < chunks; ++c) {
        int64_t lo = n * c / chunks;
        int64_t hi = n * (c + 1) / chunks;
        queue_.emplace_back([&, lo, hi] {
          fn(lo, hi);
          std::lock_guard<std::mutex> dl(done_mutex);
          if (--remaining == 0) done_cv.notify_one();
        });
      }
    }
    queue_cv_.notify_all();
    fn(0, n / chunks);
    std::unique_lock<std::mutex> lock(done_mutex);
    done_cv.wait(lock, [&] { return remaining == 0; });
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lock(queue_mutex_);
      stop_ = true;
    }
    queue_cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

 private:
  explicit ThreadPool(int threads) {
    for (int i = 1; i < threads; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  static int threads_from_env() {
    int n = 0;
    if (const char* e = std::getenv("SPF_THREADS")) n = std::atoi(e);
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    return std::max(1, n);
  }

  void worker_loop() {
    in_worker_ = true;
    for (;;) {
      std::function<void()> job;
      {
        std::unique_lock<std::mutex> lock(queue_mutex_);
        queue_cv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
        if (stop_ && queue_.empty()) return;
        job = std::move(queue_.back());
        queue_.pop_back();
      }
      job();
    }
  }

  static thread_local bool in_worker_;
  std::vector<std::thread> workers_;
  std::vector<std::function<void()>> queue_;
  std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  bool stop_ = false;
};

inline thread_local bool ThreadPool::in_worker_ = false;

template <typename Fn>
void parallel_for(int64_t n, int64_t grain, Fn&& fn) {
  ThreadPool::instance().run(n, grain, std::function<void(int64_t, int64_t)>(std::forward<Fn>(fn)));
}

}  // namespace stripformer
