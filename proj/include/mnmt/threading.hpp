#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace mnmt {

// Shared worker pool for data-parallel kernels. Work is split into index
// ranges computed from the chunk count alone, so results are bit-identical
// for any thread count: every output element is written by exactly one
// worker, accumulating in the same order as the serial loop.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int threads() const { return n_threads_; }

  void set_threads(int n) {
    std::lock_guard<std::mutex> outer(api_mutex_);
    n = n < 1 ? 1 : n;
    if (n == n_threads_) return;
    stop_workers();
    n_threads_ = n;
    start_workers();
  }

  // Runs fn(begin, end) over a partition of [0, total) using all workers.
  // Blocks until every range is done.
  void parallel_ranges(int64_t total, const std::function<void(int64_t, int64_t)>& fn) {
    if (total <= 0) return;
    std::lock_guard<std::mutex> outer(api_mutex_);
    const int usable = static_cast<int>(std::min<int64_t>(n_threads_, total));
    if (usable <= 1 || workers_.empty()) {
      fn(0, total);
      return;
    }
    {
      std::unique_lock<std::mutex> lock(mutex_);
      task_ = &fn;
      task_total_ = total;
      task_parts_ = usable;
      next_part_ = 0;
      pending_ = usable;
      ++generation_;
    }
    cv_.notify_all();
    // the caller thread also works
    work_loop_once();
    std::unique_lock<std::mutex> lock(mutex_);
    done_cv_.wait(lock, [&] { return pending_ == 0; });
    task_ = nullptr;
  }

 private:
  ThreadPool() {
    const char* env = std::getenv("MNMTLAB_THREADS");
    int n = env ? std::atoi(env) : static_cast<int>(std::thread::hardware_concurrency());
    n_threads_ = n < 1 ? 1 : (n > 16 ? 16 : n);
    start_workers();
  }

  ~ThreadPool() { stop_workers(); }

  void start_workers() {
    if (n_threads_ <= 1) return;
    stopping_ = false;
    for (int i = 0; i < n_threads_ - 1; ++i)
      workers_.emplace_back([this]() {
        uint64_t seen = 0;
        while (true) {
          std::unique_lock<std::mutex> lock(mutex_);
          cv_.wait(lock, [&] { return stopping_ || generation_ != seen; });
          if (stopping_) return;
          seen = generation_;
          lock.unlock();
          work_loop_once();
        }
      });
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      stopping_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  void work_loop_once() {
    while (true) {
      int part;
      const std::function<void(int64_t, int64_t)>* task;
      int64_t total, parts;
      {
        std::lock_guard<std::mutex> lock(mutex_);
        if (!task_ || next_part_ >= task_parts_) return;
        part = next_part_++;
        task = task_;
        total = task_total_;
        parts = task_parts_;
      }
      const int64_t begin = total * part / parts;
      const int64_t end = total * (part + 1) / parts;
      if (begin < end) (*task)(begin, end);
      {
        std::lock_guard<std::mutex> lock(mutex_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex api_mutex_;
  std::mutex mutex_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> workers_;
  const std::function<void(int64_t, int64_t)>* task_ = nullptr;
  int64_t task_total_ = 0;
  int task_parts_ = 0;
  int next_part_ = 0;
  int pending_ = 0;
  uint64_t generation_ = 0;
  bool stopping_ = false;
  int n_threads_ = 1;
};

}  // namespace mnmt
