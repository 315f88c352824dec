#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <queue>
#include <thread>
#include <vector>

namespace meshnet {

/// Fixed-size worker pool. Modules never spawn threads themselves; whoever
/// drives the pipeline owns one of these and passes it down (nullptr runs
/// everything inline).
class ThreadPool {
 public:
  explicit ThreadPool(unsigned threads) {
    if (threads < 1) threads = 1;
    for (unsigned i = 0; i + 1 < threads; ++i)
      workers_.emplace_back([this] { worker_loop(); });
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  unsigned thread_count() const {
    return static_cast<unsigned>(workers_.size()) + 1;
  }

  /// Runs fn(i) for i in [0, n). Blocks until every call finished. The
  /// calling thread participates, so a 1-thread pool is a plain loop.
  void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
    if (n <= 0) return;
    if (workers_.empty()) {
      for (std::int64_t i = 0; i < n; ++i) fn(i);
      return;
    }

    // Shared batch state keeps queued-but-late tasks safe: a task that
    // wakes after all indices are consumed touches only the batch, never fn.
    struct Batch {
      std::atomic<std::int64_t> next{0};
      std::atomic<std::int64_t> done{0};
      std::int64_t n = 0;
      const std::function<void(std::int64_t)>* fn = nullptr;
      std::mutex mu;
      std::condition_variable cv;
    };
    auto batch = std::make_shared<Batch>();
    batch->n = n;
    batch->fn = &fn;

    auto body = [](const std::shared_ptr<Batch>& b) {
      for (;;) {
        const std::int64_t i = b->next.fetch_add(1);
        if (i >= b->n) break;
        (*b->fn)(i);
        if (b->done.fetch_add(1) + 1 == b->n) {
          std::lock_guard<std::mutex> lock(b->mu);
          b->cv.notify_all();
        }
      }
    };

    {
      std::lock_guard<std::mutex> lock(mu_);
      for (std::size_t w = 0; w < workers_.size(); ++w)
        tasks_.push([batch, body] { body(batch); });
    }
    cv_.notify_all();
    body(batch);

    std::unique_lock<std::mutex> lock(batch->mu);
    batch->cv.wait(lock, [&] { return batch->done.load() == n; });
  }

 private:
  void worker_loop() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [this] { return stop_ || !tasks_.empty(); });
        if (stop_ && tasks_.empty()) return;
        task = std::move(tasks_.front());
        tasks_.pop();
      }
      task();
    }
  }

  std::vector<std::thread> workers_;
  std::queue<std::function<void()>> tasks_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
};

/// parallel_for that tolerates a missing pool.
inline void maybe_parallel_for(ThreadPool* pool, std::int64_t n,
                               const std::function<void(std::int64_t)>& fn) {
  if (pool)
    pool->parallel_for(n, fn);
  else
    for (std::int64_t i = 0; i < n; ++i) fn(i);
}

}  // namespace meshnet
