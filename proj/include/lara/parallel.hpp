#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace lara {

/// Fixed-size worker pool. Tasks are fire-and-forget; use parallel_for for
/// structured fan-out with error propagation.
class ThreadPool {
 public:
  explicit ThreadPool(std::size_t threads) {
    workers_.reserve(threads);
    for (std::size_t i = 0; i < threads; ++i) workers_.emplace_back([this] { run(); });
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  ~ThreadPool() {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  std::size_t size() const { return workers_.size(); }

  void submit(std::function<void()> task) {
    {
      std::lock_guard lock(mu_);
      queue_.push_back(std::move(task));
    }
    cv_.notify_one();
  }

 private:
  void run() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
        if (queue_.empty()) return;
        task = std::move(queue_.front());
        queue_.pop_front();
      }
      task();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> queue_;
  std::vector<std::thread> workers_;
  bool stopping_ = false;
};

/// Default parallelism: logical CPUs, capped at 8.
inline std::size_t default_jobs() {
  const auto hw = std::thread::hardware_concurrency();
  return std::clamp<std::size_t>(hw == 0 ? 1 : hw, 1, 8);
}

/// Runs fn(0..n-1), fail-fast: after the first exception no new indices
/// start and that exception is rethrown once in-flight items finish.
///
/// The calling thread claims indices too and only waits on items already
/// running elsewhere, so nested calls sharing one pool cannot deadlock.
/// With a null pool everything runs inline, in index order.
template <class Fn>
void parallel_for(ThreadPool* pool, std::size_t n, Fn&& fn) {
  if (n == 0) return;
  if (pool == nullptr || pool->size() == 0 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }

  struct State {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex mu;
    std::condition_variable cv;
    std::size_t finished = 0;
    std::exception_ptr error;
  };
  auto state = std::make_shared<State>();
  const std::size_t total = n;

  // Helpers hold the shared state; `fn` is only touched while an index is
  // outstanding, and the caller does not return before all are finished.
  auto drain = [state, total, &fn] {
    for (;;) {
      const std::size_t i = state->next.fetch_add(1);
      if (i >= total) return;
      if (!state->failed.load()) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(state->mu);
          if (!state->error) state->error = std::current_exception();
          state->failed = true;
        }
      }
      std::lock_guard lock(state->mu);
      if (++state->finished == total) state->cv.notify_all();
    }
  };

  const std::size_t helpers = std::min(pool->size(), n - 1);
  for (std::size_t h = 0; h < helpers; ++h) pool->submit(drain);
  drain();

  std::unique_lock lock(state->mu);
  state->cv.wait(lock, [&] { return state->finished == total; });
  if (state->error) std::rethrow_exception(state->error);
}

}  // namespace lara
