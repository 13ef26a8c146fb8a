// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

namespace mgd {

// Shared worker pool. Work items are closures; the pool is lazily started
// and resized on demand. Thread count never changes numerical results:
// reductions are always combined in task-index order by the callers below.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  void resize(unsigned n_threads) {
    std::unique_lock<std::mutex> lock(mutex_);
    if (n_threads == workers_.size()) return;
    shutdown_locked(lock);
    stop_ = false;
    for (unsigned i = 0; i < n_threads; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  unsigned size() const { return static_cast<unsigned>(workers_.size()); }

  // Runs fn(task_index) for task_index in [0, n_tasks). Blocks until all
  // tasks have finished; exceptions are rethrown on the calling thread.
  void run_tasks(std::size_t n_tasks, const std::function<void(std::size_t)>& fn) {
    if (n_tasks == 0) return;
    if (workers_.empty() || n_tasks == 1) {
      for (std::size_t i = 0; i < n_tasks; ++i) fn(i);
      return;
    }
    Batch batch;
    batch.fn = &fn;
    batch.next = 0;
    batch.remaining = n_tasks;
    batch.n_tasks = n_tasks;
    {
      std::unique_lock<std::mutex> lock(mutex_);
      queue_.push_back(&batch);
    }
    cv_.notify_all();
    // The calling thread participates instead of idling.
    work_on(batch);
    std::unique_lock<std::mutex> lock(batch.done_mutex);
    batch.done_cv.wait(lock, [&] { return batch.remaining == 0; });
    if (batch.error) std::rethrow_exception(batch.error);
  }

  ~ThreadPool() {
    std::unique_lock<std::mutex> lock(mutex_);
    shutdown_locked(lock);
  }

 private:
  struct Batch {
    const std::function<void(std::size_t)>* fn = nullptr;
    std::size_t n_tasks = 0;
    std::size_t next = 0;        // guarded by owner pool mutex_
    std::size_t remaining = 0;   // guarded by done_mutex
    std::mutex done_mutex;
    std::condition_variable done_cv;
    std::exception_ptr error;    // first error wins, guarded by done_mutex
  };

  ThreadPool() = default;

  void shutdown_locked(std::unique_lock<std::mutex>& lock) {
    stop_ = true;
    cv_.notify_all();
    auto workers = std::move(workers_);
    workers_.clear();
    lock.unlock();
    for (auto& w : workers) w.join();
    lock.lock();
  }

  void work_on(Batch& batch) {
    for (;;) {
      std::size_t idx;
      {
        std::unique_lock<std::mutex> lock(mutex_);
        if (batch.next >= batch.n_tasks) {
          if (!queue_.empty() && queue_.front() == &batch) queue_.pop_front();
          return;
        }
        idx = batch.next++;
      }
      run_one(batch, idx);
    }
  }

  void run_one(Batch& batch, std::size_t idx) {
    std::exception_ptr err;
    try {
      (*batch.fn)(idx);
    } catch (...) {
      err = std::current_exception();
    }
    std::unique_lock<std::mutex> lock(batch.done_mutex);
    if (err && !batch.error) batch.error = err;
    if (--batch.remaining == 0) {
      lock.unlock();
      batch.done_cv.notify_all();
    }
  }

  void worker_loop() {
    for (;;) {
      Batch* batch = nullptr;
      std::size_t idx = 0;
      {
        std::unique_lock<std::mutex> lock(mutex_);
        cv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
        if (stop_) return;
        batch = queue_.front();
        if (batch->next >= batch->n_tasks) {
          queue_.pop_front();
          continue;
        }
        idx = batch->next++;
      }
      run_one(*batch, idx);
    }
  }

  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<Batch*> queue_;
  std::vector<std::thread> workers_;
  bool stop_ = false;
};

inline unsigned default_thread_count() {
  if (const char* env = std::getenv("MGD_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

inline void set_thread_count(unsigned n) {
  ThreadPool::instance().resize(n == 0 ? 1 : n);
}

// Chunk size for splitting n items of the given per-item cost into tasks.
// Depends only on the workload, never on the thread count, so reduction
// trees are reproducible for any pool size.
inline std::size_t chunk_size_for(std::size_t per_item_cost) {
  constexpr std::size_t kTargetChunkCost = 300000;
  std::size_t c = kTargetChunkCost / (per_item_cost + 1);
  if (c < 1) c = 1;
  if (c > 16384) c = 16384;
  return c;
}

// Applies body(begin, end, chunk_index) over fixed-size chunks of [0, n).
inline void parallel_chunks(std::size_t n, std::size_t chunk,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& body) {
  if (n == 0) return;
  if (chunk < 1) chunk = 1;
  const std::size_t n_chunks = (n + chunk - 1) / chunk;
  ThreadPool::instance().run_tasks(n_chunks, [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t end = begin + chunk < n ? begin + chunk : n;
    body(begin, end, c);
  });
}

// Deterministic map-reduce: partials[c] is produced by chunk c and the
// partials are combined left to right regardless of thread count.
template <class Partial, class MakePartial, class ChunkBody, class Combine>
Partial parallel_reduce(std::size_t n, std::size_t chunk, MakePartial make_partial,
                        ChunkBody body, Combine combine) {
  if (chunk < 1) chunk = 1;
  const std::size_t n_chunks = n == 0 ? 0 : (n + chunk - 1) / chunk;
  std::vector<Partial> partials;
  partials.reserve(n_chunks);
  for (std::size_t c = 0; c < n_chunks; ++c) partials.push_back(make_partial());
  ThreadPool::instance().run_tasks(n_chunks, [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t end = begin + chunk < n ? begin + chunk : n;
    body(begin, end, partials[c]);
  });
  Partial total = make_partial();
  for (std::size_t c = 0; c < n_chunks; ++c) combine(total, partials[c]);
  return total;
}

}  // namespace mgd
