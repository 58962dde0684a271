#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace danube {

/// Shared worker pool for row-parallel kernels.
///
/// Any number of threads may call parallel_for concurrently. The caller
/// always works on its own job too, so a saturated pool degrades to serial
/// execution instead of deadlocking.
class ThreadPool {
public:
    explicit ThreadPool(std::size_t n_workers);
    ~ThreadPool();

    ThreadPool(const ThreadPool &) = delete;
    ThreadPool & operator=(const ThreadPool &) = delete;

    std::size_t size() const noexcept { return workers_.size(); }

    /// Runs fn(begin, end) over [0, n) split into at most n_chunks contiguous
    /// ranges. Returns once every range has finished.
    void parallel_for(std::size_t n, std::size_t n_chunks,
                      const std::function<void(std::size_t, std::size_t)> & fn);

    static ThreadPool & global();

private:
    struct Job;
    void worker_loop();

    std::vector<std::thread> workers_;
    std::deque<std::shared_ptr<Job>> queue_;
    std::mutex mutex_;
    std::condition_variable cv_;
    bool stopping_ = false;
};

/// Process-wide default thread count used when a kernel is given 0.
void set_num_threads(int n);
int num_threads();

/// Splits [0, n) across n_threads (0 = process default) on the global pool.
void parallel_for(std::size_t n, int n_threads,
                  const std::function<void(std::size_t, std::size_t)> & fn);

} // namespace danube
