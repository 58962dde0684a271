#include "danube/threading.hpp"

#include <algorithm>
#include <atomic>
#include <exception>

namespace danube {

struct ThreadPool::Job {
    std::size_t n = 0;
    std::size_t n_chunks = 0;
    const std::function<void(std::size_t, std::size_t)> * fn = nullptr;
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> done{0};
    std::mutex mutex;
    std::condition_variable cv;
    std::exception_ptr error;

    // Claims and runs chunks until none remain.
    void run() {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= n_chunks) {
                return;
            }
            const std::size_t begin = n * c / n_chunks;
            const std::size_t end = n * (c + 1) / n_chunks;
            try {
                if (begin < end) {
                    (*fn)(begin, end);
                }
            } catch (...) {
                std::lock_guard lock(mutex);
                if (!error) {
                    error = std::current_exception();
                }
            }
            if (done.fetch_add(1) + 1 == n_chunks) {
                std::lock_guard lock(mutex);
                cv.notify_all();
            }
        }
    }
};

ThreadPool::ThreadPool(std::size_t n_workers) {
    workers_.reserve(n_workers);
    for (std::size_t i = 0; i < n_workers; ++i) {
        workers_.emplace_back([this] { worker_loop(); });
    }
}

ThreadPool::~ThreadPool() {
    {
        std::lock_guard lock(mutex_);
        stopping_ = true;
    }
    cv_.notify_all();
    for (auto & t : workers_) {
        t.join();
    }
}

void ThreadPool::worker_loop() {
    for (;;) {
        std::shared_ptr<Job> job;
        {
            std::unique_lock lock(mutex_);
            cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
            if (stopping_ && queue_.empty()) {
                return;
            }
            job = queue_.front();
            if (job->next.load() >= job->n_chunks) {
                queue_.pop_front();
                continue;
            }
        }
        job->run();
        std::lock_guard lock(mutex_);
        if (!queue_.empty() && queue_.front() == job) {
            queue_.pop_front();
        }
    }
}

void ThreadPool::parallel_for(std::size_t n, std::size_t n_chunks,
                              const std::function<void(std::size_t, std::size_t)> & fn) {
    if (n == 0) {
        return;
    }
    n_chunks = std::clamp<std::size_t>(n_chunks, 1, n);
    if (n_chunks == 1 || workers_.empty()) {
        fn(0, n);
        return;
    }
    auto job = std::make_shared<Job>();
    job->n = n;
    job->n_chunks = n_chunks;
    job->fn = &fn;
    {
        std::lock_guard lock(mutex_);
        queue_.push_back(job);
    }
    cv_.notify_all();
    job->run();
    {
        std::unique_lock lock(job->mutex);
        job->cv.wait(lock, [&] { return job->done.load() == job->n_chunks; });
    }
    {
        std::lock_guard lock(mutex_);
        auto it = std::find(queue_.begin(), queue_.end(), job);
        if (it != queue_.end()) {
            queue_.erase(it);
        }
    }
    if (job->error) {
        std::rethrow_exception(job->error);
    }
}

ThreadPool & ThreadPool::global() {
    static ThreadPool pool(std::max(7u, std::thread::hardware_concurrency()));
    return pool;
}

namespace {
std::atomic<int> g_num_threads{1};
}

void set_num_threads(int n) { g_num_threads.store(std::max(1, n)); }

int num_threads() { return g_num_threads.load(); }

void parallel_for(std::size_t n, int n_threads,
                  const std::function<void(std::size_t, std::size_t)> & fn) {
    const int t = n_threads > 0 ? n_threads : num_threads();
    ThreadPool::global().parallel_for(n, static_cast<std::size_t>(t), fn);
}

} // namespace danube
