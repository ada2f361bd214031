#include "refine3d/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace refine3d {

namespace {

int resolve_env_threads() {
    const char* env = std::getenv("REFINE3D_THREADS");
    int n = 0;
    if (env && *env) n = std::atoi(env);
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    return std::max(1, n);
}

int g_workers = -1;

// Minimal persistent pool. Work items are contiguous chunks of an index
// range; workers pull chunks from an atomic cursor. Which thread runs a
// chunk never affects the values computed.
class Pool {
public:
    void run(int threads, int64_t n, const std::function<void(int64_t, int64_t)>& body) {
        std::unique_lock<std::mutex> guard(run_mutex_);
        ensure_threads(threads - 1);
        int64_t chunks = std::min<int64_t>(n, static_cast<int64_t>(threads) * 4);
        chunk_size_ = (n + chunks - 1) / chunks;
        total_ = n;
        body_ = &body;
        cursor_.store(0);
        pending_.store(static_cast<int>(helpers_.size()));
        error_ = nullptr;
        {
            std::lock_guard<std::mutex> lk(mutex_);
            ++generation_;
        }
        cv_.notify_all();
        work();  // caller participates
        {
            std::unique_lock<std::mutex> lk(mutex_);
            done_cv_.wait(lk, [this] { return pending_.load() == 0; });
        }
        body_ = nullptr;
        if (error_) std::rethrow_exception(error_);
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lk(mutex_);
            stop_ = true;
            ++generation_;
        }
        cv_.notify_all();
        for (auto& t : helpers_) t.join();
    }

private:
    void ensure_threads(size_t count) {
        while (helpers_.size() < count) {
            helpers_.emplace_back([this] { helper_loop(); });
        }
    }

    void helper_loop() {
        uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock<std::mutex> lk(mutex_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
            }
            if (body_) work();
            if (pending_.fetch_sub(1) == 1) {
                std::lock_guard<std::mutex> lk(mutex_);
                done_cv_.notify_all();
            }
        }
    }

    void work() {
        for (;;) {
            int64_t begin = cursor_.fetch_add(chunk_size_);
            if (begin >= total_) return;
            int64_t end = std::min(total_, begin + chunk_size_);
            try {
                (*body_)(begin, end);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mutex_);
                if (!error_) error_ = std::current_exception();
            }
        }
    }

    std::mutex run_mutex_;
    std::vector<std::thread> helpers_;
    std::mutex mutex_;
    std::condition_variable cv_, done_cv_;
    uint64_t generation_ = 0;
    bool stop_ = false;
    const std::function<void(int64_t, int64_t)>* body_ = nullptr;
    std::atomic<int64_t> cursor_{0};
    std::atomic<int> pending_{0};
    int64_t chunk_size_ = 1, total_ = 0;
    std::exception_ptr error_;
};

Pool& pool() {
    static Pool p;
    return p;
}

}  // namespace

int worker_threads() {
    if (g_workers < 0) g_workers = resolve_env_threads();
    return g_workers;
}

void set_worker_threads(int n) { g_workers = std::max(1, n); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    int threads = worker_threads();
    if (threads == 1 || n < 2) {
        body(0, n);
        return;
    }
    pool().run(threads, n, body);
}

}  // namespace refine3d
