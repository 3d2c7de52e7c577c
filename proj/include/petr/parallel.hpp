#pragma once

#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace petr {

// Worker count comes from PETR_THREADS (default 1), read once per process.
inline int thread_count() {
    static const int n = [] {
        const char* env = std::getenv("PETR_THREADS");
        if (!env) return 1;
        const int v = std::atoi(env);
        if (v < 1) return 1;
        if (v > 64) return 64;
        return v;
    }();
    return n;
}

namespace detail {

// Persistent pool of thread_count()-1 helpers; lane 0 runs on the caller.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool(thread_count() - 1);
        return pool;
    }

    int helpers() const { return static_cast<int>(threads_.size()); }

    void run(int lanes, const std::function<void(int)>& fn) {
        if (lanes <= 1 || threads_.empty()) {
            for (int l = 0; l < lanes; ++l) fn(l);
            return;
        }
        {
            std::unique_lock<std::mutex> lk(mu_);
            job_ = &fn;
            job_lanes_ = lanes;
            pending_ = lanes - 1;
            ++generation_;
            cv_.notify_all();
        }
        fn(0);
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [&] { return pending_ == 0; });
        job_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::unique_lock<std::mutex> lk(mu_);
            stop_ = true;
            cv_.notify_all();
        }
        for (auto& t : threads_) t.join();
    }

private:
    explicit ThreadPool(int n_helpers) {
        for (int i = 0; i < n_helpers; ++i) {
            threads_.emplace_back([this, i] { worker(i + 1); });
        }
    }

    void worker(int lane) {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* job = nullptr;
            int lanes = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                job = job_;
                lanes = job_lanes_;
            }
            if (job && lane < lanes) (*job)(lane);
            {
                std::unique_lock<std::mutex> lk(mu_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(int)>* job_ = nullptr;
    int job_lanes_ = 0;
    int pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

inline thread_local bool in_parallel_region = false;

}  // namespace detail

// Splits [0, n) into fixed contiguous chunks, one per lane. The partition
// depends only on (n, thread count), so results are bit-identical for any
// scheduling and for serial execution.
template <class Body>
void parallel_for(std::size_t n, std::size_t grain, const Body& body) {
    const int tc = thread_count();
    if (n == 0) return;
    std::size_t lanes = static_cast<std::size_t>(tc);
    if (grain > 0) lanes = std::min<std::size_t>(lanes, (n + grain - 1) / grain);
    if (lanes <= 1 || detail::in_parallel_region) {
        body(std::size_t{0}, n);
        return;
    }
    const std::size_t chunk = (n + lanes - 1) / lanes;
    std::function<void(int)> fn = [&](int lane) {
        detail::in_parallel_region = true;
        const std::size_t b = std::min(n, static_cast<std::size_t>(lane) * chunk);
        const std::size_t e = std::min(n, b + chunk);
        if (b < e) body(b, e);
        detail::in_parallel_region = false;
    };
    detail::ThreadPool::instance().run(static_cast<int>(lanes), fn);
}

}  // namespace petr
