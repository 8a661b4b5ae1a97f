#include "cycgrid/tensor.hpp"

#include <condition_variable>
#include <mutex>
#include <thread>

namespace cycgrid {

namespace {

// Persistent worker pool. Stable threads keep their malloc arenas warm, which
// matters here: traces and gradient buffers are multi-megabyte and reallocated
// every step. Work is split in fixed contiguous blocks so results never depend
// on scheduling.
class Pool {
public:
    static Pool& instance() {
        static Pool pool;
        return pool;
    }

    void run(int n, int threads, const std::function<void(int)>& fn) {
        const int chunk = (n + threads - 1) / threads;
        {
            std::unique_lock<std::mutex> lk(mu_);
            fn_ = &fn;
            n_ = n;
            chunk_ = chunk;
            blocks_left_ = (n + chunk - 1) / chunk;
            pending_ = blocks_left_;
            next_block_ = 0;
            ++generation_;
        }
        cv_work_.notify_all();
        // the caller works too
        for (;;) {
            int block;
            {
                std::unique_lock<std::mutex> lk(mu_);
                if (next_block_ >= blocks_left_) break;
                block = next_block_++;
            }
            run_block(block);
        }
        std::unique_lock<std::mutex> lk(mu_);
        cv_done_.wait(lk, [this] { return pending_ == 0; });
        fn_ = nullptr;
    }

private:
    Pool() {
        const unsigned hw = std::thread::hardware_concurrency();
        const int n = hw == 0 ? 1 : static_cast<int>(hw);
        for (int i = 0; i < n - 1; ++i) workers_.emplace_back([this] { worker(); });
    }

    ~Pool() {
        {
            std::unique_lock<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_work_.notify_all();
        for (auto& t : workers_) t.join();
    }

    void run_block(int block) {
        const int lo = block * chunk_;
        const int hi = std::min(n_, lo + chunk_);
        for (int i = lo; i < hi; ++i) (*fn_)(i);
        std::unique_lock<std::mutex> lk(mu_);
        if (--pending_ == 0) cv_done_.notify_all();
    }

    void worker() {
        uint64_t seen = 0;
        for (;;) {
            int block;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_work_.wait(lk, [&] { return stop_ || (generation_ != seen && fn_ != nullptr); });
                if (stop_) return;
                if (next_block_ >= blocks_left_) {
                    seen = generation_;
                    continue;
                }
                block = next_block_++;
            }
            run_block(block);
        }
    }

    std::mutex mu_;
    std::condition_variable cv_work_, cv_done_;
    std::vector<std::thread> workers_;
    const std::function<void(int)>* fn_ = nullptr;
    int n_ = 0, chunk_ = 1, blocks_left_ = 0, next_block_ = 0, pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace

int parallel_block_of(int index, int n, int threads) {
    threads = std::max(1, std::min(threads, n));
    const int chunk = (n + threads - 1) / threads;
    return index / chunk;
}

int parallel_num_blocks(int n, int threads) {
    if (n <= 0) return 0;
    threads = std::max(1, std::min(threads, n));
    const int chunk = (n + threads - 1) / threads;
    return (n + chunk - 1) / chunk;
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    Pool::instance().run(n, threads, fn);
}

}  // namespace cycgrid
