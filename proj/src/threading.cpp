#include "wsclip/threading.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace wsclip {

namespace {

std::atomic<int> g_threads{1};

using Body = std::function<void(std::int64_t, std::int64_t)>;

// Persistent fork-join pool. Ranges are static and contiguous per worker
// slot, so the work assignment (and therefore every output element's
// computation) is independent of scheduling. Not reentrant: parallel_for
// must not be called from inside a parallel_for body.
class Pool {
   public:
    ~Pool() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    void run(std::int64_t n, const Body& body, int want) {
        const int lanes = static_cast<int>(std::min<std::int64_t>(want, n));
        ensure(lanes - 1);
        {
            std::lock_guard<std::mutex> lock(mu_);
            body_ = &body;
            total_ = n;
            lanes_ = lanes;
            chunk_ = (n + lanes - 1) / lanes;
            pending_ = lanes - 1;
            ++epoch_;
        }
        cv_.notify_all();
        body(0, std::min(chunk_, n));
        std::unique_lock<std::mutex> lock(mu_);
        done_cv_.wait(lock, [&] { return pending_ == 0; });
        body_ = nullptr;
    }

   private:
    void ensure(int needed) {
        while (static_cast<int>(workers_.size()) < needed) {
            const int slot = static_cast<int>(workers_.size()) + 1;  // slot 0 = caller
            workers_.emplace_back([this, slot] { worker_loop(slot); });
        }
    }

    void worker_loop(int slot) {
        std::uint64_t seen = 0;
        while (true) {
            const Body* body = nullptr;
            std::int64_t lo = 0, hi = 0;
            bool participate = false;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [&] { return stop_ || epoch_ != seen; });
                if (stop_) return;
                seen = epoch_;
                participate = slot < lanes_;
                if (participate) {
                    body = body_;
                    lo = std::min<std::int64_t>(total_, slot * chunk_);
                    hi = std::min<std::int64_t>(total_, lo + chunk_);
                }
            }
            if (!participate) continue;
            if (lo < hi) (*body)(lo, hi);
            std::lock_guard<std::mutex> lock(mu_);
            if (--pending_ == 0) done_cv_.notify_one();
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const Body* body_ = nullptr;
    std::int64_t total_ = 0;
    std::int64_t chunk_ = 0;
    int lanes_ = 0;
    int pending_ = 0;
    std::uint64_t epoch_ = 0;
    bool stop_ = false;
};

Pool& pool() {
    static Pool p;
    return p;
}

}  // namespace

void set_num_threads(int n) { g_threads.store(std::max(1, n)); }

int num_threads() { return g_threads.load(); }

void parallel_for(std::int64_t n, const Body& body) {
    if (n <= 0) return;
    const int t = g_threads.load();
    if (t <= 1 || n < 2) {
        body(0, n);
        return;
    }
    pool().run(n, body, t);
}

}  // namespace wsclip
