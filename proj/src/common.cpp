#include "cjade/common.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

#include <zlib.h>

namespace cjade {

namespace {

int detect_workers() {
    if (const char* env = std::getenv("CJADE_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

int g_workers = 0;

// Persistent pool: spawning threads per layer call is too costly during
// training, so workers park on a condition variable between jobs.
class Pool {
public:
    explicit Pool(int n) : threads_(static_cast<std::size_t>(n > 1 ? n - 1 : 0)) {
        for (std::size_t i = 0; i < threads_.size(); ++i) {
            threads_[i] = std::thread([this, i] { run(i + 1); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
            ++generation_;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void dispatch(int nparts, const std::function<void(int)>& part) {
        {
            std::lock_guard<std::mutex> lk(mu_);
            job_ = &part;
            nparts_ = nparts;
            pending_ = nparts - 1; // part 0 runs on the caller
            ++generation_;
        }
        cv_.notify_all();
        part(0);
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

    int size() const { return static_cast<int>(threads_.size()) + 1; }

private:
    void run(std::size_t idx) {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* job = nullptr;
            int nparts = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                seen = generation_;
                if (stop_) return;
                job = job_;
                nparts = nparts_;
            }
            if (job && static_cast<int>(idx) < nparts) {
                (*job)(static_cast<int>(idx));
                std::lock_guard<std::mutex> lk(mu_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(int)>* job_ = nullptr;
    int nparts_ = 0;
    int pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

Pool* pool() {
    static Pool p(worker_count());
    return &p;
}

} // namespace

int worker_count() {
    if (g_workers == 0) g_workers = detect_workers();
    return g_workers;
}

void set_worker_count(int n) {
    if (n >= 1) g_workers = n;
}

void parallel_for_blocks(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    int nw = pool()->size();
    if (nw <= 1 || n < 2) {
        fn(0, n);
        return;
    }
    int parts = static_cast<int>(std::min<std::int64_t>(nw, n));
    std::int64_t chunk = (n + parts - 1) / parts;
    std::function<void(int)> part = [&](int p) {
        std::int64_t b = p * chunk;
        std::int64_t e = std::min<std::int64_t>(n, b + chunk);
        if (b < e) fn(b, e);
    };
    pool()->dispatch(parts, part);
}

std::uint32_t crc32_ieee(const void* data, std::size_t len, std::uint32_t seed) {
    return static_cast<std::uint32_t>(
        ::crc32(seed, static_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

std::uint64_t fnv1a64(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace cjade
