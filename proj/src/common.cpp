// SPDX-License-Identifier: Apache-2.0
#include "sftn/common.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>

namespace sftn {

std::string hash_hex(uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

namespace {

// Minimal fork-join pool. Work is split into fixed contiguous chunks up
// front; which thread runs a chunk never affects the values it writes.
class Pool {
 public:
  static Pool& instance() {
    static Pool p;
    return p;
  }

  void set_threads(int n) {
    std::lock_guard<std::mutex> lk(config_mu_);
    threads_ = std::max(1, n);
  }
  int threads() {
    std::lock_guard<std::mutex> lk(config_mu_);
    return threads_;
  }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    int nt = threads();
    if (nt == 1 || n < 2 * kGrain) {
      body(0, n);
      return;
    }
    const int chunks = int(std::min<int64_t>(nt, (n + kGrain - 1) / kGrain));
    const int64_t step = (n + chunks - 1) / chunks;
    std::vector<std::thread> workers;
    workers.reserve(chunks - 1);
    for (int c = 1; c < chunks; ++c) {
      const int64_t lo = c * step;
      const int64_t hi = std::min<int64_t>(n, lo + step);
      if (lo >= hi) break;
      workers.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(0, std::min<int64_t>(n, step));
    for (auto& w : workers) w.join();
  }

 private:
  static constexpr int64_t kGrain = 1024;
  std::mutex config_mu_;
  int threads_ = 1;
};

}  // namespace

void set_num_threads(int n) { Pool::instance().set_threads(n); }
int num_threads() { return Pool::instance().threads(); }
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
  Pool::instance().run(n, body);
}

}  // namespace sftn
