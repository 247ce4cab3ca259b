#include "efi/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace efi {

namespace {

std::atomic<int> g_override{0};

int env_threads() {
  const char* v = std::getenv("EFI_THREADS");
  if (v != nullptr) {
    int n = std::atoi(v);
    if (n > 0) return n;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

}  // namespace

int max_threads() {
  int o = g_override.load(std::memory_order_relaxed);
  if (o > 0) return o;
  static const int cached = std::clamp(env_threads(), 1, 64);
  return cached;
}

void set_max_threads(int n) { g_override.store(n, std::memory_order_relaxed); }

void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& body) {
  if (n <= 0) return;
  const int threads = max_threads();
  if (threads <= 1 || n < 2 * std::max<std::int64_t>(grain, 1)) {
    body(0, n);
    return;
  }
  const std::int64_t chunks = std::min<std::int64_t>(threads, (n + grain - 1) / grain);
  const std::int64_t per = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(chunks));
  for (std::int64_t c = 0; c < chunks; ++c) {
    const std::int64_t b = c * per;
    const std::int64_t e = std::min(n, b + per);
    if (b >= e) break;
    pool.emplace_back([&body, b, e] { body(b, e); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace efi
