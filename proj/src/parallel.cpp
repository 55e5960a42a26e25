#include "dyrex/parallel.hpp"

#include <atomic>
#include <charconv>
#include <cstdlib>
#include <cstring>

namespace dyrex::parallel {

namespace {

std::atomic<int>& configured() {
  static std::atomic<int> n{threads_from_env()};
  return n;
}

}  // namespace

int threads_from_env() {
  const char* raw = std::getenv("DYREX_THREADS");
  if (!raw) return 1;
  int n = 0;
  const char* end = raw + std::strlen(raw);
  auto [ptr, ec] = std::from_chars(raw, end, n);
  if (ec != std::errc{} || ptr != end || n < 1) return 1;
  return n;
}

int thread_count() { return configured().load(std::memory_order_relaxed); }

void set_thread_count(int n) { configured().store(n < 1 ? 1 : n, std::memory_order_relaxed); }

}  // namespace dyrex::parallel
