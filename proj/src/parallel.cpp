#include "echodx/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace echodx {

namespace {

std::atomic<std::size_t> g_override{0};

std::size_t env_workers() {
  static const std::size_t value = [] {
    std::size_t n = 0;
    if (const char* env = std::getenv("ECHODX_THREADS")) {
      try {
        n = static_cast<std::size_t>(std::stoul(env));
      } catch (...) {
        n = 0;
      }
    }
    if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
    return n;
  }();
  return value;
}

}  // namespace

std::size_t worker_count() {
  const auto forced = g_override.load();
  return forced ? forced : env_workers();
}

void set_worker_count(std::size_t workers) { g_override.store(workers); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  const auto workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    for (;;) {
      const auto i = next.fetch_add(1);
      if (i >= n) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> threads;
  threads.reserve(workers - 1);
  for (std::size_t t = 1; t < workers; ++t) threads.emplace_back(run);
  run();
  threads.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace echodx
