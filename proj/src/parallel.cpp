#include "dupl/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace dupl {

int worker_count() {
  if (const char* env = std::getenv("DUPL_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(int n, const std::function<void(int)>& fn, int max_workers) {
  if (n <= 0) return;
  const int workers = std::min(n, max_workers > 0 ? max_workers : worker_count());
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  auto run = [&](int i) {
    try {
      fn(i);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  };
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (int i; (i = next.fetch_add(1)) < n;) run(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace dupl
