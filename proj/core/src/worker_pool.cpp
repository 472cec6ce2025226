#include "mnmt/worker_pool.hpp"

#include <cstdlib>
#include <string>

namespace mnmt {

std::size_t default_threads() {
  if (const char* env = std::getenv("MNMT_THREADS")) {
    try {
      const auto n = std::stoul(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace mnmt
