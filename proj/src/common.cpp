#include "cmah/common.hpp"

#include <cstdlib>

namespace cmah {

int worker_threads() {
  const char* env = std::getenv("CMAH_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) {
    throw UsageError("CMAH_THREADS must be a positive integer");
  }
  return static_cast<int>(v > 64 ? 64 : v);
}

}  // namespace cmah
