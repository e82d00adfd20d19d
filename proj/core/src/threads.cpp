#include "moenet/threads.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

namespace moenet {

namespace {
int resolve_default() {
  if (const char* env = std::getenv("MOE_NUM_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}
int g_threads = 0;
}  // namespace

void set_num_threads(int n) { g_threads = n; }

int num_threads() {
  if (g_threads > 0) return g_threads;
  static const int def = resolve_default();
  return def;
}

}  // namespace moenet
