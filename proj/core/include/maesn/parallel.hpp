#pragma once

#include <cstdlib>
#include <functional>
#include <future>
#include <thread>
#include <vector>

namespace maesn {

/// Worker count for data collection: MAESN_WORKERS if set, else hardware
/// concurrency. Results never depend on this value — every work item owns its
/// output slot and randomness is keyed by item identity, not schedule.
inline int worker_count() {
  if (const char* env = std::getenv("MAESN_WORKERS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Run fn(i) for i in [0, n) across workers. fn must only write to
/// i-exclusive state. The first exception, if any, is rethrown.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  int workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::future<void>> futs;
  for (int w = 0; w < workers; ++w)
    futs.push_back(std::async(std::launch::async, [&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    }));
  for (auto& f : futs) f.get();
}

}  // namespace maesn
