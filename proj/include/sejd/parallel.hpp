#pragma once

#include <cstddef>
#include <functional>

namespace sejd {

// 0 means "use the hardware concurrency".
std::size_t resolve_threads(std::size_t requested);

// Runs fn(i) for i in [0, n) on up to `threads` workers using a static
// contiguous partition. The first exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace sejd
