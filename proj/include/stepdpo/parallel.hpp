#pragma once

#include <cstddef>
#include <functional>

namespace stepdpo {

/// Runs fn(i) for i in [0, n) on up to `workers` threads using a static
/// contiguous partition. fn must write only to slot i of its outputs; the
/// caller reduces in index order, so results never depend on `workers`.
/// The first exception thrown by any fn is rethrown on the calling thread.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace stepdpo
