#pragma once

#include <cstddef>
#include <functional>

namespace pertrace {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Items are independent;
/// callers write results into slot i so the merge order never depends on
/// scheduling. The first exception thrown by any item is rethrown.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

/// Number of worker threads to use for a requested `jobs` value (0 = hardware).
int resolve_jobs(int jobs);

} // namespace pertrace
