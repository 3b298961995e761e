#pragma once

#include <cstddef>
#include <functional>

namespace echodx {

/// Worker cap from ECHODX_THREADS (0 or unset = hardware concurrency).
std::size_t worker_count();

/// Overrides the worker cap for the current process; 0 restores the default.
void set_worker_count(std::size_t workers);

/// Runs body(i) for i in [0, n). Each index must write disjoint memory so the
/// result does not depend on how indices are distributed over threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace echodx
