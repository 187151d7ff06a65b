#pragma once

#include <cstddef>
#include <exception>
#include <vector>

namespace frommerge {

// Runs fn(i) for i in [0, n) across OpenMP threads. Each index must write only its own
// output slot. If any call throws, the exception from the lowest index is rethrown,
// so error reporting does not depend on the schedule.
template <class Fn>
void parallel_for_each_index(std::size_t n, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace frommerge
