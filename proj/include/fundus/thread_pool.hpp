#pragma once

#include <cstdint>
#include <functional>

namespace fundus {

// Global kernel thread count. 1 = reference (fully serial) mode.
// Any fixed value produces bit-identical results: parallel_for only ever
// splits work across disjoint output slices, never inside a reduction.
int num_threads();
void set_num_threads(int n);  // n < 1 selects hardware concurrency

// Runs fn(begin, end) over a partition of [0, n). Serial when nested,
// when num_threads() == 1, or when n < 2 * grain.
void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace fundus
