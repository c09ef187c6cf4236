#pragma once

#include <cstdint>
#include <functional>

namespace wsclip {

// Batch-level parallelism knob for the heavy kernels. Work is split into
// contiguous index ranges, one per worker, and every output element is
// written by exactly one worker, so results are bit-identical for any
// thread count.
void set_num_threads(int n);
int num_threads();

// body(begin, end) over disjoint subranges of [0, n).
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace wsclip
