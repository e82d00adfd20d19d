#pragma once

#include <cstdint>

namespace moenet {

// Number of worker threads for batched primitives. 0 = hardware default.
// Results are bitwise-reproducible for a fixed thread count; kernels are
// written so each output element has a fixed summation order and reductions
// run over a fixed chunk grid, so in practice results do not depend on the
// thread count either.
void set_num_threads(int n);
int num_threads();

}  // namespace moenet
