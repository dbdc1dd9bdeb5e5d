#pragma once

#include <functional>
#include <vector>

#include "iba/rng.hpp"
#include "iba/tape.hpp"
#include "iba/tensor.hpp"

namespace iba {

struct FdOptions {
  // Central-difference step. 1e-3 balances truncation against floating-point
  // roundoff for losses of order one; much smaller steps drown low-magnitude
  // gradient entries in subtraction noise.
  double eps = 1e-3;
  std::size_t sample_count = 0;  // 0 checks every entry of every param
  std::uint64_t seed = 1;        // entry sampling when sample_count > 0
};

// Compares tape gradients of a scalar-valued function against central finite
// differences, perturbing parameter entries one at a time. Returns the max
// relative error over checked entries, |a - b| / max(|a|, |b|, 1e-8).
double fd_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                const std::vector<Tensor>& params, const FdOptions& opts = {});

}  // namespace iba
