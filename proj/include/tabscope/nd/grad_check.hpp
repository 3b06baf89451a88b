#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "tabscope/nd/tensor.hpp"

namespace tabscope::nd {

struct GradCheckOptions {
  double eps = 5e-4;
  // Coordinates sampled per parameter tensor; 0 checks every coordinate.
  std::size_t coords_per_param = 0;
  std::uint64_t seed = 0;
};

/// Compares tape gradients of `loss_fn` against sixth-order central
/// differences with step eps.
/// Returns max |analytic - fd| / max(|analytic|, |fd|, 1e-8) over the
/// checked coordinates. `loss_fn` must build its graph from `params` on every
/// call; it runs once under a tape and six times per coordinate without one.
double grad_check(const std::function<Tensor<double>()>& loss_fn,
                  std::vector<Tensor<double>> params, const GradCheckOptions& options = {});

}  // namespace tabscope::nd
