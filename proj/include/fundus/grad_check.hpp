#pragma once

#include <functional>

#include "fundus/tensor.hpp"

namespace fundus {

// Max over checked elements of |analytic - central difference| /
// max(1, |analytic|, |numeric|). f must be deterministic and scalar-valued.
// max_elements == 0 checks every element; otherwise a seeded random subset.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, float h,
                  std::int64_t max_elements = 0, std::uint64_t sample_seed = 0);

// Same error metric for a parameter embedded in a larger model: loss_fn()
// evaluates the model loss with the parameter's current contents. The
// analytic pass runs loss_fn under a fresh tape; numeric passes perturb the
// parameter storage in place and restore it.
double grad_check_param(const std::function<Tensor()>& loss_fn, Tensor param, float h,
                        std::int64_t max_elements = 0, std::uint64_t sample_seed = 0);

}  // namespace fundus
