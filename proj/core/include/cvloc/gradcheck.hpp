#pragma once

#include <functional>
#include <limits>
#include <vector>

#include "cvloc/tensor.hpp"

namespace cvloc {

// Compares reverse-mode gradients of a scalar-valued computation against
// central finite differences. Returns the max over checked entries of
// |analytic - numeric| / max(1, |numeric|). `f` is re-run per probe with
// graph recording disabled, so it must be a pure function of `inputs`.
// `max_entries_per_input` subsamples entries at a fixed stride when a full
// sweep would be too slow; the default checks everything.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor>& inputs,
                  double step = 1e-4,
                  std::size_t max_entries_per_input = std::numeric_limits<std::size_t>::max());

}  // namespace cvloc
