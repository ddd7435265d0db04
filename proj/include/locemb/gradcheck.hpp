#pragma once

#include <functional>

#include "locemb/tensor.hpp"

namespace locemb::ad {

template <class T>
using ScalarFn = std::function<BasicTensor<T>(const BasicTensor<T>&)>;

// Compares the tape gradient of scalar f at x against central differences.
// Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|); the
// difference quotient is formed in double from the actually representable
// perturbed points. x is restored on return.
template <class T>
double finite_difference_check(const ScalarFn<T>& f, BasicTensor<T> x, double eps);

}  // namespace locemb::ad
