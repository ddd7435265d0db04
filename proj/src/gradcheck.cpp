#include "locemb/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace locemb::ad {

template <class T>
double finite_difference_check(const ScalarFn<T>& f, BasicTensor<T> x, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3))
    fail(ErrorCode::InvalidArgument, "finite_difference_check: eps must lie in [1e-6, 1e-3]");
  const bool had_grad = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  active_tape<T>().clear();
  auto loss = f(x);
  backward(loss);
  const std::vector<T> analytic(x.grad().begin(), x.grad().end());

  NoGradGuard no_grad;
  double worst = 0.0;
  auto data = x.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const T saved = data[i];
    const T hi = static_cast<T>(saved + eps);
    const T lo = static_cast<T>(saved - eps);
    data[i] = hi;
    const double fp = f(x).item();
    data[i] = lo;
    const double fm = f(x).item();
    data[i] = saved;
    const double numeric = (fp - fm) / (static_cast<double>(hi) - static_cast<double>(lo));
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric) /
                       std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  x.zero_grad();
  x.set_requires_grad(had_grad);
  return worst;
}

template double finite_difference_check<float>(const ScalarFn<float>&, BasicTensor<float>, double);
template double finite_difference_check<double>(const ScalarFn<double>&, BasicTensor<double>,
                                                double);

}  // namespace locemb::ad
