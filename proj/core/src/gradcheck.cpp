#include "cvloc/gradcheck.hpp"

#include <cmath>

namespace cvloc {

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor>& inputs,
                  double step, std::size_t max_entries_per_input) {
  if (step <= 0.0) throw ConfigError("grad_check: step must be positive");
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor root = f(inputs);
  if (root.size() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  if (!std::isfinite(root.item())) throw NumericError("grad_check: f is non-finite at the base point");
  backward(root);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  double max_rel = 0.0;
  NoGradGuard ng;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    const std::size_t n = t.size();
    const std::size_t stride = n <= max_entries_per_input ? 1 : (n + max_entries_per_input - 1) / max_entries_per_input;
    for (std::size_t e = 0; e < n; e += stride) {
      const double saved = t.data()[e];
      t.data_mut()[e] = saved + step;
      const double fp = f(inputs).item();
      t.data_mut()[e] = saved - step;
      const double fm = f(inputs).item();
      t.data_mut()[e] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("grad_check: f is non-finite at a perturbed point");
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[ti].empty() ? 0.0 : analytic[ti][e];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace cvloc
