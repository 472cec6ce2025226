#pragma once

// Central finite differences against the analytic gradient.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mnmt/rng.hpp"
#include "mnmt/tensor.hpp"

namespace mnmt::testing {

struct GradMismatch {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline double relative_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-4});
  return std::abs(a - b) / scale;
}

// loss() must rebuild the graph from the current parameter values.
inline std::vector<GradMismatch> gradcheck(const std::function<Tensor()>& loss, std::vector<std::pair<std::string, Tensor>> params,
                                           double eps = 1e-4, double tol = 1e-3) {
  for (auto& [name, p] : params) p.zero_grad();
  loss().backward();
  std::vector<GradMismatch> bad;
  for (auto& [name, p] : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = loss().item();
      data[i] = saved - eps;
      const double down = loss().item();
      data[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      if (relative_error(analytic[i], numeric) > tol) bad.push_back({name, i, analytic[i], numeric});
    }
  }
  return bad;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  auto rng = make_rng(seed);
  for (auto& x : v) x = lo + (hi - lo) * uniform_real(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace mnmt::testing
