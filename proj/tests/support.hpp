#pragma once

// Shared test helpers: central finite differences over double-precision
// graphs and small random tensor factories.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "sfslots/autograd.hpp"
#include "sfslots/rng.hpp"

namespace sfsl::test {

inline TensorD random_tensor(Shape dims, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  TensorD t(std::move(dims));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline TensorF random_tensor_f(Shape dims, Rng& rng, double scale = 1.0) {
  return random_tensor(std::move(dims), rng, scale).cast<float>();
}

// Fixed random projection turning any output into a scalar loss, so that
// every output coordinate contributes a distinct weight to the gradient.
inline VarD project(const VarD& out, std::uint64_t seed) {
  Rng rng(seed);
  auto w = VarD::constant(random_tensor(out.dims(), rng));
  return sum(mul(out, w));
}

struct GradReport {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;

  double pass_fraction() const { return checked ? double(passed) / double(checked) : 1.0; }
};

inline double rel_error(double a, double n, double floor = 1e-8) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Compares reverse-mode gradients of `loss()` w.r.t. `inputs` against central
// differences with step h, on up to `samples` coordinates drawn uniformly
// from all inputs together (every coordinate when there are fewer). `floor`
// bounds the relative-error denominator from below.
inline GradReport finite_difference_check(const std::function<VarD()>& loss, std::vector<VarD> inputs,
                                          double h = 1e-3, double tol = 1e-3,
                                          std::size_t samples = 200, std::uint64_t seed = 1,
                                          double floor = 1e-8) {
  for (auto& v : inputs) v.zero_grad();
  backward(loss());
  std::vector<TensorD> analytic;
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    analytic.push_back(inputs[i].grad());
    for (std::size_t k = 0; k < inputs[i].size(); ++k) coords.emplace_back(i, k);
  }
  if (coords.size() > samples) {
    Rng rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(samples);
  }

  GradReport rep;
  NoGradGuard guard;
  for (auto [i, k] : coords) {
    auto& val = inputs[i].mutable_value();
    const double orig = val[k];
    val[k] = orig + h;
    const double up = loss().item();
    val[k] = orig - h;
    const double down = loss().item();
    val[k] = orig;
    const double numeric = (up - down) / (2 * h);
    const double err = rel_error(analytic[i][k], numeric, floor);
    rep.worst = std::max(rep.worst, err);
    ++rep.checked;
    if (err <= tol) ++rep.passed;
  }
  return rep;
}

}  // namespace sfsl::test
