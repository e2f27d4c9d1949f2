#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sfslots/autograd.hpp"
#include "sfslots/errors.hpp"

namespace sfsl {

// Bias-corrected Adam. Moments are kept per parameter, in the order the
// parameters are passed to adam_update.
template <class S>
struct AdamState {
  S lr = S(1e-4);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  std::uint64_t t = 0;
  std::vector<Tensor<S>> m;
  std::vector<Tensor<S>> v;
};

template <class S>
void adam_update(std::span<Var<S>> params, AdamState<S>& state) {
  if (state.m.empty() && state.v.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Tensor<S>::zeros(p.dims()));
      state.v.push_back(Tensor<S>::zeros(p.dims()));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_update: state holds " + std::to_string(state.m.size()) +
                     " moments for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].dims() != params[i].dims() || state.v[i].dims() != params[i].dims()) {
      throw ShapeError("adam_update: moment shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.t;
  const S c1 = S(1) - std::pow(state.beta1, S(state.t));
  const S c2 = S(1) - std::pow(state.beta2, S(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].mutable_value();
    const auto& g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (S(1) - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (S(1) - state.beta2) * g[j] * g[j];
      const S mhat = m[j] / c1;
      const S vhat = v[j] / c2;
      p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

template <class S>
void zero_grads(std::span<Var<S>> params) {
  for (auto& p : params) p.zero_grad();
}

// Rescales grads so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
template <class S>
S clip_grad_norm(std::span<Var<S>> params, S max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (auto g : p.grad().data()) sq += double(g) * double(g);
  const S norm = S(std::sqrt(sq));
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (norm > max_norm && norm > S(0)) {
    const S k = max_norm / norm;
    for (auto& p : params)
      for (auto& g : p.mutable_grad().data()) g *= k;
  }
  return norm;
}

}  // namespace sfsl
