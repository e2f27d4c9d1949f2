#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sfslots/autograd.hpp"

namespace sfsl {

template <class S>
struct AttentionResult {
  Var<S> output;                 // [Nq x D]
  std::vector<Var<S>> weights;   // one [Nq x Nk] matrix per head, rows sum to 1
};

// Scaled dot-product attention of q [Nq x D] over keys k / values v
// [Nk x D], with D split evenly across heads. Softmax runs over the key axis.
template <class S>
AttentionResult<S> multihead_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v,
                                       std::size_t heads) {
  const std::size_t d = q.dims().at(1);
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("multihead_attention: width " + std::to_string(d) +
                     " not divisible into " + std::to_string(heads) + " heads");
  }
  if (k.dims().at(1) != d || v.dims().at(1) != d || k.dims()[0] != v.dims()[0]) {
    throw ShapeError("multihead_attention: q/k/v widths disagree");
  }
  const std::size_t dh = d / heads;
  const S temperature = S(1) / std::sqrt(S(dh));
  AttentionResult<S> res;
  std::vector<Var<S>> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var<S> qh = heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    Var<S> kh = heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    Var<S> vh = heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    auto w = softmax_axis(scale(matmul_nt(qh, kh), temperature), 1);
    outs.push_back(matmul(w, vh));
    res.weights.push_back(w);
  }
  res.output = heads == 1 ? outs.front() : concat_cols(outs);
  return res;
}

}  // namespace sfsl
