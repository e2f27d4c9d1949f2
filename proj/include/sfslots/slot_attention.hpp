#pragma once

// Iterative slot attention: a fixed set of slots competes for input tokens
// through a softmax taken over the slot axis.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "sfslots/autograd.hpp"
#include "sfslots/nn.hpp"

namespace sfsl {

enum class LayoutKind { kSpatial, kTemporal };

// How mask rows map back onto the input: row r sits at (r / width, r % width)
// of a height x width raster. Temporal masks use height 1, width T.
struct MaskLayout {
  LayoutKind kind = LayoutKind::kSpatial;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t cells() const { return height * width; }
};

// Input-token by slot weights.
struct AttentionMask {
  TensorF weights;  // [M x N]
  MaskLayout layout;

  std::size_t inputs() const { return weights.dims()[0]; }
  std::size_t slots() const { return weights.dims()[1]; }
};

struct SlotAttentionConfig {
  std::size_t num_slots = 8;
  std::size_t iterations = 3;
  std::size_t input_dim = 32;
  std::size_t slot_dim = 64;
  std::size_t mlp_hidden = 128;
  Activation activation = Activation::kGeluSigmoid;
  double eps = 1e-8;  // per-slot renormalization epsilon
  double init_std = 0.02;
};

template <class S>
struct SlotAttentionOutput {
  Var<S> slots;  // [N x D_slot]
  Var<S> mask;   // [M x N], final iteration, rows sum to 1
};

template <class S>
class SlotAttention {
 public:
  SlotAttention() = default;

  SlotAttention(ParamStore<S>& store, const std::string& name, SlotAttentionConfig cfg)
      : cfg_(cfg) {
    if (cfg.num_slots < 1 || cfg.iterations < 1 || cfg.slot_dim < 1 || cfg.input_dim < 1) {
      throw ConfigError("slot attention needs N >= 1, R >= 1 and positive widths");
    }
    auto rng = store.rng_for(name + ".init_slots");
    init_slots_ = store.add(name + ".init_slots",
                            normal_init<S>(Shape{cfg.num_slots, cfg.slot_dim}, cfg.init_std, rng));
    norm_in_ = LayerNorm<S>(store, name + ".norm_in", cfg.input_dim);
    norm_slots_ = LayerNorm<S>(store, name + ".norm_slots", cfg.slot_dim);
    norm_mlp_ = LayerNorm<S>(store, name + ".norm_mlp", cfg.slot_dim);
    to_q_ = Linear<S>(store, name + ".to_q", cfg.slot_dim, cfg.slot_dim, false);
    to_k_ = Linear<S>(store, name + ".to_k", cfg.input_dim, cfg.slot_dim, false);
    to_v_ = Linear<S>(store, name + ".to_v", cfg.input_dim, cfg.slot_dim, false);
    gru_ = GruParams<S>(store, name + ".gru", cfg.slot_dim);
    mlp_ = Mlp<S>(store, name + ".mlp", cfg.slot_dim, cfg.mlp_hidden, cfg.activation);
  }

  const SlotAttentionConfig& config() const { return cfg_; }
  const Var<S>& init_slots() const { return init_slots_; }

  SlotAttentionOutput<S> operator()(const Var<S>& inputs) const { return run(inputs, init_slots_); }

  // Same computation starting from caller-provided initial slots.
  SlotAttentionOutput<S> run(const Var<S>& inputs, const Var<S>& initial) const {
    if (inputs.dims().size() != 2 || inputs.dims()[1] != cfg_.input_dim) {
      throw ShapeError("slot attention expects [M x " + std::to_string(cfg_.input_dim) +
                       "] inputs, got " + shape_str(inputs.dims()));
    }
    if (initial.dims() != Shape{cfg_.num_slots, cfg_.slot_dim}) {
      throw ShapeError("slot attention: initial slots have shape " + shape_str(initial.dims()));
    }
    const S temperature = S(1) / std::sqrt(S(cfg_.slot_dim));
    auto x = norm_in_(inputs);
    auto k = to_k_(x);
    auto v = to_v_(x);
    auto eps = Var<S>::constant(Tensor<S>(Shape{cfg_.num_slots}, S(cfg_.eps)));

    Var<S> slots = initial;
    Var<S> attn;
    for (std::size_t it = 0; it < cfg_.iterations; ++it) {
      auto q = to_q_(norm_slots_(slots));
      auto logits = scale(matmul_nt(k, q), temperature);  // [M x N]
      attn = softmax_axis(logits, 1);                      // over slots
      auto weights = div_rowvec(attn, add(reshape(sum_rows(attn), Shape{cfg_.num_slots}), eps));
      auto updates = matmul_tn(weights, v);                // [N x D]
      slots = gru_step(slots, updates, gru_);
      slots = add(slots, mlp_(norm_mlp_(slots)));
    }
    return {slots, attn};
  }

 private:
  SlotAttentionConfig cfg_;
  Var<S> init_slots_;
  LayerNorm<S> norm_in_, norm_slots_, norm_mlp_;
  Linear<S> to_q_, to_k_, to_v_;
  GruParams<S> gru_;
  Mlp<S> mlp_;
};

// True when permuting the initial slots by `perm` permutes the output slots
// and the mask columns the same way (within tol).
template <class S>
bool permute_slots_check(const Var<S>& inputs, const SlotAttention<S>& sa,
                         const std::vector<std::size_t>& perm, double tol = 1e-5) {
  const std::size_t n = sa.config().num_slots;
  std::vector<std::size_t> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> iota(n);
  std::iota(iota.begin(), iota.end(), std::size_t{0});
  if (sorted != iota) throw ConfigError("permute_slots_check: not a permutation of 0..N-1");

  NoGradGuard guard;
  auto base = sa(inputs);
  auto permuted = sa.run(inputs, gather_rows(sa.init_slots(), perm));
  const auto& s0 = base.slots.value();
  const auto& s1 = permuted.slots.value();
  const auto& m0 = base.mask.value();
  const auto& m1 = permuted.mask.value();
  const std::size_t d = s0.cols(), rows = m0.rows();
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t c = 0; c < d; ++c)
      if (std::abs(double(s1.at(j, c)) - double(s0.at(perm[j], c))) > tol) return false;
    for (std::size_t r = 0; r < rows; ++r)
      if (std::abs(double(m1.at(r, j)) - double(m0.at(r, perm[j]))) > tol) return false;
  }
  return true;
}

}  // namespace sfsl
