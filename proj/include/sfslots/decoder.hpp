#pragma once

// Feature-reconstruction decoder used to pretrain slot attention.
//
// Non-autoregressive: one learned query per reconstructed token position
// cross-attends to the slots through a stack of (cross-attention,
// feed-forward) blocks; a linear head maps each position to feature width.

#include <string>
#include <vector>

#include "sfslots/attention.hpp"
#include "sfslots/nn.hpp"

namespace sfsl {

struct DecoderConfig {
  std::size_t positions = 256;  // tokens to reconstruct
  std::size_t slot_dim = 64;
  std::size_t dim = 64;         // decoder width
  std::size_t out_dim = 32;     // feature width
  std::size_t layers = 2;
  std::size_t heads = 1;
  std::size_t ff_hidden = 128;
  Activation activation = Activation::kGeluSigmoid;
};

template <class S>
struct DecoderOutput {
  Var<S> features;                 // [positions x out_dim]
  std::vector<Var<S>> attention;   // per layer, [positions x N] (head-averaged)
};

template <class S>
class ReconDecoder {
 public:
  ReconDecoder() = default;

  ReconDecoder(ParamStore<S>& store, const std::string& name, DecoderConfig cfg) : cfg_(cfg) {
    if (cfg.positions == 0 || cfg.layers == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0) {
      throw ConfigError("decoder needs positions, layers >= 1 and dim divisible by heads");
    }
    auto rng = store.rng_for(name + ".queries");
    queries_ = store.add(name + ".queries", normal_init<S>(Shape{cfg.positions, cfg.dim}, 1.0, rng));
    norm_slots_ = LayerNorm<S>(store, name + ".norm_slots", cfg.slot_dim);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = name + ".layer" + std::to_string(l);
      Layer layer;
      layer.norm_q = LayerNorm<S>(store, p + ".norm_q", cfg.dim);
      layer.wq = Linear<S>(store, p + ".q", cfg.dim, cfg.dim, false);
      layer.wk = Linear<S>(store, p + ".k", cfg.slot_dim, cfg.dim, false);
      layer.wv = Linear<S>(store, p + ".v", cfg.slot_dim, cfg.dim, false);
      layer.wo = Linear<S>(store, p + ".o", cfg.dim, cfg.dim);
      layer.norm_ff = LayerNorm<S>(store, p + ".norm_ff", cfg.dim);
      layer.ff = Mlp<S>(store, p + ".ff", cfg.dim, cfg.ff_hidden, cfg.activation);
      layers_.push_back(layer);
    }
    norm_out_ = LayerNorm<S>(store, name + ".norm_out", cfg.dim);
    head_ = Linear<S>(store, name + ".head", cfg.dim, cfg.out_dim);
  }

  const DecoderConfig& config() const { return cfg_; }
  const Linear<S>& head() const { return head_; }

  DecoderOutput<S> operator()(const Var<S>& slots) const {
    if (slots.dims().size() != 2 || slots.dims()[1] != cfg_.slot_dim) {
      throw ShapeError("decoder expects [N x " + std::to_string(cfg_.slot_dim) + "] slots, got " +
                       shape_str(slots.dims()));
    }
    DecoderOutput<S> out;
    auto kv = norm_slots_(slots);
    Var<S> x = queries_;
    for (const auto& L : layers_) {
      auto att = multihead_attention(L.wq(L.norm_q(x)), L.wk(kv), L.wv(kv), cfg_.heads);
      x = add(x, L.wo(att.output));
      x = add(x, L.ff(L.norm_ff(x)));
      Var<S> avg = att.weights.front();
      for (std::size_t h = 1; h < att.weights.size(); ++h) avg = add(avg, att.weights[h]);
      out.attention.push_back(att.weights.size() == 1 ? avg : scale(avg, S(1) / S(att.weights.size())));
    }
    out.features = head_(norm_out_(x));
    return out;
  }

 private:
  struct Layer {
    LayerNorm<S> norm_q;
    Linear<S> wq, wk, wv, wo;
    LayerNorm<S> norm_ff;
    Mlp<S> ff;
  };

  DecoderConfig cfg_;
  Var<S> queries_;
  LayerNorm<S> norm_slots_;
  std::vector<Layer> layers_;
  LayerNorm<S> norm_out_;
  Linear<S> head_;
};

// Mean squared error over all entries.
template <class S>
Var<S> recon_loss(const Var<S>& predicted, const Var<S>& target) {
  return mse_loss(predicted, target);
}

}  // namespace sfsl
