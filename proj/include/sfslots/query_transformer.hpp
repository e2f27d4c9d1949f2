#pragma once

// Learnable-query transformer (Q-Former style): a fixed set of queries reads
// the inputs through cross-attention normalized over the inputs, then mixes
// through self-attention and a feed-forward block.

#include <string>
#include <vector>

#include "sfslots/aggregator.hpp"
#include "sfslots/attention.hpp"
#include "sfslots/nn.hpp"

namespace sfsl {

struct QueryTransformerConfig {
  std::size_t num_queries = 8;
  std::size_t input_dim = 32;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ff_hidden = 128;
  Activation activation = Activation::kGeluSigmoid;
  double init_std = 0.02;
};

template <class S>
struct QueryTransformerOutput {
  Var<S> tokens;                    // [Nq x dim]
  std::vector<Var<S>> cross_masks;  // final layer, per head, [M x Nq]
  Var<S> mask;                      // head average of cross_masks
};

template <class S>
class QueryTransformer {
 public:
  QueryTransformer() = default;

  QueryTransformer(ParamStore<S>& store, const std::string& name, QueryTransformerConfig cfg)
      : cfg_(cfg) {
    if (cfg.num_queries < 1 || cfg.layers < 1 || cfg.heads < 1 || cfg.dim % cfg.heads != 0) {
      throw ConfigError("query transformer needs Nq >= 1, L >= 1 and dim divisible by heads");
    }
    auto rng = store.rng_for(name + ".queries");
    queries_ = store.add(name + ".queries",
                         normal_init<S>(Shape{cfg.num_queries, cfg.dim}, cfg.init_std, rng));
    norm_in_ = LayerNorm<S>(store, name + ".norm_in", cfg.input_dim);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = name + ".layer" + std::to_string(l);
      Layer layer;
      layer.norm_cross = LayerNorm<S>(store, p + ".norm_cross", cfg.dim);
      layer.cq = Linear<S>(store, p + ".cross_q", cfg.dim, cfg.dim, false);
      layer.ck = Linear<S>(store, p + ".cross_k", cfg.input_dim, cfg.dim, false);
      layer.cv = Linear<S>(store, p + ".cross_v", cfg.input_dim, cfg.dim, false);
      layer.co = Linear<S>(store, p + ".cross_o", cfg.dim, cfg.dim);
      layer.norm_self = LayerNorm<S>(store, p + ".norm_self", cfg.dim);
      layer.sq = Linear<S>(store, p + ".self_q", cfg.dim, cfg.dim, false);
      layer.sk = Linear<S>(store, p + ".self_k", cfg.dim, cfg.dim, false);
      layer.sv = Linear<S>(store, p + ".self_v", cfg.dim, cfg.dim, false);
      layer.so = Linear<S>(store, p + ".self_o", cfg.dim, cfg.dim);
      layer.norm_ff = LayerNorm<S>(store, p + ".norm_ff", cfg.dim);
      layer.ff = Mlp<S>(store, p + ".ff", cfg.dim, cfg.ff_hidden, cfg.activation);
      layers_.push_back(layer);
    }
  }

  const QueryTransformerConfig& config() const { return cfg_; }

  QueryTransformerOutput<S> operator()(const Var<S>& inputs) const {
    if (inputs.dims().size() != 2 || inputs.dims()[1] != cfg_.input_dim) {
      throw ShapeError("query transformer expects [M x " + std::to_string(cfg_.input_dim) +
                       "] inputs, got " + shape_str(inputs.dims()));
    }
    auto x = norm_in_(inputs);
    Var<S> q = queries_;
    QueryTransformerOutput<S> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      auto qn = L.norm_cross(q);
      auto cross = multihead_attention(L.cq(qn), L.ck(x), L.cv(x), cfg_.heads);
      q = add(q, L.co(cross.output));
      auto sn = L.norm_self(q);
      auto self = multihead_attention(L.sq(sn), L.sk(sn), L.sv(sn), cfg_.heads);
      q = add(q, L.so(self.output));
      q = add(q, L.ff(L.norm_ff(q)));
      if (l + 1 == layers_.size()) {
        for (auto& w : cross.weights) out.cross_masks.push_back(transpose(w));
      }
    }
    out.tokens = q;
    Var<S> acc = out.cross_masks.front();
    for (std::size_t h = 1; h < out.cross_masks.size(); ++h) acc = add(acc, out.cross_masks[h]);
    out.mask = scale(acc, S(1) / S(out.cross_masks.size()));
    return out;
  }

 private:
  struct Layer {
    LayerNorm<S> norm_cross;
    Linear<S> cq, ck, cv, co;
    LayerNorm<S> norm_self;
    Linear<S> sq, sk, sv, so;
    LayerNorm<S> norm_ff;
    Mlp<S> ff;
  };

  QueryTransformerConfig cfg_;
  Var<S> queries_;
  LayerNorm<S> norm_in_;
  std::vector<Layer> layers_;
};

template <class S>
class QueryAggregator final : public Aggregator<S> {
 public:
  QueryAggregator(ParamStore<S>& store, const std::string& name, QueryTransformerConfig cfg)
      : qt_(store, name, cfg) {}

  Aggregate<S> aggregate(const Var<S>& inputs) const override {
    auto out = qt_(inputs);
    return {out.tokens, out.mask};
  }
  std::size_t num_outputs() const override { return qt_.config().num_queries; }
  MaskNorm mask_norm() const override { return MaskNorm::kOverInputs; }

  const QueryTransformer<S>& transformer() const { return qt_; }

 private:
  QueryTransformer<S> qt_;
};

}  // namespace sfsl
