#pragma once

// Comparator connectors: semantic-agnostic spatial/temporal pooling, and the
// slow/fast wrappers that run the query transformer in place of slot
// attention.

#include <string>
#include <vector>

#include "sfslots/connector.hpp"
#include "sfslots/nn.hpp"

namespace sfsl {

// Spatial path: mean over the H*W grid of each frame (T tokens). Temporal
// path: mean over time of each grid cell (H*W tokens). Both are
// concatenated, spatial first, then mapped to out_dim.
template <class S>
class PoolingConnector {
 public:
  PoolingConnector(ParamStore<S>& store, std::size_t feature_dim, std::size_t out_dim)
      : feature_dim_(feature_dim), proj_(store, "pool.proj", feature_dim, out_dim) {}

  static std::size_t token_count(std::size_t frames, std::size_t height, std::size_t width) {
    return frames + height * width;
  }

  // Pre-projection pooled tokens, [(T + H*W) x D].
  Var<S> pool(const VideoFeatures<S>& v) const {
    if (v.feature_dim() != feature_dim_) throw ShapeError("pooling connector: feature width mismatch");
    const std::size_t t = v.frames(), hw = v.height() * v.width();
    auto flat = SFSlotsModel<S>::flatten(v);
    std::vector<Var<S>> spatial;
    spatial.reserve(t);
    Var<S> temporal;
    for (std::size_t f = 0; f < t; ++f) {
      auto frame = slice_rows(flat, f * hw, (f + 1) * hw);
      spatial.push_back(mean_rows(frame));
      temporal = f == 0 ? frame : add(temporal, frame);
    }
    spatial.push_back(scale(temporal, S(1) / S(t)));
    return concat_rows(spatial);
  }

  Var<S> operator()(const VideoFeatures<S>& v) const { return proj_(pool(v)); }

 private:
  std::size_t feature_dim_;
  Linear<S> proj_;
};

// Runs a query-transformer connector with the same sampling, pooling and
// projections as the slot connector; the model's branch set picks the
// slow analog, the fast analog or both.
template <class S>
SlotTokens<S> slowfast_wrap(const SFSlotsModel<S>& model, const VideoFeatures<S>& v) {
  if (model.kind() != ConnectorKind::kQueryTransformer) {
    throw ConfigError("slowfast_wrap expects a query-transformer connector");
  }
  return model.connect(v);
}

}  // namespace sfsl
