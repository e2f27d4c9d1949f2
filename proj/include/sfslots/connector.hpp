#pragma once

// The two-branch slot connector.
//
// Slow branch: a few uniformly sampled frames at full spatial resolution,
// one aggregator call per frame, a learned per-frame embedding added to the
// resulting slots, then S-Proj. Fast branch: every frame at pooled spatial
// resolution, a learned per-frame embedding added to the pooled tokens, one
// aggregator call per spatial position over time, then F-Proj. The two
// token sets are concatenated (slow first) and mapped by Proj.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "sfslots/aggregator.hpp"
#include "sfslots/query_transformer.hpp"
#include "sfslots/slot_attention.hpp"

namespace sfsl {

struct SFSlotsConfig {
  std::size_t height = 16;           // spatial token grid
  std::size_t width = 16;
  std::size_t feature_dim = 32;      // input feature width
  std::size_t slow_frames = 8;       // frames sampled for the slow branch
  std::size_t pool_stride = 4;       // fast-branch spatial pooling
  std::size_t slow_slots = 8;        // slots per sampled frame
  std::size_t fast_slots = 8;        // slots per pooled position
  std::size_t slot_dim = 64;
  std::size_t out_dim = 256;
  std::size_t max_frames = 256;      // capacity of the fast temporal table
  std::size_t slow_iters = 3;
  std::size_t fast_iters = 3;
  Activation activation = Activation::kGeluSigmoid;
  std::size_t qformer_layers = 2;
  std::size_t qformer_heads = 4;

  std::size_t pooled_height() const { return height / pool_stride; }
  std::size_t pooled_width() const { return width / pool_stride; }
  std::size_t pooled_positions() const { return pooled_height() * pooled_width(); }
  std::size_t slow_token_count() const { return slow_frames * slow_slots; }
  std::size_t fast_token_count() const { return pooled_positions() * fast_slots; }
  std::size_t token_count() const { return slow_token_count() + fast_token_count(); }

  void validate() const {
    if (height == 0 || width == 0 || feature_dim == 0 || slot_dim == 0 || out_dim == 0)
      throw ConfigError("connector dims must be positive");
    if (pool_stride == 0 || height % pool_stride || width % pool_stride)
      throw ConfigError("pool_stride " + std::to_string(pool_stride) + " must divide the " +
                        std::to_string(height) + "x" + std::to_string(width) + " grid");
    if (slow_frames == 0 || slow_slots == 0 || fast_slots == 0)
      throw ConfigError("slot counts and slow_frames must be >= 1");
    if (slow_frames > max_frames)
      throw ConfigError("slow_frames exceeds max_frames");
    if (slow_iters == 0 || fast_iters == 0) throw ConfigError("iteration counts must be >= 1");
    if (qformer_heads == 0 || slot_dim % qformer_heads)
      throw ConfigError("slot_dim must be divisible by qformer_heads");
  }
};

// Dense [T x H x W x D] feature grid sampled at one frame per second.
template <class S>
struct VideoFeatures {
  Tensor<S> grid;
  double fps = 1.0;

  std::size_t frames() const { return grid.dim(0); }
  std::size_t height() const { return grid.dim(1); }
  std::size_t width() const { return grid.dim(2); }
  std::size_t feature_dim() const { return grid.dim(3); }
};

enum class Branch { kSlow, kFast };

struct TokenProvenance {
  Branch branch;
  std::size_t source;  // sampled-frame index (slow) or pooled position (fast)
  std::size_t slot;

  friend bool operator==(const TokenProvenance&, const TokenProvenance&) = default;
};

template <class S>
struct BranchOutput {
  Var<S> tokens;                 // [count x slot_dim], after S-Proj / F-Proj
  std::vector<Var<S>> masks;     // one per frame (slow) or position (fast)
  std::vector<TokenProvenance> provenance;
  MaskLayout layout;
};

template <class S>
struct SlotTokens {
  Var<S> tokens;  // [N x out_dim]
  std::vector<TokenProvenance> provenance;
  std::vector<AttentionMask> slow_masks;
  std::vector<AttentionMask> fast_masks;
  std::vector<std::size_t> sampled_frames;
};

// floor((i + 0.5) * T / t_d) for i in [0, t_d).
inline std::vector<std::size_t> uniform_sample_frames(std::size_t total, std::size_t count) {
  if (count == 0 || count > total) {
    throw ConfigError("cannot sample " + std::to_string(count) + " frames from " +
                      std::to_string(total));
  }
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) {
    idx[i] = static_cast<std::size_t>(
        std::floor((static_cast<double>(i) + 0.5) * static_cast<double>(total) /
                   static_cast<double>(count)));
  }
  return idx;
}

// Per-frame stride pooling of a [T*H*W x D] video: returns [T*M_d x D],
// frame-major, positions row-major within a frame.
template <class S>
Var<S> pool_video(const Var<S>& flat, std::size_t frames, std::size_t height, std::size_t width,
                  std::size_t stride) {
  const std::size_t hw = height * width, d = flat.value().cols();
  std::vector<Var<S>> pooled;
  pooled.reserve(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    auto frame = reshape(slice_rows(flat, t * hw, (t + 1) * hw), Shape{height, width, d});
    auto p = avg_pool_grid(frame, stride);
    pooled.push_back(reshape(p, Shape{p.value().dims()[0] * p.value().dims()[1], d}));
  }
  return concat_rows(pooled);
}

enum class ConnectorKind { kSlots, kQueryTransformer, kPooling };

inline std::string connector_kind_name(ConnectorKind k) {
  switch (k) {
    case ConnectorKind::kSlots: return "slots";
    case ConnectorKind::kQueryTransformer: return "query-transformer";
    case ConnectorKind::kPooling: return "pooling";
  }
  return "?";
}

inline ConnectorKind parse_connector_kind(const std::string& s) {
  if (s == "slots") return ConnectorKind::kSlots;
  if (s == "query-transformer") return ConnectorKind::kQueryTransformer;
  if (s == "pooling") return ConnectorKind::kPooling;
  throw ConfigError("unknown connector '" + s + "' (expected slots, query-transformer, pooling)");
}

enum class BranchSet { kSlow, kFast, kBoth };

inline std::string branch_set_name(BranchSet b) {
  switch (b) {
    case BranchSet::kSlow: return "slow";
    case BranchSet::kFast: return "fast";
    case BranchSet::kBoth: return "both";
  }
  return "?";
}

inline BranchSet parse_branch_set(const std::string& s) {
  if (s == "slow") return BranchSet::kSlow;
  if (s == "fast") return BranchSet::kFast;
  if (s == "both") return BranchSet::kBoth;
  throw ConfigError("unknown branch '" + s + "' (expected slow, fast, both)");
}

inline bool has_slow(BranchSet b) { return b != BranchSet::kFast; }
inline bool has_fast(BranchSet b) { return b != BranchSet::kSlow; }

// Parameter-name prefix of a branch's aggregator.
inline std::string aggregator_prefix(Branch b, ConnectorKind kind) {
  const std::string branch = b == Branch::kSlow ? "slow" : "fast";
  return branch + (kind == ConnectorKind::kQueryTransformer ? ".qf" : ".sa");
}

template <class S>
class SFSlotsModel {
 public:
  // kind selects the aggregator (slots or query-transformer); `branches`
  // selects which of the two paths exist.
  SFSlotsModel(ParamStore<S>& store, SFSlotsConfig cfg,
               ConnectorKind kind = ConnectorKind::kSlots, BranchSet branches = BranchSet::kBoth)
      : cfg_(cfg), kind_(kind), branches_(branches) {
    cfg_.validate();
    if (kind == ConnectorKind::kPooling) {
      throw ConfigError("SFSlotsModel wraps slots or query-transformer aggregators only");
    }
    if (has_slow(branches_)) {
      slow_agg_ = make_aggregator(store, Branch::kSlow);
      auto rng = store.rng_for("slow.pos");
      slow_pos_ = store.add("slow.pos",
                            normal_init<S>(Shape{cfg_.slow_frames, cfg_.slot_dim}, 0.02, rng));
      slow_proj_ = Linear<S>(store, "slow.proj", cfg_.slot_dim, cfg_.slot_dim);
    }
    if (has_fast(branches_)) {
      fast_agg_ = make_aggregator(store, Branch::kFast);
      // Zero start: a position with no temporal change gives identical tokens.
      fast_pos_ = store.add("fast.pos", Tensor<S>::zeros(Shape{cfg_.max_frames, cfg_.feature_dim}));
      fast_proj_ = Linear<S>(store, "fast.proj", cfg_.slot_dim, cfg_.slot_dim);
    }
    proj_ = Linear<S>(store, "proj", cfg_.slot_dim, cfg_.out_dim);
  }

  const SFSlotsConfig& config() const { return cfg_; }
  ConnectorKind kind() const { return kind_; }
  BranchSet branches() const { return branches_; }
  const Aggregator<S>& slow_aggregator() const { return *slow_agg_; }
  const Aggregator<S>& fast_aggregator() const { return *fast_agg_; }
  const Var<S>& fast_pos() const { return fast_pos_; }

  std::size_t token_count() const {
    return (has_slow(branches_) ? cfg_.slow_token_count() : 0) +
           (has_fast(branches_) ? cfg_.fast_token_count() : 0);
  }

  // Flattens a video grid into a constant [T*H*W x D] input.
  static Var<S> flatten(const VideoFeatures<S>& v) {
    return Var<S>::constant(v.grid.reshaped(Shape{v.grid.size() / v.feature_dim(), v.feature_dim()}));
  }

  BranchOutput<S> slow_branch(const VideoFeatures<S>& v) const { return slow_branch(flatten(v), v.frames()); }
  BranchOutput<S> fast_branch(const VideoFeatures<S>& v) const { return fast_branch(flatten(v), v.frames()); }
  SlotTokens<S> connect(const VideoFeatures<S>& v) const { return connect(flatten(v), v.frames()); }

  BranchOutput<S> slow_branch(const Var<S>& flat, std::size_t frames) const {
    require_branch(Branch::kSlow);
    check_input(flat, frames);
    const std::size_t hw = cfg_.height * cfg_.width;
    const auto sampled = uniform_sample_frames(frames, cfg_.slow_frames);
    BranchOutput<S> out;
    out.layout = {LayoutKind::kSpatial, cfg_.height, cfg_.width};
    std::vector<Var<S>> per_frame;
    for (std::size_t i = 0; i < sampled.size(); ++i) {
      auto agg = slow_agg_->aggregate(slice_rows(flat, sampled[i] * hw, (sampled[i] + 1) * hw));
      per_frame.push_back(add_rowvec(agg.tokens, slice_rows(slow_pos_, i, i + 1)));
      out.masks.push_back(agg.mask);
      for (std::size_t j = 0; j < cfg_.slow_slots; ++j) out.provenance.push_back({Branch::kSlow, i, j});
    }
    out.tokens = slow_proj_(concat_rows(per_frame));
    return out;
  }

  BranchOutput<S> fast_branch(const Var<S>& flat, std::size_t frames) const {
    require_branch(Branch::kFast);
    check_input(flat, frames);
    if (frames > cfg_.max_frames) {
      throw ConfigError("video has " + std::to_string(frames) + " frames, temporal table holds " +
                        std::to_string(cfg_.max_frames));
    }
    const std::size_t md = cfg_.pooled_positions();
    auto tokens = fast_inputs(pool_video(flat, frames, cfg_.height, cfg_.width, cfg_.pool_stride), frames);

    BranchOutput<S> out;
    out.layout = {LayoutKind::kTemporal, 1, frames};
    std::vector<Var<S>> per_position;
    for (std::size_t k = 0; k < md; ++k) {
      auto agg = fast_agg_->aggregate(gather_rows(tokens, position_rows(frames, k)));
      per_position.push_back(agg.tokens);
      out.masks.push_back(agg.mask);
      for (std::size_t j = 0; j < cfg_.fast_slots; ++j) out.provenance.push_back({Branch::kFast, k, j});
    }
    out.tokens = fast_proj_(concat_rows(per_position));
    return out;
  }

  // Pooled [T*M_d x D] tokens plus the temporal embedding of their frame.
  Var<S> fast_inputs(const Var<S>& pooled, std::size_t frames) const {
    require_branch(Branch::kFast);
    const std::size_t md = cfg_.pooled_positions();
    if (frames > cfg_.max_frames) {
      throw ConfigError("video has " + std::to_string(frames) + " frames, temporal table holds " +
                        std::to_string(cfg_.max_frames));
    }
    std::vector<std::size_t> frame_of_row(frames * md);
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t k = 0; k < md; ++k) frame_of_row[t * md + k] = t;
    return add(pooled, gather_rows(fast_pos_, frame_of_row));
  }

  // Row indices of pooled position k in a [T*M_d x D] fast input.
  std::vector<std::size_t> position_rows(std::size_t frames, std::size_t k) const {
    std::vector<std::size_t> rows(frames);
    for (std::size_t t = 0; t < frames; ++t) rows[t] = t * cfg_.pooled_positions() + k;
    return rows;
  }

  SlotTokens<S> connect(const Var<S>& flat, std::size_t frames) const {
    SlotTokens<S> res;
    std::vector<Var<S>> parts;
    if (has_slow(branches_)) {
      auto slow = slow_branch(flat, frames);
      parts.push_back(slow.tokens);
      res.provenance = slow.provenance;
      for (const auto& m : slow.masks) res.slow_masks.push_back(to_mask(m, slow.layout));
      res.sampled_frames = uniform_sample_frames(frames, cfg_.slow_frames);
    }
    if (has_fast(branches_)) {
      auto fast = fast_branch(flat, frames);
      parts.push_back(fast.tokens);
      res.provenance.insert(res.provenance.end(), fast.provenance.begin(), fast.provenance.end());
      for (const auto& m : fast.masks) res.fast_masks.push_back(to_mask(m, fast.layout));
    }
    res.tokens = proj_(parts.size() == 1 ? parts.front() : concat_rows(parts));
    return res;
  }

  static AttentionMask to_mask(const Var<S>& m, MaskLayout layout) {
    return {m.value().template cast<float>(), layout};
  }

 private:
  std::unique_ptr<Aggregator<S>> make_aggregator(ParamStore<S>& store, Branch b) {
    const bool slow = b == Branch::kSlow;
    const std::size_t in = cfg_.feature_dim;
    const std::size_t n = slow ? cfg_.slow_slots : cfg_.fast_slots;
    const std::string prefix = aggregator_prefix(b, kind_);
    if (kind_ == ConnectorKind::kSlots) {
      SlotAttentionConfig sc;
      sc.num_slots = n;
      sc.iterations = slow ? cfg_.slow_iters : cfg_.fast_iters;
      sc.input_dim = in;
      sc.slot_dim = cfg_.slot_dim;
      sc.mlp_hidden = 2 * cfg_.slot_dim;
      sc.activation = cfg_.activation;
      return std::make_unique<SlotAggregator<S>>(store, prefix, sc);
    }
    QueryTransformerConfig qc;
    qc.num_queries = n;
    qc.input_dim = in;
    qc.dim = cfg_.slot_dim;
    qc.layers = cfg_.qformer_layers;
    qc.heads = cfg_.qformer_heads;
    qc.ff_hidden = 2 * cfg_.slot_dim;
    qc.activation = cfg_.activation;
    return std::make_unique<QueryAggregator<S>>(store, prefix, qc);
  }

  void require_branch(Branch b) const {
    if ((b == Branch::kSlow && !has_slow(branches_)) || (b == Branch::kFast && !has_fast(branches_)))
      throw ConfigError("connector was built without that branch");
  }

  void check_input(const Var<S>& flat, std::size_t frames) const {
    const std::size_t hw = cfg_.height * cfg_.width;
    if (flat.dims().size() != 2 || flat.dims()[1] != cfg_.feature_dim || frames == 0 ||
        flat.dims()[0] != frames * hw) {
      throw ShapeError("video input " + shape_str(flat.dims()) + " does not match a " +
                       std::to_string(frames) + "x" + std::to_string(cfg_.height) + "x" +
                       std::to_string(cfg_.width) + "x" + std::to_string(cfg_.feature_dim) + " grid");
    }
  }

  SFSlotsConfig cfg_;
  ConnectorKind kind_;
  BranchSet branches_;
  std::unique_ptr<Aggregator<S>> slow_agg_, fast_agg_;
  Var<S> slow_pos_, fast_pos_;
  Linear<S> slow_proj_, fast_proj_, proj_;
};

}  // namespace sfsl
