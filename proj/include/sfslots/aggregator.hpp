#pragma once

// Common face of the token aggregators a connector branch can be built on.

#include <memory>
#include <string>

#include "sfslots/autograd.hpp"
#include "sfslots/slot_attention.hpp"

namespace sfsl {

// Which axis the aggregator's mask is normalized over.
enum class MaskNorm {
  kOverSlots,   // rows (per input token) sum to 1
  kOverInputs,  // columns (per query) sum to 1
};

template <class S>
struct Aggregate {
  Var<S> tokens;  // [N x D_slot]
  Var<S> mask;    // [M x N], rows = inputs, cols = slots / queries
};

template <class S>
class Aggregator {
 public:
  virtual ~Aggregator() = default;
  virtual Aggregate<S> aggregate(const Var<S>& inputs) const = 0;
  virtual std::size_t num_outputs() const = 0;
  virtual MaskNorm mask_norm() const = 0;
};

template <class S>
class SlotAggregator final : public Aggregator<S> {
 public:
  SlotAggregator(ParamStore<S>& store, const std::string& name, SlotAttentionConfig cfg)
      : sa_(store, name, cfg) {}

  Aggregate<S> aggregate(const Var<S>& inputs) const override {
    auto out = sa_(inputs);
    return {out.slots, out.mask};
  }
  std::size_t num_outputs() const override { return sa_.config().num_slots; }
  MaskNorm mask_norm() const override { return MaskNorm::kOverSlots; }

  const SlotAttention<S>& slot_attention() const { return sa_; }

 private:
  SlotAttention<S> sa_;
};

}  // namespace sfsl
