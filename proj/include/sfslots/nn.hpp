#pragma once

// Named parameter storage and the small layers everything else is built from.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sfslots/autograd.hpp"
#include "sfslots/errors.hpp"
#include "sfslots/rng.hpp"

namespace sfsl {

// Insertion-ordered set of named, learnable tensors.
template <class S>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Var<S> add(const std::string& name, Tensor<S> init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.emplace_back(name, Var<S>::parameter(std::move(init)));
    return params_.back().second;
  }

  // Per-parameter generator; depends only on (store seed, name).
  Rng rng_for(std::string_view name) const { return Rng(derive_seed(seed_, name)); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Var<S> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return params_[it->second].second;
  }

  std::size_t size() const { return params_.size(); }
  const std::vector<std::pair<std::string, Var<S>>>& entries() const { return params_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : params_) out.push_back(n);
    return out;
  }

  // Parameters whose name starts with any of the prefixes, in store order.
  std::vector<std::pair<std::string, Var<S>>> select(const std::vector<std::string>& prefixes) const {
    std::vector<std::pair<std::string, Var<S>>> out;
    for (const auto& e : params_) {
      for (const auto& p : prefixes) {
        if (e.first.rfind(p, 0) == 0) {
          out.push_back(e);
          break;
        }
      }
    }
    return out;
  }

  std::map<std::string, Tensor<S>> snapshot() const {
    std::map<std::string, Tensor<S>> out;
    for (const auto& [n, v] : params_) out.emplace(n, v.value());
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& [n, v] : params_) v.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& [n, v] : params_) v.zero_grad();
  }

 private:
  std::uint64_t seed_;
  std::vector<std::pair<std::string, Var<S>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class S>
Tensor<S> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / double(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Tensor<S> t(Shape{fan_in, fan_out});
  for (auto& v : t.data()) v = S(u(rng));
  return t;
}

template <class S>
Tensor<S> normal_init(Shape dims, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor<S> t(std::move(dims));
  for (auto& v : t.data()) v = S(n(rng));
  return t;
}

enum class Activation { kGeluSigmoid, kRelu };

inline std::string activation_name(Activation a) {
  return a == Activation::kRelu ? "relu" : "gelu-like";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "gelu-like") return Activation::kGeluSigmoid;
  if (s == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + s + "' (expected gelu-like or relu)");
}

template <class S>
Var<S> activate(const Var<S>& x, Activation a) {
  return a == Activation::kRelu ? relu(x) : gelu_sigmoid(x);
}

template <class S>
struct Linear {
  Var<S> weight;  // [in x out]
  Var<S> bias;    // [out], empty when bias-free

  Linear() = default;
  Linear(ParamStore<S>& store, const std::string& name, std::size_t in, std::size_t out,
         bool with_bias = true) {
    auto rng = store.rng_for(name + ".w");
    weight = store.add(name + ".w", xavier_uniform<S>(in, out, rng));
    if (with_bias) bias = store.add(name + ".b", Tensor<S>::zeros(Shape{out}));
  }

  Var<S> operator()(const Var<S>& x) const {
    auto y = matmul(x, weight);
    return bias ? add_rowvec(y, bias) : y;
  }
};

template <class S>
struct LayerNorm {
  Var<S> gain;
  Var<S> bias;

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& store, const std::string& name, std::size_t dim) {
    gain = store.add(name + ".g", Tensor<S>::ones(Shape{dim}));
    bias = store.add(name + ".b", Tensor<S>::zeros(Shape{dim}));
  }

  Var<S> operator()(const Var<S>& x) const { return layer_norm(x, gain, bias); }
};

// Gated recurrent update over row-vectors: x and h are [N x D].
template <class S>
struct GruParams {
  Var<S> wz, wr, wh;  // input weights  [D x D]
  Var<S> uz, ur, uh;  // hidden weights [D x D]
  Var<S> bz, br, bh;  // [D]

  GruParams() = default;
  GruParams(ParamStore<S>& store, const std::string& name, std::size_t dim) {
    auto mk = [&](const char* n) {
      auto rng = store.rng_for(name + "." + n);
      return store.add(name + "." + n, xavier_uniform<S>(dim, dim, rng));
    };
    wz = mk("wz");
    wr = mk("wr");
    wh = mk("wh");
    uz = mk("uz");
    ur = mk("ur");
    uh = mk("uh");
    bz = store.add(name + ".bz", Tensor<S>::zeros(Shape{dim}));
    br = store.add(name + ".br", Tensor<S>::zeros(Shape{dim}));
    bh = store.add(name + ".bh", Tensor<S>::zeros(Shape{dim}));
  }
};

// z = s(x Wz + h Uz + bz); r = s(x Wr + h Ur + br);
// c = tanh(x Wh + (r*h) Uh + bh); h' = (1 - z) * h + z * c.
template <class S>
Var<S> gru_step(const Var<S>& h, const Var<S>& x, const GruParams<S>& p) {
  if (h.dims() != x.dims()) {
    throw ShapeError("gru_step: h " + shape_str(h.dims()) + " vs x " + shape_str(x.dims()));
  }
  auto z = sigmoid(add_rowvec(add(matmul(x, p.wz), matmul(h, p.uz)), p.bz));
  auto r = sigmoid(add_rowvec(add(matmul(x, p.wr), matmul(h, p.ur)), p.br));
  auto c = tanh(add_rowvec(add(matmul(x, p.wh), matmul(mul(r, h), p.uh)), p.bh));
  // (1 - z) * h + z * c  ==  h + z * (c - h)
  return add(h, mul(z, sub(c, h)));
}

template <class S>
struct Mlp {
  Linear<S> fc1;
  Linear<S> fc2;
  Activation act = Activation::kGeluSigmoid;

  Mlp() = default;
  Mlp(ParamStore<S>& store, const std::string& name, std::size_t dim, std::size_t hidden,
      Activation a)
      : fc1(store, name + ".fc1", dim, hidden), fc2(store, name + ".fc2", hidden, dim), act(a) {}

  Var<S> operator()(const Var<S>& x) const { return fc2(activate(fc1(x), act)); }
};

}  // namespace sfsl
