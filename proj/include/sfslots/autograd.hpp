#pragma once

// Reverse-mode differentiation over Tensor values.
//
// A Var is a handle to a node in a dynamically recorded computation graph.
// Operations build new nodes that hold their parents and a backward rule;
// backward() walks the graph in reverse topological order. Leaf grads
// accumulate across backward() calls until zero_grad(); interior grads are
// recomputed on each call.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sfslots/errors.hpp"
#include "sfslots/tensor.hpp"

namespace sfsl {

namespace detail {
inline thread_local bool g_grad_enabled = true;
}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
  ~NoGradGuard() { detail::g_grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

template <class S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  Tensor<S>& ensure_grad() {
    if (grad.dims() != value.dims()) grad = Tensor<S>::zeros(value.dims());
    return grad;
  }
  bool is_leaf() const { return parents.empty(); }
};

template <class S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<S> value) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var parameter(Tensor<S> value) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->ensure_grad();
    return Var(std::move(n));
  }

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Tensor<S>& value() const { return node_->value; }
  Tensor<S>& mutable_value() { return node_->value; }
  const Tensor<S>& grad() const { return node_->ensure_grad(); }
  Tensor<S>& mutable_grad() { return node_->ensure_grad(); }
  const Shape& dims() const { return node_->value.dims(); }
  std::size_t size() const { return node_->value.size(); }
  S item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar " + shape_str(dims()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) node_->ensure_grad();
  }
  void zero_grad() { node_->ensure_grad().fill(S(0)); }

  const std::shared_ptr<Node<S>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

using VarF = Var<float>;
using VarD = Var<double>;

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using CMap = Eigen::Map<const RowMat<S>>;
template <class S>
using MMap = Eigen::Map<RowMat<S>>;

template <class S>
CMap<S> cmap(const Tensor<S>& t, std::size_t r, std::size_t c) {
  return CMap<S>(t.data().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class S>
MMap<S> mmap(Tensor<S>& t, std::size_t r, std::size_t c) {
  return MMap<S>(t.data().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <class S>
void check_finite(const Tensor<S>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
}

template <class S>
Var<S> make_result(Tensor<S> value, std::vector<Var<S>> parents,
                   std::function<void(Node<S>&)> fn, const char* op) {
  check_finite(value, op);
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any && grad_enabled()) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(fn);
  }
  return Var<S>(std::move(n));
}

// Grad buffer of parent i if it wants one, else nullptr.
template <class S>
Tensor<S>* pgrad(Node<S>& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}

template <class S>
const Tensor<S>& pval(const Node<S>& self, std::size_t i) {
  return self.parents[i]->value;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

template <class S>
void require_2d(const Var<S>& x, const char* op) {
  require(x.dims().size() == 2, std::string(op) + ": expected rank-2 input, got " +
                                    shape_str(x.dims()));
}

template <class S>
S sigmoid_scalar(S x) {
  return x >= 0 ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

template <class S>
void backward(const Var<S>& root) {
  if (root.size() != 1) {
    throw ShapeError("backward() needs a scalar root, got " + shape_str(root.dims()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<S>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node<S>* n : order) {
    if (!n->is_leaf()) n->ensure_grad().fill(S(0));
  }
  root.node()->ensure_grad()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (!n->is_leaf() && n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// linear algebra

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.dims()[0], k = a.dims()[1], n = b.dims()[1];
  detail::require(b.dims()[0] == k, "matmul: inner dims differ, " + shape_str(a.dims()) +
                                        " x " + shape_str(b.dims()));
  Tensor<S> out(Shape{m, n});
  detail::mmap(out, m, n).noalias() = detail::cmap(a.value(), m, k) * detail::cmap(b.value(), k, n);
  return detail::make_result<S>(
      std::move(out), {a, b},
      [m, k, n](Node<S>& self) {
        auto g = detail::cmap(self.grad, m, n);
        if (auto* ga = detail::pgrad(self, 0))
          detail::mmap(*ga, m, k).noalias() += g * detail::cmap(detail::pval(self, 1), k, n).transpose();
        if (auto* gb = detail::pgrad(self, 1))
          detail::mmap(*gb, k, n).noalias() += detail::cmap(detail::pval(self, 0), m, k).transpose() * g;
      },
      "matmul");
}

// a * b^T without materializing the transpose.
template <class S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  const std::size_t m = a.dims()[0], k = a.dims()[1], n = b.dims()[0];
  detail::require(b.dims()[1] == k, "matmul_nt: inner dims differ, " + shape_str(a.dims()) +
                                        " x " + shape_str(b.dims()) + "^T");
  Tensor<S> out(Shape{m, n});
  detail::mmap(out, m, n).noalias() =
      detail::cmap(a.value(), m, k) * detail::cmap(b.value(), n, k).transpose();
  return detail::make_result<S>(
      std::move(out), {a, b},
      [m, k, n](Node<S>& self) {
        auto g = detail::cmap(self.grad, m, n);
        if (auto* ga = detail::pgrad(self, 0))
          detail::mmap(*ga, m, k).noalias() += g * detail::cmap(detail::pval(self, 1), n, k);
        if (auto* gb = detail::pgrad(self, 1))
          detail::mmap(*gb, n, k).noalias() += g.transpose() * detail::cmap(detail::pval(self, 0), m, k);
      },
      "matmul_nt");
}

// a^T * b.
template <class S>
Var<S> matmul_tn(const Var<S>& a, const Var<S>& b) {
  detail::require_2d(a, "matmul_tn");
  detail::require_2d(b, "matmul_tn");
  const std::size_t k = a.dims()[0], m = a.dims()[1], n = b.dims()[1];
  detail::require(b.dims()[0] == k, "matmul_tn: inner dims differ, " + shape_str(a.dims()) +
                                        "^T x " + shape_str(b.dims()));
  Tensor<S> out(Shape{m, n});
  detail::mmap(out, m, n).noalias() =
      detail::cmap(a.value(), k, m).transpose() * detail::cmap(b.value(), k, n);
  return detail::make_result<S>(
      std::move(out), {a, b},
      [m, k, n](Node<S>& self) {
        auto g = detail::cmap(self.grad, m, n);
        if (auto* ga = detail::pgrad(self, 0))
          detail::mmap(*ga, k, m).noalias() += detail::cmap(detail::pval(self, 1), k, n) * g.transpose();
        if (auto* gb = detail::pgrad(self, 1))
          detail::mmap(*gb, k, n).noalias() += detail::cmap(detail::pval(self, 0), k, m) * g;
      },
      "matmul_tn");
}

template <class S>
Var<S> transpose(const Var<S>& a) {
  detail::require_2d(a, "transpose");
  const std::size_t r = a.dims()[0], c = a.dims()[1];
  Tensor<S> out(Shape{c, r});
  detail::mmap(out, c, r) = detail::cmap(a.value(), r, c).transpose();
  return detail::make_result<S>(
      std::move(out), {a},
      [r, c](Node<S>& self) {
        if (auto* ga = detail::pgrad(self, 0))
          detail::mmap(*ga, r, c) += detail::cmap(self.grad, c, r).transpose();
      },
      "transpose");
}

// ---------------------------------------------------------------------------
// elementwise

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::require(a.dims() == b.dims(),
                  "add: shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_result<S>(
      std::move(out), {a, b},
      [](Node<S>& self) {
        for (std::size_t p = 0; p < 2; ++p)
          if (auto* g = detail::pgrad(self, p))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      },
      "add");
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  detail::require(a.dims() == b.dims(),
                  "sub: shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_result<S>(
      std::move(out), {a, b},
      [](Node<S>& self) {
        if (auto* g = detail::pgrad(self, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = detail::pgrad(self, 1))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
      },
      "sub");
}

// Hadamard product.
template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::require(a.dims() == b.dims(),
                  "mul: shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_result<S>(
      std::move(out), {a, b},
      [](Node<S>& self) {
        const auto& av = detail::pval(self, 0);
        const auto& bv = detail::pval(self, 1);
        if (auto* g = detail::pgrad(self, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
        if (auto* g = detail::pgrad(self, 1))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
      },
      "mul");
}

template <class S>
Var<S> scale(const Var<S>& a, S s) {
  Tensor<S> out = a.value();
  for (auto& v : out.data()) v *= s;
  return detail::make_result<S>(
      std::move(out), {a},
      [s](Node<S>& self) {
        if (auto* g = detail::pgrad(self, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
      },
      "scale");
}

template <class S>
Var<S> add_scalar(const Var<S>& a, S s) {
  Tensor<S> out = a.value();
  for (auto& v : out.data()) v += s;
  return detail::make_result<S>(
      std::move(out), {a},
      [](Node<S>& self) {
        if (auto* g = detail::pgrad(self, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      },
      "add_scalar");
}

template <class S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
  return add(a, b);
}
template <class S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) {
  return sub(a, b);
}

namespace detail {

// Broadcast of a length-C vector over the rows of an [R x C] view.
enum class RowOp { kAdd, kMul, kDiv };

template <class S>
Var<S> rowvec_op(const Var<S>& a, const Var<S>& b, RowOp op, const char* name) {
  const std::size_t c = a.value().cols();
  require(b.size() == c, std::string(name) + ": vector of size " + std::to_string(b.size()) +
                             " cannot broadcast over " + shape_str(a.dims()));
  const std::size_t r = a.value().rows();
  Tensor<S> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < r; ++i) {
    S* row = out.data().data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      switch (op) {
        case RowOp::kAdd: row[j] += bv[j]; break;
        case RowOp::kMul: row[j] *= bv[j]; break;
        case RowOp::kDiv: row[j] /= bv[j]; break;
      }
    }
  }
  return make_result<S>(
      std::move(out), {a, b},
      [r, c, op](Node<S>& self) {
        const auto& av = pval(self, 0);
        const auto& bv = pval(self, 1);
        const auto& g = self.grad;
        if (auto* ga = pgrad(self, 0)) {
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              const std::size_t idx = i * c + j;
              switch (op) {
                case RowOp::kAdd: (*ga)[idx] += g[idx]; break;
                case RowOp::kMul: (*ga)[idx] += g[idx] * bv[j]; break;
                case RowOp::kDiv: (*ga)[idx] += g[idx] / bv[j]; break;
              }
            }
        }
        if (auto* gb = pgrad(self, 1)) {
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              const std::size_t idx = i * c + j;
              switch (op) {
                case RowOp::kAdd: (*gb)[j] += g[idx]; break;
                case RowOp::kMul: (*gb)[j] += g[idx] * av[idx]; break;
                case RowOp::kDiv: (*gb)[j] -= g[idx] * av[idx] / (bv[j] * bv[j]); break;
              }
            }
        }
      },
      name);
}

template <class S, class F, class DF>
Var<S> unary(const Var<S>& a, F f, DF df, const char* name) {
  Tensor<S> out = a.value();
  for (auto& v : out.data()) v = f(v);
  return make_result<S>(
      std::move(out), {a},
      [df](Node<S>& self) {
        if (auto* g = pgrad(self, 0)) {
          const auto& x = pval(self, 0);
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * df(x[i], self.value[i]);
        }
      },
      name);
}

}  // namespace detail

// a[r, c] + b[c] for every row r (any rank, broadcasting over the last axis).
template <class S>
Var<S> add_rowvec(const Var<S>& a, const Var<S>& b) {
  return detail::rowvec_op(a, b, detail::RowOp::kAdd, "add_rowvec");
}
template <class S>
Var<S> mul_rowvec(const Var<S>& a, const Var<S>& b) {
  return detail::rowvec_op(a, b, detail::RowOp::kMul, "mul_rowvec");
}
template <class S>
Var<S> div_rowvec(const Var<S>& a, const Var<S>& b) {
  return detail::rowvec_op(a, b, detail::RowOp::kDiv, "div_rowvec");
}

template <class S>
Var<S> sigmoid(const Var<S>& a) {
  return detail::unary(
      a, [](S x) { return detail::sigmoid_scalar(x); }, [](S, S y) { return y * (S(1) - y); },
      "sigmoid");
}

template <class S>
Var<S> tanh(const Var<S>& a) {
  return detail::unary(
      a, [](S x) { return std::tanh(x); }, [](S, S y) { return S(1) - y * y; }, "tanh");
}

template <class S>
Var<S> relu(const Var<S>& a) {
  return detail::unary(
      a, [](S x) { return x > 0 ? x : S(0); }, [](S x, S) { return x > 0 ? S(1) : S(0); },
      "relu");
}

// x * sigmoid(1.702 x), the sigmoid form of GELU.
template <class S>
Var<S> gelu_sigmoid(const Var<S>& a) {
  constexpr S k = S(1.702);
  return detail::unary(
      a, [](S x) { return x * detail::sigmoid_scalar(k * x); },
      [](S x, S) {
        const S s = detail::sigmoid_scalar(k * x);
        return s + k * x * s * (S(1) - s);
      },
      "gelu_sigmoid");
}

// ---------------------------------------------------------------------------
// reductions and normalizations

template <class S>
Var<S> softmax_axis(const Var<S>& x, std::size_t axis) {
  const auto& dims = x.dims();
  detail::require(axis < dims.size(), "softmax_axis: axis " + std::to_string(axis) +
                                          " out of range for " + shape_str(dims));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= dims[i];
  for (std::size_t i = axis + 1; i < dims.size(); ++i) inner *= dims[i];
  const std::size_t len = dims[axis];
  detail::check_finite(x.value(), "softmax_axis input");

  Tensor<S> out(dims);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      S mx = xv[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
      S sum = 0;
      for (std::size_t l = 0; l < len; ++l) {
        const S e = std::exp(xv[base + l * inner] - mx);
        out[base + l * inner] = e;
        sum += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= sum;
    }
  }
  return detail::make_result<S>(
      std::move(out), {x},
      [outer, inner, len](Node<S>& self) {
        auto* gx = detail::pgrad(self, 0);
        if (!gx) return;
        const auto& y = self.value;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            S dot = 0;
            for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * y[base + l * inner];
            for (std::size_t l = 0; l < len; ++l) {
              const std::size_t i = base + l * inner;
              (*gx)[i] += y[i] * (g[i] - dot);
            }
          }
      },
      "softmax_axis");
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-row normalization over the last axis followed by an affine map.
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias,
                  S eps = S(kLayerNormEps)) {
  const std::size_t c = x.value().cols();
  detail::require(gain.size() == c && bias.size() == c,
                  "layer_norm: gain/bias size does not match last dim of " + shape_str(x.dims()));
  const std::size_t r = x.value().rows();
  Tensor<S> out(x.dims());
  std::vector<S> xhat(x.size());
  std::vector<S> inv_std(r);
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < r; ++i) {
    const S* row = xv.data().data() + i * c;
    S mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= S(c);
    S var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= S(c);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const S h = (row[j] - mean) * is;
      xhat[i * c + j] = h;
      out[i * c + j] = h * gv[j] + bv[j];
    }
  }
  return detail::make_result<S>(
      std::move(out), {x, gain, bias},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<S>& self) {
        const auto& g = self.grad;
        const auto& gv = detail::pval(self, 1);
        if (auto* gg = detail::pgrad(self, 1))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*gg)[j] += g[i * c + j] * xhat[i * c + j];
        if (auto* gb = detail::pgrad(self, 2))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g[i * c + j];
        if (auto* gx = detail::pgrad(self, 0)) {
          for (std::size_t i = 0; i < r; ++i) {
            S m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const S gh = g[i * c + j] * gv[j];
              m1 += gh;
              m2 += gh * xhat[i * c + j];
            }
            m1 /= S(c);
            m2 /= S(c);
            for (std::size_t j = 0; j < c; ++j) {
              const S gh = g[i * c + j] * gv[j];
              (*gx)[i * c + j] += inv_std[i] * (gh - m1 - xhat[i * c + j] * m2);
            }
          }
        }
      },
      "layer_norm");
}

template <class S>
Var<S> sum(const Var<S>& x) {
  S s = 0;
  for (auto v : x.value().data()) s += v;
  return detail::make_result<S>(
      Tensor<S>::scalar(s), {x},
      [](Node<S>& self) {
        if (auto* g = detail::pgrad(self, 0))
          for (auto& v : g->data()) v += self.grad[0];
      },
      "sum");
}

template <class S>
Var<S> mean(const Var<S>& x) {
  return scale(sum(x), S(1) / S(x.size()));
}

// Column sums of an [R x C] view: result [1 x C].
template <class S>
Var<S> sum_rows(const Var<S>& x) {
  const std::size_t c = x.value().cols(), r = x.value().rows();
  Tensor<S> out(Shape{1, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.value()[i * c + j];
  return detail::make_result<S>(
      std::move(out), {x},
      [r, c](Node<S>& self) {
        if (auto* g = detail::pgrad(self, 0))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[j];
      },
      "sum_rows");
}

template <class S>
Var<S> mean_rows(const Var<S>& x) {
  return scale(sum_rows(x), S(1) / S(x.value().rows()));
}

// ---------------------------------------------------------------------------
// shape manipulation

template <class S>
Var<S> reshape(const Var<S>& x, Shape dims) {
  Tensor<S> out = x.value().reshaped(std::move(dims));
  return detail::make_result<S>(
      std::move(out), {x},
      [](Node<S>& self) {
        if (auto* g = detail::pgrad(self, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      },
      "reshape");
}

// Rows [begin, end) of an [R x C] view, returned as [end-begin x C].
template <class S>
Var<S> slice_rows(const Var<S>& x, std::size_t begin, std::size_t end) {
  const std::size_t c = x.value().cols();
  detail::require(begin < end && end <= x.value().rows(),
                  "slice_rows: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") for " + shape_str(x.dims()));
  const auto first = x.value().data().begin() + static_cast<std::ptrdiff_t>(begin * c);
  Tensor<S> out(Shape{end - begin, c},
                std::vector<S>(first, first + static_cast<std::ptrdiff_t>((end - begin) * c)));
  return detail::make_result<S>(
      std::move(out), {x},
      [begin, c](Node<S>& self) {
        if (auto* g = detail::pgrad(self, 0))
          for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[begin * c + i] += self.grad[i];
      },
      "slice_rows");
}

template <class S>
Var<S> gather_rows(const Var<S>& x, std::vector<std::size_t> index) {
  const std::size_t c = x.value().cols(), r = x.value().rows();
  detail::require(!index.empty(), "gather_rows: empty index");
  Tensor<S> out(Shape{index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] < r, "gather_rows: index " + std::to_string(index[i]) +
                                      " out of range for " + shape_str(x.dims()));
    std::copy_n(x.value().data().data() + index[i] * c, c, out.data().data() + i * c);
  }
  return detail::make_result<S>(
      std::move(out), {x},
      [c, index = std::move(index)](Node<S>& self) {
        if (auto* g = detail::pgrad(self, 0))
          for (std::size_t i = 0; i < index.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) (*g)[index[i] * c + j] += self.grad[i * c + j];
      },
      "gather_rows");
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t c = parts.front().value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.value().cols() == c, "concat_rows: column count mismatch");
    total += p.value().rows();
  }
  std::vector<S> flat;
  flat.reserve(total * c);
  for (const auto& p : parts) flat.insert(flat.end(), p.value().data().begin(), p.value().data().end());
  return detail::make_result<S>(
      Tensor<S>(Shape{total, c}, std::move(flat)), parts,
      [](Node<S>& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < self.parents.size(); ++p) {
          const std::size_t n = self.parents[p]->value.size();
          if (auto* g = detail::pgrad(self, p))
            for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[off + i];
          off += n;
        }
      },
      "concat_rows");
}

// Columns [begin, end) of a rank-2 tensor.
template <class S>
Var<S> slice_cols(const Var<S>& x, std::size_t begin, std::size_t end) {
  detail::require_2d(x, "slice_cols");
  const std::size_t r = x.dims()[0], c = x.dims()[1], w = end - begin;
  detail::require(begin < end && end <= c, "slice_cols: bad range for " + shape_str(x.dims()));
  Tensor<S> out(Shape{r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.value()[i * c + begin + j];
  return detail::make_result<S>(
      std::move(out), {x},
      [r, c, w, begin](Node<S>& self) {
        if (auto* g = detail::pgrad(self, 0))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) (*g)[i * c + begin + j] += self.grad[i * w + j];
      },
      "slice_cols");
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  for (const auto& p : parts) detail::require_2d(p, "concat_cols");
  const std::size_t r = parts.front().dims()[0];
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.dims()[0] == r, "concat_cols: row count mismatch");
    total += p.dims()[1];
  }
  Tensor<S> out(Shape{r, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dims()[1];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = p.value()[i * w + j];
    off += w;
  }
  return detail::make_result<S>(
      std::move(out), parts,
      [r, total](Node<S>& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < self.parents.size(); ++p) {
          const std::size_t w = self.parents[p]->value.dims()[1];
          if (auto* g = detail::pgrad(self, p))
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += self.grad[i * total + off + j];
          off += w;
        }
      },
      "concat_cols");
}

// Mean over non-overlapping s x s blocks of an [H x W x D] grid. Each output
// cell sums its block in row-major block order, then divides by s*s.
template <class S>
Var<S> avg_pool_grid(const Var<S>& x, std::size_t stride) {
  const auto& d = x.dims();
  detail::require(d.size() == 3, "avg_pool_grid: expected [H x W x D], got " + shape_str(d));
  detail::require(stride >= 1 && d[0] % stride == 0 && d[1] % stride == 0,
                  "avg_pool_grid: stride " + std::to_string(stride) + " does not divide " +
                      shape_str(d));
  const std::size_t h = d[0], w = d[1], c = d[2], ho = h / stride, wo = w / stride;
  const S inv = S(1) / S(stride * stride);
  Tensor<S> out(Shape{ho, wo, c});
  const auto& xv = x.value();
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      S* dst = out.data().data() + (oy * wo + ox) * c;
      for (std::size_t dy = 0; dy < stride; ++dy)
        for (std::size_t dx = 0; dx < stride; ++dx) {
          const S* src = xv.data().data() + ((oy * stride + dy) * w + ox * stride + dx) * c;
          for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
        }
      for (std::size_t k = 0; k < c; ++k) dst[k] *= inv;
    }
  (void)h;
  return detail::make_result<S>(
      std::move(out), {x},
      [w, c, ho, wo, stride, inv](Node<S>& self) {
        auto* g = detail::pgrad(self, 0);
        if (!g) return;
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const S* src = self.grad.data().data() + (oy * wo + ox) * c;
            for (std::size_t dy = 0; dy < stride; ++dy)
              for (std::size_t dx = 0; dx < stride; ++dx) {
                S* dst = g->data().data() + ((oy * stride + dy) * w + ox * stride + dx) * c;
                for (std::size_t k = 0; k < c; ++k) dst[k] += src[k] * inv;
              }
          }
      },
      "avg_pool_grid");
}

// ---------------------------------------------------------------------------
// losses

template <class S>
Var<S> mse_loss(const Var<S>& pred, const Var<S>& target) {
  detail::require(pred.dims() == target.dims(), "mse_loss: shape mismatch " +
                                                    shape_str(pred.dims()) + " vs " +
                                                    shape_str(target.dims()));
  const std::size_t n = pred.size();
  S acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const S d = pred.value()[i] - target.value()[i];
    acc += d * d;
  }
  return detail::make_result<S>(
      Tensor<S>::scalar(acc / S(n)), {pred, target},
      [n](Node<S>& self) {
        const auto& p = detail::pval(self, 0);
        const auto& t = detail::pval(self, 1);
        const S k = S(2) * self.grad[0] / S(n);
        if (auto* g = detail::pgrad(self, 0))
          for (std::size_t i = 0; i < n; ++i) (*g)[i] += k * (p[i] - t[i]);
        if (auto* g = detail::pgrad(self, 1))
          for (std::size_t i = 0; i < n; ++i) (*g)[i] -= k * (p[i] - t[i]);
      },
      "mse_loss");
}

// Mean softmax cross-entropy of [B x C] logits against integer labels.
template <class S>
Var<S> cross_entropy(const Var<S>& logits, const std::vector<int>& labels) {
  detail::require_2d(logits, "cross_entropy");
  const std::size_t b = logits.dims()[0], c = logits.dims()[1];
  detail::require(labels.size() == b, "cross_entropy: label count mismatch");
  Tensor<S> probs(Shape{b, c});
  S loss = 0;
  for (std::size_t i = 0; i < b; ++i) {
    detail::require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < c,
                    "cross_entropy: label out of range");
    const S* row = logits.value().data().data() + i * c;
    S mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    S z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - mx) / z;
    loss += std::log(z) + mx - row[labels[i]];
  }
  return detail::make_result<S>(
      Tensor<S>::scalar(loss / S(b)), {logits},
      [b, c, labels, probs = std::move(probs)](Node<S>& self) {
        auto* g = detail::pgrad(self, 0);
        if (!g) return;
        const S k = self.grad[0] / S(b);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const S onehot = static_cast<std::size_t>(labels[i]) == j ? S(1) : S(0);
            (*g)[i * c + j] += k * (probs[i * c + j] - onehot);
          }
      },
      "cross_entropy");
}

}  // namespace sfsl
