#pragma once

// Loop-based reference kernels on nested vectors, independent of the engine.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "sfslots/autograd.hpp"
#include "sfslots/nn.hpp"

namespace sfsl::test::ref {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const TensorD& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

inline std::vector<double> to_vec(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

inline Mat mm(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline Mat plus(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

inline Mat bias(Mat a, const std::vector<double>& b) {
  for (auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  return a;
}

inline Mat ln(const Mat& x, const std::vector<double>& g, const std::vector<double>& b) {
  Mat out = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double n = double(x[r].size());
    double mean = 0, var = 0;
    for (double v : x[r]) mean += v;
    mean /= n;
    for (double v : x[r]) var += (v - mean) * (v - mean);
    var /= n;
    for (std::size_t c = 0; c < x[r].size(); ++c)
      out[r][c] = (x[r][c] - mean) / std::sqrt(var + kLayerNormEps) * g[c] + b[c];
  }
  return out;
}

inline Mat gelu_sigmoid(Mat x) {
  for (auto& row : x)
    for (auto& v : row) v = v / (1.0 + std::exp(-1.702 * v));
  return x;
}

// Multi-head scaled dot-product attention; returns output and per-head
// [Nq x Nk] weights normalized over keys.
inline std::pair<Mat, std::vector<Mat>> mha(const Mat& q, const Mat& k, const Mat& v, std::size_t heads) {
  const std::size_t d = q[0].size(), dh = d / heads;
  Mat out(q.size(), std::vector<double>(d, 0.0));
  std::vector<Mat> ws;
  for (std::size_t h = 0; h < heads; ++h) {
    Mat w(q.size(), std::vector<double>(k.size()));
    for (std::size_t i = 0; i < q.size(); ++i) {
      double mx = -1e300;
      for (std::size_t j = 0; j < k.size(); ++j) {
        double dot = 0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dot += q[i][c] * k[j][c];
        w[i][j] = dot / std::sqrt(double(dh));
        mx = std::max(mx, w[i][j]);
      }
      double z = 0;
      for (auto& x : w[i]) z += (x = std::exp(x - mx));
      for (auto& x : w[i]) x /= z;
      for (std::size_t j = 0; j < k.size(); ++j)
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) out[i][c] += w[i][j] * v[j][c];
    }
    ws.push_back(w);
  }
  return {out, ws};
}

// Overwrites every parameter with N(0, sd^2), adding 1 to layer-norm gains.
inline void randomize(ParamStore<double>& st, Rng& rng, double sd = 0.4) {
  for (const auto& [name, v] : st.entries()) {
    auto var = v;
    for (auto& x : var.mutable_value().data()) x = std::normal_distribution<double>(0.0, sd)(rng);
    if (name.ends_with(".g"))
      for (auto& x : var.mutable_value().data()) x += 1.0;
  }
}

}  // namespace sfsl::test::ref
