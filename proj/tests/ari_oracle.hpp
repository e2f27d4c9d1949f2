#pragma once

// Brute-force adjusted Rand index: classify every unordered pair of items by
// whether each partition puts them together, then apply the pair-count form
//   ARI = 2 (n00 n11 - n01 n10) / ((n00 + n01)(n01 + n11) + (n00 + n10)(n10 + n11)).

#include <cstdint>
#include <functional>
#include <vector>

namespace sfsl::test {

inline double pair_counting_ari(const std::vector<int>& pred, const std::vector<int>& truth) {
  std::int64_t n11 = 0, n10 = 0, n01 = 0, n00 = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = i + 1; j < pred.size(); ++j) {
      const bool p = pred[i] == pred[j], t = truth[i] == truth[j];
      if (p && t) ++n11;
      else if (p) ++n10;
      else if (t) ++n01;
      else ++n00;
    }
  const std::int64_t num = 2 * (n00 * n11 - n01 * n10);
  const std::int64_t den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
  if (den == 0) return 1.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

// Calls f on every vector of length n over {0..labels-1}.
inline void for_each_labeling(std::size_t n, int labels, const std::function<void(const std::vector<int>&)>& f) {
  std::vector<int> v(n, 0);
  while (true) {
    f(v);
    std::size_t i = 0;
    while (i < n && ++v[i] == labels) v[i++] = 0;
    if (i == n) return;
  }
}

}  // namespace sfsl::test
