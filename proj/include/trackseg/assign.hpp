#pragma once

#include <limits>
#include <utility>
#include <vector>

#include "trackseg/tensor.hpp"

namespace trackseg {

// One-to-one partial matching covering min(rows, cols) pairs, sorted by row.
using Assignment = std::vector<std::pair<int, int>>;

// Optimal-sum linear assignment via shortest augmenting paths with row/column
// potentials, O(n^3). Rectangular inputs are padded to a square with a
// constant; dummy contributions are identical for every completion, so the
// real sub-assignment stays optimal. Ties resolve by the fixed scan order,
// which makes results deterministic for identical inputs.
inline Assignment hungarian(const Tensor& cost, bool maximize = false) {
  const int rows = cost.rows, cols = cost.cols;
  if (rows == 0 || cols == 0) return {};
  const int n = std::max(rows, cols);
  const double inf = std::numeric_limits<double>::infinity();

  std::vector<double> a(static_cast<std::size_t>(n + 1) * (n + 1), 0.0);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const double v = cost.at(i, j);
      if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite cost");
      a[static_cast<std::size_t>(i + 1) * (n + 1) + (j + 1)] = maximize ? -v : v;
    }

  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);

  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), char(0));
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = inf;
      const double* arow = a.data() + static_cast<std::size_t>(i0) * (n + 1);
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = arow[j] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  Assignment out;
  out.reserve(std::min(rows, cols));
  for (int j = 1; j <= n; ++j) {
    const int i = p[j];
    if (i >= 1 && i <= rows && j <= cols) out.emplace_back(i - 1, j - 1);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline double assignment_total(const Tensor& cost, const Assignment& pairs) {
  double s = 0.0;
  for (const auto& [i, j] : pairs) s += cost.at(i, j);
  return s;
}

}  // namespace trackseg
