#pragma once

// Naive reference implementations, written independently of the production
// code paths and kept deliberately simple (plain loops, full sorts). Tests
// compare production output against these on randomized instances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cmah/common.hpp"

namespace cmah::oracle {

inline double sqdist3(const RowMat& a, int i, const RowMat& b, int j) {
  double s = 0.0;
  for (int c = 0; c < 3; ++c) {
    double d = a(i, c) - b(j, c);
    s += d * d;
  }
  return s;
}

// Greedy farthest point sampling, recomputing every candidate's distance to
// the whole chosen set at each step.
inline std::vector<int> fps(const RowMat& cloud, int m, int first) {
  int n = static_cast<int>(cloud.rows());
  std::vector<int> picked = {first};
  std::vector<bool> chosen(n, false);
  chosen[first] = true;
  while (static_cast<int>(picked.size()) < m) {
    int best = -1;
    double best_d = -1.0;
    for (int i = 0; i < n; ++i) {
      if (chosen[i]) continue;
      double dmin = std::numeric_limits<double>::infinity();
      for (int p : picked) dmin = std::min(dmin, sqdist3(cloud, i, cloud, p));
      if (dmin > best_d) {
        best_d = dmin;
        best = i;
      }
    }
    picked.push_back(best);
    chosen[best] = true;
  }
  return picked;
}

// k nearest neighbors of one center by full sort with index tie-break.
inline std::vector<int> knn(const RowMat& cloud, int center, int k) {
  int n = static_cast<int>(cloud.rows());
  std::vector<std::pair<double, int>> all(n);
  for (int i = 0; i < n; ++i) all[i] = {sqdist3(cloud, center, cloud, i), i};
  std::sort(all.begin(), all.end());
  std::vector<int> out(k);
  for (int j = 0; j < k; ++j) out[j] = all[j].second;
  return out;
}

// Symmetric squared-L2 Chamfer by double loop.
inline double chamfer(const RowMat& a, const RowMat& b) {
  double sa = 0.0;
  for (int i = 0; i < a.rows(); ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (int j = 0; j < b.rows(); ++j) dmin = std::min(dmin, sqdist3(a, i, b, j));
    sa += dmin;
  }
  double sb = 0.0;
  for (int j = 0; j < b.rows(); ++j) {
    double dmin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < a.rows(); ++i) dmin = std::min(dmin, sqdist3(b, j, a, i));
    sb += dmin;
  }
  return sa / a.rows() + sb / b.rows();
}

}  // namespace cmah::oracle
