#pragma once

// Shared helpers for the unit suites: random tensor builders and a weighted
// scalar objective that gives finite-difference checks an asymmetric cotangent.

#include "cmah/common.hpp"
#include "cmah/ops.hpp"
#include "cmah/tensor.hpp"

namespace cmah::test {

inline diff::Tensor rand_tensor(std::vector<int> shape, Rng& rng, Scalar lo = -1.0, Scalar hi = 1.0,
                                bool requires_grad = false) {
  Eigen::Index n = 1;
  for (int d : shape) n *= d;
  Array v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.uniform(lo, hi);
  return diff::Tensor::from_array(std::move(shape), std::move(v), requires_grad);
}

// Random values bounded away from zero, for kinked ops like relu.
inline diff::Tensor rand_tensor_off_zero(std::vector<int> shape, Rng& rng, Scalar margin = 0.1) {
  diff::Tensor t = rand_tensor(shape, rng, margin, 1.0);
  for (Eigen::Index i = 0; i < t.numel(); ++i) {
    if (rng.uniform01() < 0.5) t.array()[i] = -t.array()[i];
  }
  return t;
}

// sum(y .* w) with fixed weights drawn once from rng.
inline diff::Tensor weighted_sum(const diff::Tensor& y, const Array& w) {
  diff::Tensor wt = diff::Tensor::from_array(y.shape(), w, false);
  return diff::sum(diff::mul(y, wt));
}

inline Array rand_weights(Eigen::Index n, Rng& rng) {
  Array w(n);
  for (Eigen::Index i = 0; i < n; ++i) w[i] = rng.uniform(-1.0, 1.0);
  return w;
}

}  // namespace cmah::test
