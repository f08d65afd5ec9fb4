#include "cmah/nn.hpp"

#include <cmath>

namespace cmah::nn {

diff::Tensor init_weight(std::vector<int> shape, Rng& rng, Scalar sigma) {
  Eigen::Index n = 1;
  for (int d : shape) n *= d;
  Array v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.trunc_normal(sigma);
  return diff::Tensor::from_array(std::move(shape), std::move(v), true);
}

diff::Tensor init_linear(int fan_in, int fan_out, Rng& rng) {
  const Scalar sigma = std::sqrt(2.0 / (fan_in + fan_out));
  return init_weight({fan_in, fan_out}, rng, sigma);
}

diff::Tensor init_zeros(std::vector<int> shape) { return diff::Tensor::zeros(std::move(shape), true); }

}  // namespace cmah::nn
