#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cmah/common.hpp"
#include "cmah/ops.hpp"
#include "cmah/tensor.hpp"

namespace cmah::nn {

// Named parameter registry in fixed registration order; the optimizer walks
// it in order and the checkpoint format serializes it in order.
using ParamMap = std::vector<std::pair<std::string, diff::Tensor>>;

inline diff::Tensor linear(const diff::Tensor& x, const diff::Tensor& w, const diff::Tensor& b) {
  return diff::add(diff::matmul(x, w), b);
}

// Truncated-normal weight init (resampled beyond 2 sigma), zero biases.
// init_weight with the fixed default sigma is for embedding-like parameters
// (class/mask tokens, positional tables); linear layers use init_linear, whose
// Xavier sigma keeps init-time signal propagation width-independent. A fixed
// small sigma at the desk widths leaves the encoders nearly input-blind.
diff::Tensor init_weight(std::vector<int> shape, Rng& rng, Scalar sigma = 0.02);
diff::Tensor init_linear(int fan_in, int fan_out, Rng& rng);
diff::Tensor init_zeros(std::vector<int> shape);

}  // namespace cmah::nn
