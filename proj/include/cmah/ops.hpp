#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cmah/tensor.hpp"

namespace cmah::diff {

// Fixed op vocabulary. Shapes are validated per op; broadcasting is limited
// to trailing-dimension expansion (bias-add patterns: [..xD] op [D] or [1]).
// Every op records a node on the active tape when any input requires grad.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat(const std::vector<Tensor>& xs);        // along rows of the 2-D view
Tensor slice_rows(const Tensor& a, int begin, int end);
Tensor softmax(const Tensor& a);                     // over the last dimension
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor mean(const Tensor& a);                        // full reduction -> [1]
Tensor sum(const Tensor& a);                         // full reduction -> [1]
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);                        // exact erf form
Tensor tanh(const Tensor& a);
Tensor layernorm(const Tensor& a, Scalar eps = 1e-5);  // per-row, no affine
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& indices);

// Fused multi-head scaled dot-product attention over packed groups.
// q is [G*q_len x D], k and v are [G*kv_len x D]; attention is applied
// independently inside each of the G groups. `mask`, when given, is a
// constant additive [q_len x kv_len] bias shared across groups and heads.
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                                    int q_len, int kv_len, const Tensor* mask = nullptr);

// Channel-wise max over consecutive row groups: [G*group x C] -> [G x C].
// Ties route the gradient to the lowest row index. Not part of the
// op_forward vocabulary; used by the point tokenizer's pooling stage.
Tensor group_max(const Tensor& a, int group);

struct OpAttrs {
  std::vector<int> shape;       // reshape
  int begin = 0, end = 0;       // slice
  std::vector<int> indices;     // embedding-lookup
  int heads = 1;                // scaled-dot-product-attention
  int q_len = 0, kv_len = 0;
  Scalar eps = 1e-5;            // layernorm
};

// Dispatch by op id. Valid ids: add, sub, mul, matmul, transpose, reshape,
// concat, slice, softmax, log, exp, mean, sum, relu, gelu, tanh, layernorm,
// embedding-lookup, scaled-dot-product-attention.
Tensor op_forward(const std::string& op, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

const std::vector<std::string>& op_vocabulary();

// Central finite-difference check of reverse-mode gradients.
struct GradCheckReport {
  std::vector<Scalar> analytic;
  std::vector<Scalar> numeric;
  std::vector<Scalar> rel_err;      // |analytic - numeric| / max(|numeric|, 1)
  std::vector<int> non_finite;      // elements whose numeric gradient is non-finite
  Scalar max_rel_err = 0.0;
  bool pass = false;
  std::string summary() const;
};

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           Scalar eps = 1e-4, Scalar rtol = 1e-3);

}  // namespace cmah::diff
