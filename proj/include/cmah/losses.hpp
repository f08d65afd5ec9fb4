#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "cmah/common.hpp"
#include "cmah/config.hpp"
#include "cmah/model.hpp"
#include "cmah/tensor.hpp"

namespace cmah::losses {

using diff::Tensor;

// Cosine similarity of raw code vectors; norms are floored at 1e-12 so the
// all-zero code cannot divide by zero.
Scalar cosine_sim(const Array& x, const Array& y);

// Single-anchor InfoNCE term, log-sum-exp stabilized. Empty negatives are
// legal (the ratio is 1, the term 0); non-positive tau is an error.
Scalar nce_unit(const Array& anchor, const Array& positive, const std::vector<Array>& negatives,
                Scalar tau,
                const std::function<Scalar(const Array&, const Array&)>& sim = cosine_sim);

enum class CodeFamily { full, masked };

// The four code matrices one batch produces, plus the contrast settings.
struct ContrastiveBatch {
  Tensor h_point, h_image;          // B x K
  Tensor h_point_vis, h_image_vis;  // B x K
  Scalar tau = 0.2;
  NegativeSet negatives = NegativeSet::both_families;
  void validate() const;
  static ContrastiveBatch from(const model::ForwardBundle& fb, Scalar tau,
                               NegativeSet negatives = NegativeSet::both_families);
};

// Differentiable symmetric batch InfoNCE: (1/2B) sum_i of the anchor terms in
// both directions, negatives for an anchor drawn from the positive's family
// (j != i) and, under both_families, the anchor's own family (j != i) too.
// Pairing two masked families is a contract violation and throws.
Tensor sym_infonce(const Tensor& a, CodeFamily fa, const Tensor& b, CodeFamily fb, Scalar tau,
                   NegativeSet negatives);

Tensor contrast_full_full(const ContrastiveBatch& cb);
Tensor contrast_full_masked(const ContrastiveBatch& cb);
Tensor contrast_masked_full(const ContrastiveBatch& cb);
Tensor contrast_total(const ContrastiveBatch& cb);

// The exact code-family pairings contrast_total is assembled from.
const std::vector<std::pair<CodeFamily, CodeFamily>>& contrast_registry();

// Reconstruction losses. pred rows are (sample-major, token-major) packed;
// recon_3d treats every k consecutive rows as one predicted point set.
Tensor recon_3d(const Tensor& pred, const RowMat& target, int b, int m_mask, int k);
Tensor recon_2d(const Tensor& pred, const RowMat& target, int b, int m_mask,
                bool per_patch_norm = false);

struct LossBreakdown {
  Tensor l_ff, l_fm, l_mf, l_c;  // contrastive components and their sum
  Tensor l_3d, l_2d, l_r;        // reconstruction components and their sum
  Tensor l_overall;              // l_c + l_r
};

// Every objective the bundle supports; reconstruction terms are zero scalars
// when the bundle carries no predictions for that side.
LossBreakdown overall(const model::ForwardBundle& fb, Scalar tau,
                      NegativeSet negatives = NegativeSet::both_families,
                      bool per_patch_norm = false);

}  // namespace cmah::losses
