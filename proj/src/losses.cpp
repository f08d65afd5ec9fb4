#include "cmah/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

#include "cmah/geometry.hpp"
#include "cmah/ops.hpp"

namespace cmah::losses {

namespace {

constexpr Scalar kNormFloor = 1e-12;

// Row-normalized copy of m; norms[i] receives the floored norm actually used.
RowMat row_normalize(Eigen::Map<const RowMat> m, Array& norms) {
  RowMat n(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    norms[i] = std::max(m.row(i).norm(), kNormFloor);
    n.row(i) = m.row(i) / norms[i];
  }
  return n;
}

}  // namespace

Scalar cosine_sim(const Array& x, const Array& y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("cosine_sim: length mismatch, " + std::to_string(x.size()) +
                                " vs " + std::to_string(y.size()));
  }
  Scalar nx = std::max(std::sqrt((x * x).sum()), kNormFloor);
  Scalar ny = std::max(std::sqrt((y * y).sum()), kNormFloor);
  return (x * y).sum() / (nx * ny);
}

Scalar nce_unit(const Array& anchor, const Array& positive, const std::vector<Array>& negatives,
                Scalar tau, const std::function<Scalar(const Array&, const Array&)>& sim) {
  if (tau <= 0.0) {
    throw std::invalid_argument("nce_unit: tau must be positive, got " + std::to_string(tau));
  }
  Scalar z_pos = sim(anchor, positive) / tau;
  if (negatives.empty()) return 0.0;  // ratio is exp(z)/exp(z)
  Scalar m = z_pos;
  std::vector<Scalar> zs(negatives.size());
  for (size_t j = 0; j < negatives.size(); ++j) {
    zs[j] = sim(anchor, negatives[j]) / tau;
    m = std::max(m, zs[j]);
  }
  Scalar denom = std::exp(z_pos - m);
  for (Scalar z : zs) denom += std::exp(z - m);
  return m + std::log(denom) - z_pos;
}

void ContrastiveBatch::validate() const {
  const Tensor* all[] = {&h_point, &h_image, &h_point_vis, &h_image_vis};
  for (const Tensor* t : all) {
    if (!t->valid() || t->ndim() != 2) {
      throw std::invalid_argument("ContrastiveBatch: all four code matrices must be 2-D");
    }
    if (t->shape() != h_point.shape()) {
      throw std::invalid_argument("ContrastiveBatch: code shape mismatch, " +
                                  diff::shape_str(t->shape()) + " vs " +
                                  diff::shape_str(h_point.shape()));
    }
  }
  if (tau <= 0.0) {
    throw std::invalid_argument("ContrastiveBatch: tau must be positive, got " +
                                std::to_string(tau));
  }
}

ContrastiveBatch ContrastiveBatch::from(const model::ForwardBundle& fb, Scalar tau,
                                        NegativeSet negatives) {
  ContrastiveBatch cb;
  cb.h_point = fb.h_point;
  cb.h_image = fb.h_image;
  cb.h_point_vis = fb.h_point_vis;
  cb.h_image_vis = fb.h_image_vis;
  cb.tau = tau;
  cb.negatives = negatives;
  cb.validate();
  return cb;
}

Tensor sym_infonce(const Tensor& a, CodeFamily fa, const Tensor& b, CodeFamily fb, Scalar tau,
                   NegativeSet negatives) {
  if (fa == CodeFamily::masked && fb == CodeFamily::masked) {
    throw std::logic_error("sym_infonce: masked-masked pairing is outside the objective");
  }
  if (tau <= 0.0) {
    throw std::invalid_argument("sym_infonce: tau must be positive, got " + std::to_string(tau));
  }
  if (!a.valid() || !b.valid() || a.ndim() != 2 || b.ndim() != 2 || a.shape() != b.shape()) {
    throw std::invalid_argument("sym_infonce: expected matching B x K code matrices");
  }
  const int bsz = a.shape()[0];
  const bool both = negatives == NegativeSet::both_families;

  auto na = std::make_shared<Array>(bsz);
  auto nb = std::make_shared<Array>(bsz);
  auto An = std::make_shared<RowMat>(row_normalize(a.mat(), *na));
  auto Bn = std::make_shared<RowMat>(row_normalize(b.mat(), *nb));
  RowMat S = *An * Bn->transpose();  // S(i,j) = cos(a_i, b_j)
  RowMat Saa, Sbb;
  if (both) {
    Saa = *An * An->transpose();
    Sbb = *Bn * Bn->transpose();
  }

  // Candidate probabilities, one row per anchor: Pab(i,j) is the softmax mass
  // anchor a_i puts on candidate b_j, Paa(i,j) the mass on own-family a_j
  // (diagonal stays zero: an anchor is never its own negative). Q* mirror for
  // b-side anchors.
  auto Pab = std::make_shared<RowMat>(RowMat::Zero(bsz, bsz));
  auto Paa = std::make_shared<RowMat>(RowMat::Zero(bsz, bsz));
  auto Qba = std::make_shared<RowMat>(RowMat::Zero(bsz, bsz));
  auto Qbb = std::make_shared<RowMat>(RowMat::Zero(bsz, bsz));
  Scalar total = 0.0;
  for (int i = 0; i < bsz; ++i) {
    Scalar m = S.row(i).maxCoeff();
    if (both) {
      for (int j = 0; j < bsz; ++j) {
        if (j != i) m = std::max(m, Saa(i, j));
      }
    }
    m /= tau;
    Scalar denom = 0.0;
    for (int j = 0; j < bsz; ++j) {
      (*Pab)(i, j) = std::exp(S(i, j) / tau - m);
      denom += (*Pab)(i, j);
    }
    if (both) {
      for (int j = 0; j < bsz; ++j) {
        if (j == i) continue;
        (*Paa)(i, j) = std::exp(Saa(i, j) / tau - m);
        denom += (*Paa)(i, j);
      }
    }
    Pab->row(i) /= denom;
    if (both) Paa->row(i) /= denom;
    total += m + std::log(denom) - S(i, i) / tau;

    // Anchor b_i: positives/negatives mirror with sim(b_i, a_j) = S(j, i).
    m = S.col(i).maxCoeff();
    if (both) {
      for (int j = 0; j < bsz; ++j) {
        if (j != i) m = std::max(m, Sbb(i, j));
      }
    }
    m /= tau;
    denom = 0.0;
    for (int j = 0; j < bsz; ++j) {
      (*Qba)(i, j) = std::exp(S(j, i) / tau - m);
      denom += (*Qba)(i, j);
    }
    if (both) {
      for (int j = 0; j < bsz; ++j) {
        if (j == i) continue;
        (*Qbb)(i, j) = std::exp(Sbb(i, j) / tau - m);
        denom += (*Qbb)(i, j);
      }
    }
    Qba->row(i) /= denom;
    if (both) Qbb->row(i) /= denom;
    total += m + std::log(denom) - S(i, i) / tau;
  }

  Array v(1);
  v[0] = total / (2.0 * bsz);
  Tensor out = Tensor::from_array({1}, v, a.requires_grad() || b.requires_grad());
  if (out.requires_grad() && diff::Tape::active() != nullptr) {
    diff::Tape::active()->push("sym_infonce",
                               [a, b, out, An, Bn, na, nb, Pab, Paa, Qba, Qbb, tau, bsz, both]() {
      Scalar w = out.grad()[0] / (tau * 2.0 * bsz);
      RowMat eye = RowMat::Identity(bsz, bsz);
      RowMat dS = w * (*Pab - eye) + w * (*Qba - eye).transpose();
      RowMat dAn = dS * (*Bn);
      RowMat dBn = dS.transpose() * (*An);
      if (both) {
        dAn += w * (*Paa + Paa->transpose()) * (*An);
        dBn += w * (*Qbb + Qbb->transpose()) * (*Bn);
      }
      // Undo the row normalization: project out the radial component unless
      // the norm floor was active (there the map is a plain constant scale).
      auto unnormalize = [](const RowMat& dN, const RowMat& N, const Array& norms,
                            Eigen::Map<const RowMat> raw) {
        RowMat g(dN.rows(), dN.cols());
        for (Eigen::Index i = 0; i < dN.rows(); ++i) {
          if (raw.row(i).norm() < kNormFloor) {
            g.row(i) = dN.row(i) / kNormFloor;
          } else {
            Scalar radial = dN.row(i).dot(N.row(i));
            g.row(i) = (dN.row(i) - radial * N.row(i)) / norms[i];
          }
        }
        return g;
      };
      if (a.requires_grad()) a.add_grad_mat(unnormalize(dAn, *An, *na, a.mat()));
      if (b.requires_grad()) b.add_grad_mat(unnormalize(dBn, *Bn, *nb, b.mat()));
    });
  }
  return out;
}

Tensor contrast_full_full(const ContrastiveBatch& cb) {
  return sym_infonce(cb.h_point, CodeFamily::full, cb.h_image, CodeFamily::full, cb.tau,
                     cb.negatives);
}

Tensor contrast_full_masked(const ContrastiveBatch& cb) {
  return sym_infonce(cb.h_point, CodeFamily::full, cb.h_image_vis, CodeFamily::masked, cb.tau,
                     cb.negatives);
}

Tensor contrast_masked_full(const ContrastiveBatch& cb) {
  return sym_infonce(cb.h_point_vis, CodeFamily::masked, cb.h_image, CodeFamily::full, cb.tau,
                     cb.negatives);
}

Tensor contrast_total(const ContrastiveBatch& cb) {
  return diff::add(diff::add(contrast_full_full(cb), contrast_full_masked(cb)),
                   contrast_masked_full(cb));
}

const std::vector<std::pair<CodeFamily, CodeFamily>>& contrast_registry() {
  static const std::vector<std::pair<CodeFamily, CodeFamily>> pairs = {
      {CodeFamily::full, CodeFamily::full},
      {CodeFamily::full, CodeFamily::masked},
      {CodeFamily::masked, CodeFamily::full},
  };
  return pairs;
}

Tensor recon_3d(const Tensor& pred, const RowMat& target, int b, int m_mask, int k) {
  if (b < 1 || m_mask < 1 || k < 1) {
    throw std::invalid_argument("recon_3d: counts must be positive");
  }
  const Eigen::Index want = static_cast<Eigen::Index>(b) * m_mask * k;
  if (pred.rows() != want || pred.cols() != 3 || target.rows() != want || target.cols() != 3) {
    throw std::invalid_argument("recon_3d: expected " + std::to_string(want) +
                                "x3 prediction and target, got " + diff::shape_str(pred.shape()) +
                                " and " + std::to_string(target.rows()) + "x" +
                                std::to_string(target.cols()));
  }
  Tensor per_token = geom::chamfer_grouped(pred, target, b * m_mask);
  Scalar scale = 1.0 / (static_cast<Scalar>(b) * m_mask * k);
  return diff::mul(diff::sum(per_token), Tensor::full({1}, scale));
}

Tensor recon_2d(const Tensor& pred, const RowMat& target, int b, int m_mask, bool per_patch_norm) {
  if (b < 1 || m_mask < 1) {
    throw std::invalid_argument("recon_2d: counts must be positive");
  }
  const Eigen::Index want = static_cast<Eigen::Index>(b) * m_mask;
  if (pred.rows() != want || target.rows() != want || pred.cols() != target.cols()) {
    throw std::invalid_argument("recon_2d: expected " + std::to_string(want) + " patch rows, got " +
                                diff::shape_str(pred.shape()) + " and " +
                                std::to_string(target.rows()) + "x" +
                                std::to_string(target.cols()));
  }
  RowMat t = target;
  if (per_patch_norm) {
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      Scalar mu = t.row(i).mean();
      Scalar var = (t.row(i).array() - mu).square().mean();
      t.row(i) = (t.row(i).array() - mu) / std::sqrt(var + 1e-6);
    }
  }
  // Per-sample 1/M^mask times the per-patch pixel mean collapses to one flat
  // mean because every sample holds the same number of masked patches.
  Tensor d = diff::sub(pred, Tensor::from_matrix(t));
  return diff::mean(diff::mul(d, d));
}

LossBreakdown overall(const model::ForwardBundle& fb, Scalar tau, NegativeSet negatives,
                      bool per_patch_norm) {
  ContrastiveBatch cb = ContrastiveBatch::from(fb, tau, negatives);
  LossBreakdown out;
  out.l_ff = contrast_full_full(cb);
  out.l_fm = contrast_full_masked(cb);
  out.l_mf = contrast_masked_full(cb);
  out.l_c = diff::add(diff::add(out.l_ff, out.l_fm), out.l_mf);
  if (fb.has_recon) {
    out.l_3d = recon_3d(fb.pred_3d, fb.target_3d, fb.batch, fb.m_mask_point, fb.k_tok);
    out.l_2d = recon_2d(fb.pred_2d, fb.target_2d, fb.batch, fb.m_mask_image, per_patch_norm);
    out.l_r = diff::add(out.l_3d, out.l_2d);
  } else {
    out.l_3d = Tensor::zeros({1});
    out.l_2d = Tensor::zeros({1});
    out.l_r = Tensor::zeros({1});
  }
  out.l_overall = diff::add(out.l_c, out.l_r);
  return out;
}

}  // namespace cmah::losses
