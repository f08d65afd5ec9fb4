#include <cmath>
#include <stdexcept>
#include <vector>

#include "cmah/geometry.hpp"
#include "cmah/losses.hpp"
#include "cmah/model.hpp"
#include "cmah/ops.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cmah;
using namespace cmah::losses;
using diff::Tensor;

namespace {

Array code_row(const RowMat& m, Eigen::Index i) { return m.row(i).transpose().array(); }

RowMat rand_codes(int b, int k, Rng& rng) {
  RowMat m(b, k);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

// Plain unstabilized -log(exp(s+)/sum exp(s)) with explicit cosine terms.
Scalar nce_direct(const Array& anchor, const Array& positive, const std::vector<Array>& negs,
                  Scalar tau) {
  Scalar num = std::exp(cosine_sim(anchor, positive) / tau);
  Scalar den = num;
  for (const Array& n : negs) den += std::exp(cosine_sim(anchor, n) / tau);
  return -std::log(num / den);
}

// Per-anchor enumeration of the symmetric batch objective on top of nce_unit.
Scalar sym_oracle(const RowMat& a, const RowMat& b, Scalar tau, NegativeSet negs) {
  const bool both = negs == NegativeSet::both_families;
  const Eigen::Index bsz = a.rows();
  Scalar total = 0.0;
  for (Eigen::Index i = 0; i < bsz; ++i) {
    std::vector<Array> na, nb;
    for (Eigen::Index j = 0; j < bsz; ++j) {
      if (j == i) continue;
      na.push_back(code_row(b, j));
      nb.push_back(code_row(a, j));
      if (both) {
        na.push_back(code_row(a, j));
        nb.push_back(code_row(b, j));
      }
    }
    total += nce_unit(code_row(a, i), code_row(b, i), na, tau);
    total += nce_unit(code_row(b, i), code_row(a, i), nb, tau);
  }
  return total / (2.0 * static_cast<Scalar>(bsz));
}

}  // namespace

TEST_SUITE_BEGIN("losses");

TEST_CASE("cosine_sim basics and zero-vector floor") {
  Array x(3), y(3);
  x << 1, 0, 0;
  y << 0, 2, 0;
  CHECK(cosine_sim(x, x) == doctest::Approx(1.0));
  CHECK(cosine_sim(x, y) == 0.0);
  Array z = Array::Zero(3);
  CHECK(cosine_sim(x, z) == 0.0);
  CHECK(std::isfinite(cosine_sim(z, z)));
  CHECK_THROWS_AS(cosine_sim(x, Array(4)), std::invalid_argument);
}

TEST_CASE("nce_unit matches the direct ratio formula") {
  Rng rng(101);
  for (int t = 0; t < 200; ++t) {
    int k = 4 + static_cast<int>(rng.uniform_int(12));
    int n = static_cast<int>(rng.uniform_int(8));
    Array anchor = code_row(rand_codes(1, k, rng), 0);
    Array positive = code_row(rand_codes(1, k, rng), 0);
    std::vector<Array> negs;
    for (int j = 0; j < n; ++j) negs.push_back(code_row(rand_codes(1, k, rng), 0));
    Scalar tau = rng.uniform(0.05, 1.0);
    Scalar got = nce_unit(anchor, positive, negs, tau);
    CHECK(got == doctest::Approx(nce_direct(anchor, positive, negs, tau)).epsilon(1e-10));
    CHECK(got >= 0.0);
  }
}

TEST_CASE("nce_unit pinned values") {
  Array e1(2), e2(2);
  e1 << 1, 0;
  e2 << 0, 1;
  // One negative scoring exactly like the positive halves the ratio.
  CHECK(nce_unit(e1, e1, {e1}, 0.2) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(nce_unit(e1, e1, {}, 0.2) == 0.0);
  CHECK(nce_unit(e1, e2, {}, 0.05) == 0.0);
  CHECK_THROWS_AS(nce_unit(e1, e2, {e1}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(nce_unit(e1, e2, {e1}, -0.3), std::invalid_argument);
}

TEST_CASE("nce_unit is monotone as the positive rotates away from the anchor") {
  Array anchor(2);
  anchor << 1, 0;
  std::vector<Array> negs;
  Array n1(2), n2(2);
  n1 << 0, 1;
  n2 << -0.5, 0.2;
  negs = {n1, n2};
  Scalar prev = -1.0;
  for (int s = 0; s <= 16; ++s) {
    Scalar theta = M_PI * s / 16.0;
    Array positive(2);
    positive << std::cos(theta), std::sin(theta);
    Scalar v = nce_unit(anchor, positive, negs, 0.2);
    CHECK(v > prev);
    prev = v;
  }
}

TEST_CASE("sym_infonce matches the per-anchor enumeration oracle") {
  Rng rng(103);
  for (int t = 0; t < 30; ++t) {
    int bsz = 2 + static_cast<int>(rng.uniform_int(7));
    int k = 4 + static_cast<int>(rng.uniform_int(13));
    RowMat am = rand_codes(bsz, k, rng);
    RowMat bm = rand_codes(bsz, k, rng);
    Scalar tau = rng.uniform(0.05, 0.8);
    for (NegativeSet negs : {NegativeSet::both_families, NegativeSet::cross_modal_only}) {
      Tensor a = Tensor::from_matrix(am), b = Tensor::from_matrix(bm);
      Scalar got = sym_infonce(a, CodeFamily::full, b, CodeFamily::full, tau, negs).item();
      CHECK(got == doctest::Approx(sym_oracle(am, bm, tau, negs)).epsilon(1e-10));
      CHECK(got >= 0.0);
    }
  }
}

TEST_CASE("sym_infonce closed forms at B=1 and B=2") {
  Rng rng(107);
  // Lone pair: the candidate set is just the positive, so the term vanishes.
  Tensor a1 = cmah::test::rand_tensor({1, 8}, rng);
  Tensor b1 = cmah::test::rand_tensor({1, 8}, rng);
  CHECK(sym_infonce(a1, CodeFamily::full, b1, CodeFamily::full, 0.2,
                    NegativeSet::both_families).item() == 0.0);
  CHECK(sym_infonce(a1, CodeFamily::full, b1, CodeFamily::masked, 0.2,
                    NegativeSet::cross_modal_only).item() == 0.0);

  // Two identical orthogonal pairs: positive sim 1, every negative sim 0.
  RowMat m(2, 4);
  m << 1, 0, 0, 0, 0, 1, 0, 0;
  Tensor a = Tensor::from_matrix(m), b = Tensor::from_matrix(m);
  Scalar tau = 0.2;
  Scalar e = std::exp(1.0 / tau);
  Scalar both = -std::log(e / (e + 2.0));
  Scalar cross = -std::log(e / (e + 1.0));
  CHECK(sym_infonce(a, CodeFamily::full, b, CodeFamily::full, tau,
                    NegativeSet::both_families).item() == doctest::Approx(both).epsilon(1e-12));
  CHECK(sym_infonce(a, CodeFamily::full, b, CodeFamily::full, tau,
                    NegativeSet::cross_modal_only).item() == doctest::Approx(cross).epsilon(1e-12));
}

TEST_CASE("sym_infonce is invariant under a shared batch permutation") {
  Rng rng(109);
  const int bsz = 7, k = 12;
  RowMat am = rand_codes(bsz, k, rng), bm = rand_codes(bsz, k, rng);
  std::vector<int> perm = rng.permutation(bsz);
  RowMat ap(bsz, k), bp(bsz, k);
  for (int i = 0; i < bsz; ++i) {
    ap.row(i) = am.row(perm[i]);
    bp.row(i) = bm.row(perm[i]);
  }
  for (NegativeSet negs : {NegativeSet::both_families, NegativeSet::cross_modal_only}) {
    Scalar v0 = sym_infonce(Tensor::from_matrix(am), CodeFamily::full, Tensor::from_matrix(bm),
                            CodeFamily::full, 0.2, negs).item();
    Scalar v1 = sym_infonce(Tensor::from_matrix(ap), CodeFamily::full, Tensor::from_matrix(bp),
                            CodeFamily::full, 0.2, negs).item();
    CHECK(v0 == doctest::Approx(v1).epsilon(1e-12));
  }
}

TEST_CASE("sym_infonce stays finite at tau 0.01 and rejects bad arguments") {
  Rng rng(113);
  Tensor a = cmah::test::rand_tensor({8, 16}, rng);
  Tensor b = cmah::test::rand_tensor({8, 16}, rng);
  for (NegativeSet negs : {NegativeSet::both_families, NegativeSet::cross_modal_only}) {
    CHECK(std::isfinite(sym_infonce(a, CodeFamily::full, b, CodeFamily::full, 0.01, negs).item()));
  }
  CHECK_THROWS_AS(sym_infonce(a, CodeFamily::full, b, CodeFamily::full, 0.0,
                              NegativeSet::both_families),
                  std::invalid_argument);
  CHECK_THROWS_AS(sym_infonce(a, CodeFamily::full, cmah::test::rand_tensor({7, 16}, rng),
                              CodeFamily::full, 0.2, NegativeSet::both_families),
                  std::invalid_argument);
}

TEST_CASE("pairing two masked code families is rejected by construction") {
  Rng rng(127);
  Tensor a = cmah::test::rand_tensor({4, 8}, rng);
  Tensor b = cmah::test::rand_tensor({4, 8}, rng);
  CHECK_THROWS_AS(sym_infonce(a, CodeFamily::masked, b, CodeFamily::masked, 0.2,
                              NegativeSet::both_families),
                  std::logic_error);

  const auto& reg = contrast_registry();
  REQUIRE(reg.size() == 3);
  CHECK(reg[0] == std::pair(CodeFamily::full, CodeFamily::full));
  CHECK(reg[1] == std::pair(CodeFamily::full, CodeFamily::masked));
  CHECK(reg[2] == std::pair(CodeFamily::masked, CodeFamily::full));
  for (const auto& [fa, fb] : reg) {
    CHECK((fa == CodeFamily::full || fb == CodeFamily::full));
  }
}

TEST_CASE("sym_infonce passes grad_check on both arguments") {
  Rng rng(131);
  for (NegativeSet negs : {NegativeSet::both_families, NegativeSet::cross_modal_only}) {
    Tensor a = cmah::test::rand_tensor({5, 6}, rng);
    Tensor b = cmah::test::rand_tensor({5, 6}, rng);
    auto ga = diff::grad_check(
        [&](const Tensor& t) {
          return sym_infonce(t, CodeFamily::full, b, CodeFamily::full, 0.2, negs);
        },
        a, 1e-5, 1e-3);
    INFO("a-side: ", ga.summary());
    CHECK(ga.pass);
    auto gb = diff::grad_check(
        [&](const Tensor& t) {
          return sym_infonce(a, CodeFamily::full, t, CodeFamily::masked, 0.2, negs);
        },
        b, 1e-5, 1e-3);
    INFO("b-side: ", gb.summary());
    CHECK(gb.pass);
  }
}

TEST_CASE("recon_3d pinned value: lone token offset by a unit vector") {
  Tensor pred = Tensor::row({1.0, 0.0, 0.0});
  RowMat target = RowMat::Zero(1, 3);
  CHECK(recon_3d(pred, target, 1, 1, 1).item() == 2.0);
  CHECK_THROWS_AS(recon_3d(pred, target, 1, 2, 1), std::invalid_argument);
}

TEST_CASE("recon_3d matches the per-token double-loop oracle") {
  Rng rng(137);
  const int b = 2, m = 3, k = 4;
  for (int t = 0; t < 20; ++t) {
    Tensor pred = cmah::test::rand_tensor({b * m * k, 3}, rng);
    RowMat target = rand_codes(b * m * k, 3, rng);
    Scalar naive = 0.0;
    for (int i = 0; i < b; ++i) {
      Scalar sample = 0.0;
      for (int tok = 0; tok < m; ++tok) {
        int at = (i * m + tok) * k;
        sample += oracle::chamfer(pred.mat().block(at, 0, k, 3), target.block(at, 0, k, 3));
      }
      naive += sample / (m * k);
    }
    naive /= b;
    CHECK(recon_3d(pred, target, b, m, k).item() == doctest::Approx(naive).epsilon(1e-12));
  }
}

TEST_CASE("recon_3d equals the slice-and-chamfer composition, gradients included") {
  Rng rng(139);
  const int b = 2, m = 2, k = 3;
  Tensor pred = cmah::test::rand_tensor({b * m * k, 3}, rng, -1.0, 1.0, true);
  RowMat target = rand_codes(b * m * k, 3, rng);

  diff::Tape t1;
  Scalar fused;
  {
    diff::TapeScope ts(t1);
    Tensor l = recon_3d(pred, target, b, m, k);
    fused = l.item();
    diff::backward(l);
  }
  Array g1 = pred.grad();
  pred.zero_grad();

  diff::Tape t2;
  Scalar composed;
  {
    diff::TapeScope ts(t2);
    std::vector<Tensor> terms;
    for (int g = 0; g < b * m; ++g) {
      Tensor slice = diff::slice_rows(pred, g * k, (g + 1) * k);
      terms.push_back(geom::chamfer_diff(slice, Tensor::from_matrix(target.block(g * k, 0, k, 3))));
    }
    Tensor l = diff::mul(diff::sum(diff::concat(terms)),
                         Tensor::full({1}, 1.0 / (static_cast<Scalar>(b) * m * k)));
    composed = l.item();
    diff::backward(l);
  }
  CHECK(fused == doctest::Approx(composed).epsilon(1e-12));
  CHECK((pred.grad() - g1).abs().maxCoeff() < 1e-12);
}

TEST_CASE("recon_3d passes grad_check") {
  Rng rng(149);
  const int b = 2, m = 2, k = 3;
  Tensor pred = cmah::test::rand_tensor({b * m * k, 3}, rng);
  RowMat target = rand_codes(b * m * k, 3, rng);
  auto r = diff::grad_check(
      [&](const Tensor& t) { return recon_3d(t, target, b, m, k); }, pred, 1e-5, 1e-3);
  INFO(r.summary());
  CHECK(r.pass);
}

TEST_CASE("recon_2d pinned value: constant offset gives its square") {
  Rng rng(151);
  const int b = 2, m = 3, pd = 12;
  RowMat target = rand_codes(b * m, pd, rng);
  RowMat shifted = target.array() + 0.25;
  CHECK(recon_2d(Tensor::from_matrix(shifted), target, b, m).item() ==
        doctest::Approx(0.0625).epsilon(1e-12));
  CHECK(recon_2d(Tensor::from_matrix(target), target, b, m).item() == 0.0);
  CHECK_THROWS_AS(recon_2d(Tensor::from_matrix(shifted), target, b, m + 1),
                  std::invalid_argument);
}

TEST_CASE("recon_2d matches the per-patch mean oracle") {
  Rng rng(157);
  const int b = 3, m = 2, pd = 8;
  for (int t = 0; t < 20; ++t) {
    Tensor pred = cmah::test::rand_tensor({b * m, pd}, rng, 0.0, 1.0);
    RowMat target = rand_codes(b * m, pd, rng).cwiseAbs();
    Scalar naive = 0.0;
    for (int i = 0; i < b; ++i) {
      Scalar sample = 0.0;
      for (int patch = 0; patch < m; ++patch) {
        Eigen::Index r = i * m + patch;
        sample += (pred.mat().row(r) - target.row(r)).array().square().mean();
      }
      naive += sample / m;
    }
    naive /= b;
    CHECK(recon_2d(pred, target, b, m).item() == doctest::Approx(naive).epsilon(1e-12));
  }
}

TEST_CASE("recon_2d per-patch normalization flag rescales targets only") {
  Rng rng(163);
  const int b = 2, m = 2, pd = 10;
  Tensor pred = cmah::test::rand_tensor({b * m, pd}, rng, 0.0, 1.0);
  RowMat target = rand_codes(b * m, pd, rng).array() * 0.4 + 0.5;

  RowMat tn = target;
  for (Eigen::Index i = 0; i < tn.rows(); ++i) {
    Scalar mu = tn.row(i).mean();
    Scalar var = (tn.row(i).array() - mu).square().mean();
    tn.row(i) = (tn.row(i).array() - mu) / std::sqrt(var + 1e-6);
  }
  Scalar flagged = recon_2d(pred, target, b, m, true).item();
  CHECK(flagged == doctest::Approx(recon_2d(pred, tn, b, m).item()).epsilon(1e-12));
  CHECK(flagged != recon_2d(pred, target, b, m).item());
}

TEST_CASE("recon_2d passes grad_check") {
  Rng rng(167);
  const int b = 2, m = 2, pd = 6;
  Tensor pred = cmah::test::rand_tensor({b * m, pd}, rng, 0.0, 1.0);
  RowMat target = rand_codes(b * m, pd, rng).cwiseAbs();
  for (bool norm : {false, true}) {
    auto r = diff::grad_check(
        [&](const Tensor& t) { return recon_2d(t, target, b, m, norm); }, pred, 1e-5, 1e-3);
    INFO(r.summary());
    CHECK(r.pass);
  }
}

TEST_CASE("overall reports six components whose sums are exact") {
  ModelConfig cfg = cmah::test::tiny_config();
  model::CmahModel m(cfg, 11);
  auto batch = cmah::test::rand_batch(cfg, 3, 5);
  model::ForwardBundle fb = m.full_forward(batch, 21, 31, true);
  REQUIRE(fb.has_recon);
  LossBreakdown lb = overall(fb, cfg.tau);
  CHECK(lb.l_c.item() == lb.l_ff.item() + lb.l_fm.item() + lb.l_mf.item());
  CHECK(lb.l_r.item() == lb.l_3d.item() + lb.l_2d.item());
  CHECK(lb.l_overall.item() == lb.l_c.item() + lb.l_r.item());
  for (const Tensor* t : {&lb.l_ff, &lb.l_fm, &lb.l_mf, &lb.l_3d, &lb.l_2d}) {
    CHECK(t->item() >= 0.0);
    CHECK(std::isfinite(t->item()));
  }

  model::ForwardBundle plain = m.full_forward(batch, 21, 31, true, true, false);
  REQUIRE_FALSE(plain.has_recon);
  LossBreakdown lp = overall(plain, cfg.tau);
  CHECK(lp.l_3d.item() == 0.0);
  CHECK(lp.l_2d.item() == 0.0);
  CHECK(lp.l_r.item() == 0.0);
  CHECK(lp.l_overall.item() == lp.l_c.item());
}

TEST_CASE("mask ratio zero collapses the contrastive terms onto the full pair") {
  ModelConfig cfg = cmah::test::tiny_config();
  cfg.mask_ratio_image = 0.0;
  cfg.mask_ratio_point = 0.0;
  model::CmahModel m(cfg, 13);
  auto batch = cmah::test::rand_batch(cfg, 4, 7);
  model::ForwardBundle fb = m.full_forward(batch, 23, 29, true);
  CHECK_FALSE(fb.has_recon);
  LossBreakdown lb = overall(fb, cfg.tau);
  CHECK(lb.l_fm.item() == lb.l_ff.item());
  CHECK(lb.l_mf.item() == lb.l_ff.item());
  CHECK(lb.l_c.item() == doctest::Approx(3.0 * lb.l_ff.item()).epsilon(1e-15));
}

TEST_CASE("end-to-end parameter gradients survive a 20-point finite-difference probe") {
  ModelConfig cfg = cmah::test::tiny_config();
  model::CmahModel m(cfg, 17);
  auto batch = cmah::test::rand_batch(cfg, 3, 9);
  auto rep = cmah::test::e2e_grad_probe(m, batch, 41, 43, cfg.tau, 20, 1e-4, 2e-3);
  INFO(rep.summary());
  CHECK(rep.pass);
  CHECK(rep.probes.size() == 20);
}

TEST_SUITE_END();
