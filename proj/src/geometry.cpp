#include "cmah/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace cmah::geom {

namespace {

void check_cloud(const char* op, const RowMat& cloud) {
  if (cloud.rows() < 1) throw std::invalid_argument(std::string(op) + ": empty point set");
  if (cloud.cols() != 3) {
    throw std::invalid_argument(std::string(op) + ": expected N×3 points, got " +
                                std::to_string(cloud.rows()) + "×" + std::to_string(cloud.cols()));
  }
  for (Eigen::Index i = 0; i < cloud.rows(); ++i) {
    if (!cloud.row(i).allFinite()) {
      throw NumericError(std::string(op) + ": non-finite coordinate at point " + std::to_string(i));
    }
  }
}

// Squared distances from one query point to every cloud row.
Eigen::VectorXd sq_dists(const RowMat& cloud, const Eigen::RowVector3d& q) {
  return (cloud.rowwise() - q).rowwise().squaredNorm();
}

}  // namespace

RowMat normalize(const RowMat& cloud) {
  check_cloud("normalize", cloud);
  RowMat out = cloud.rowwise() - cloud.colwise().mean();
  Scalar r = out.rowwise().norm().maxCoeff();
  if (r > 0.0) out /= r;
  return out;
}

std::vector<int> fps(const RowMat& cloud, int m, uint64_t seed, FpsStart start) {
  check_cloud("fps", cloud);
  int n = static_cast<int>(cloud.rows());
  if (m < 1 || m > n) {
    throw std::invalid_argument("fps: m=" + std::to_string(m) + " out of range for N=" +
                                std::to_string(n));
  }
  int first = 0;
  if (start == FpsStart::seeded) {
    Rng rng(seed);
    first = rng.uniform_int(n);
  }
  std::vector<int> picked;
  picked.reserve(m);
  picked.push_back(first);
  std::vector<char> chosen(n, 0);
  chosen[first] = 1;
  Eigen::VectorXd mind = sq_dists(cloud, cloud.row(first));
  for (int step = 1; step < m; ++step) {
    int best = -1;
    Scalar bd = -1.0;
    for (int i = 0; i < n; ++i) {
      if (!chosen[i] && mind[i] > bd) {  // strict: ties keep the lowest index
        bd = mind[i];
        best = i;
      }
    }
    picked.push_back(best);
    chosen[best] = 1;
    mind = mind.cwiseMin(sq_dists(cloud, cloud.row(best)));
  }
  return picked;
}

GroupedCloud knn_group(const RowMat& cloud, const std::vector<int>& centers, int k) {
  check_cloud("knn_group", cloud);
  int n = static_cast<int>(cloud.rows());
  if (k < 1 || k > n) {
    throw std::invalid_argument("knn_group: k=" + std::to_string(k) + " out of range for N=" +
                                std::to_string(n));
  }
  GroupedCloud out;
  int m = static_cast<int>(centers.size());
  out.centers.resize(m, 3);
  out.groups.reserve(m);
  out.center_indices = centers;
  out.neighbor_indices.resize(m);
  std::vector<std::pair<Scalar, int>> order(n);
  for (int ci = 0; ci < m; ++ci) {
    int c = centers[ci];
    if (c < 0 || c >= n) {
      throw std::invalid_argument("knn_group: center index " + std::to_string(c) +
                                  " out of range for N=" + std::to_string(n));
    }
    out.centers.row(ci) = cloud.row(c);
    Eigen::VectorXd d = sq_dists(cloud, cloud.row(c));
    for (int i = 0; i < n; ++i) order[i] = {d[i], i};
    std::partial_sort(order.begin(), order.begin() + k, order.end());
    RowMat group(k, 3);
    out.neighbor_indices[ci].resize(k);
    for (int j = 0; j < k; ++j) {
      int idx = order[j].second;
      out.neighbor_indices[ci][j] = idx;
      group.row(j) = cloud.row(idx) - cloud.row(c);
    }
    out.groups.push_back(std::move(group));
  }
  return out;
}

namespace {

// Nearest row of b for every row of a, ties to the lowest index.
std::vector<int> nearest_indices(const RowMat& a, const RowMat& b) {
  std::vector<int> idx(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    Eigen::VectorXd d = (b.rowwise() - a.row(i)).rowwise().squaredNorm();
    int best = 0;
    for (Eigen::Index j = 1; j < b.rows(); ++j) {
      if (d[j] < d[best]) best = static_cast<int>(j);
    }
    idx[i] = best;
  }
  return idx;
}

Scalar chamfer_value(const RowMat& a, const RowMat& b, const std::vector<int>& na,
                     const std::vector<int>& nb) {
  Scalar sa = 0.0, sb = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) sa += (a.row(i) - b.row(na[i])).squaredNorm();
  for (Eigen::Index j = 0; j < b.rows(); ++j) sb += (b.row(j) - a.row(nb[j])).squaredNorm();
  return sa / static_cast<Scalar>(a.rows()) + sb / static_cast<Scalar>(b.rows());
}

}  // namespace

Scalar chamfer(const RowMat& a, const RowMat& b) {
  check_cloud("chamfer", a);
  check_cloud("chamfer", b);
  return chamfer_value(a, b, nearest_indices(a, b), nearest_indices(b, a));
}

diff::Tensor chamfer_diff(const diff::Tensor& a, const diff::Tensor& b) {
  using diff::Tensor;
  RowMat am = a.mat(), bm = b.mat();
  check_cloud("chamfer", am);
  check_cloud("chamfer", bm);
  auto na = std::make_shared<std::vector<int>>(nearest_indices(am, bm));
  auto nb = std::make_shared<std::vector<int>>(nearest_indices(bm, am));
  Array v(1);
  v[0] = chamfer_value(am, bm, *na, *nb);
  Tensor out = Tensor::from_array({1}, v, a.requires_grad() || b.requires_grad());
  if (out.requires_grad() && diff::Tape::active() != nullptr) {
    diff::Tape::active()->push("chamfer", [a, b, out, na, nb]() {
      Scalar g = out.grad()[0];
      RowMat am = a.mat(), bm = b.mat();
      Scalar wa = 2.0 * g / static_cast<Scalar>(am.rows());
      Scalar wb = 2.0 * g / static_cast<Scalar>(bm.rows());
      RowMat ga = RowMat::Zero(am.rows(), 3), gb = RowMat::Zero(bm.rows(), 3);
      for (Eigen::Index i = 0; i < am.rows(); ++i) {
        Eigen::RowVector3d diffv = am.row(i) - bm.row((*na)[i]);
        ga.row(i) += wa * diffv;
        gb.row((*na)[i]) -= wa * diffv;
      }
      for (Eigen::Index j = 0; j < bm.rows(); ++j) {
        Eigen::RowVector3d diffv = bm.row(j) - am.row((*nb)[j]);
        gb.row(j) += wb * diffv;
        ga.row((*nb)[j]) -= wb * diffv;
      }
      if (a.requires_grad()) a.add_grad_mat(ga);
      if (b.requires_grad()) b.add_grad_mat(gb);
    });
  }
  return out;
}

diff::Tensor chamfer_grouped(const diff::Tensor& a, const RowMat& b, int groups) {
  using diff::Tensor;
  RowMat am = a.mat();
  check_cloud("chamfer_grouped", am);
  check_cloud("chamfer_grouped", b);
  if (groups < 1 || am.rows() % groups != 0 || b.rows() % groups != 0) {
    throw std::invalid_argument("chamfer_grouped: " + std::to_string(am.rows()) + " and " +
                                std::to_string(b.rows()) +
                                " rows do not split into " + std::to_string(groups) + " groups");
  }
  const Eigen::Index ka = am.rows() / groups, kb = b.rows() / groups;
  // Block-local argmins, found once at forward time and replayed in backward.
  auto na = std::make_shared<std::vector<int>>(am.rows());
  auto nb = std::make_shared<std::vector<int>>(b.rows());
  Array v(groups);
  for (int g = 0; g < groups; ++g) {
    RowMat ag = am.middleRows(g * ka, ka), bg = b.middleRows(g * kb, kb);
    std::vector<int> nag = nearest_indices(ag, bg), nbg = nearest_indices(bg, ag);
    std::copy(nag.begin(), nag.end(), na->begin() + g * ka);
    std::copy(nbg.begin(), nbg.end(), nb->begin() + g * kb);
    v[g] = chamfer_value(ag, bg, nag, nbg);
  }
  Tensor out = Tensor::from_array({groups}, std::move(v), a.requires_grad());
  if (out.requires_grad() && diff::Tape::active() != nullptr) {
    auto bt = std::make_shared<RowMat>(b);
    diff::Tape::active()->push("chamfer", [a, out, na, nb, bt, groups, ka, kb]() {
      RowMat am = a.mat();
      RowMat ga = RowMat::Zero(am.rows(), 3);
      for (int g = 0; g < groups; ++g) {
        Scalar gy = out.grad()[g];
        Scalar wa = 2.0 * gy / static_cast<Scalar>(ka);
        Scalar wb = 2.0 * gy / static_cast<Scalar>(kb);
        for (Eigen::Index i = 0; i < ka; ++i) {
          Eigen::Index ai = g * ka + i, bi = g * kb + (*na)[ai];
          ga.row(ai) += wa * (am.row(ai) - bt->row(bi));
        }
        for (Eigen::Index j = 0; j < kb; ++j) {
          Eigen::Index bj = g * kb + j, aj = g * ka + (*nb)[bj];
          ga.row(aj) += wb * (am.row(aj) - bt->row(bj));
        }
      }
      a.add_grad_mat(ga);
    });
  }
  return out;
}

}  // namespace cmah::geom
