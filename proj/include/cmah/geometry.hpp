#pragma once

#include <vector>

#include "cmah/common.hpp"
#include "cmah/tensor.hpp"

namespace cmah::geom {

// Point clouds are dense N×3 row matrices throughout.

// Center the centroid at the origin and scale the farthest point onto the
// unit sphere. A cloud of coincident points collapses to all zeros.
RowMat normalize(const RowMat& cloud);

enum class FpsStart { seeded, index0 };

// Farthest point sampling. The first center is a seeded uniform draw
// (FpsStart::seeded) or index 0 (FpsStart::index0); each following center
// maximizes the min distance to the chosen set, ties to the lowest index.
std::vector<int> fps(const RowMat& cloud, int m, uint64_t seed, FpsStart start = FpsStart::seeded);

struct GroupedCloud {
  RowMat centers;                                  // M×3
  std::vector<RowMat> groups;                      // M blocks of k×3, center-relative
  std::vector<int> center_indices;                 // M indices into the source cloud
  std::vector<std::vector<int>> neighbor_indices;  // M lists of k source indices
};

// k nearest source points per center (the center itself is eligible),
// distance ties broken by lower source index.
GroupedCloud knn_group(const RowMat& cloud, const std::vector<int>& centers, int k);

// Symmetric squared-L2 Chamfer distance: mean over a of the squared distance
// to the nearest b, plus the same with roles swapped.
Scalar chamfer(const RowMat& a, const RowMat& b);

// Differentiable Chamfer over M×3 / L×3 tensors; forward value matches
// chamfer() exactly, backward routes through the nearest-neighbor argmins.
diff::Tensor chamfer_diff(const diff::Tensor& a, const diff::Tensor& b);

// Independent Chamfer per consecutive block: a is (G*ka)×3 predictions, b is
// (G*kb)×3 constant targets; returns [G], entry g matching
// chamfer(a_block_g, b_block_g). Gradients reach only a.
diff::Tensor chamfer_grouped(const diff::Tensor& a, const RowMat& b, int groups);

}  // namespace cmah::geom
