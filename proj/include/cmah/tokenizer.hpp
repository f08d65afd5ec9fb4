#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cmah/common.hpp"
#include "cmah/geometry.hpp"
#include "cmah/nn.hpp"
#include "cmah/tensor.hpp"

namespace cmah::tok {

// Raw image: h·w·3 values in [0,1], row-major with (row, column, channel)
// fastest-to-slowest reversed, i.e. index = ((r*w)+c)*3+ch.
struct Image {
  int h = 0, w = 0;
  Array pixels;
};

// Split into non-overlapping patch×patch squares, raster order over the patch
// grid; each row flattens its square in (row, column, channel) order.
RowMat patchify(const Image& img, int patch);
Image unpatchify(const RowMat& patches, int h, int w, int patch);

enum class Modality { image, point };
enum class Stage { raw, encoded, fused, decoded };

struct TokenSet {
  diff::Tensor tokens;     // M×D, positional embedding already added
  diff::Tensor positions;  // M×D, kept for reuse at the decoder input
  Modality modality = Modality::image;
  Stage stage = Stage::raw;
  int count() const { return tokens.rows(); }
};

struct MaskRecord {
  std::vector<int> masked;   // original indices, ascending
  std::vector<int> visible;  // ascending (original relative order)
  RowMat targets;            // M^mask × target-dim ground truth rows
};

struct ImageEmbedParams {
  diff::Tensor w;    // patch_dim × D
  diff::Tensor b;    // D
  diff::Tensor pos;  // M × D learnable table
  static ImageEmbedParams init(int patch_dim, int m, int d, Rng& rng);
  void register_into(nn::ParamMap& reg, const std::string& prefix) const;
};

// Shared per-point MLP, channel-wise max pool over each group, then a
// per-token MLP: 3 -> D -> 2D -> pool -> 2D -> D.
struct PointNetParams {
  diff::Tensor w1, b1, w2, b2, w3, b3, w4, b4;
  static PointNetParams init(int d, Rng& rng);
  void register_into(nn::ParamMap& reg, const std::string& prefix) const;
};

// Positional MLP of the 3D center coordinates: 3 -> D -> D with gelu.
struct PointPosParams {
  diff::Tensor w1, b1, w2, b2;
  static PointPosParams init(int d, Rng& rng);
  void register_into(nn::ParamMap& reg, const std::string& prefix) const;
};

// Packed kernels: inputs carrying G·M (or G·M·k) rows are processed as G
// independent blocks, so one call serves a whole batch.
diff::Tensor image_tokens(const diff::Tensor& patches, const ImageEmbedParams& p);
diff::Tensor pointnet_tokens(const diff::Tensor& rel, int k, const PointNetParams& p);
diff::Tensor point_positions(const diff::Tensor& centers, const PointPosParams& p);

TokenSet embed_image(const RowMat& patches, const ImageEmbedParams& p);

struct PointTokens {
  TokenSet tokens;
  geom::GroupedCloud grouping;  // reconstruction targets live here
};
PointTokens embed_points(const RowMat& cloud, int m_point, int k_tok, const PointNetParams& pn,
                         const PointPosParams& pp, uint64_t fps_seed,
                         geom::FpsStart start = geom::FpsStart::index0);

// round(ratio·M) clamped so at least one token stays visible.
int mask_count(double ratio, int m);

// Sorted masked-index subset of size `count`, drawn without replacement.
std::vector<int> draw_mask(int m, int count, Rng& rng);

// Draw a mask and collect the masked/visible index partition plus the masked
// target rows; the index bookkeeping shared by apply_mask and batched paths.
MaskRecord make_mask_record(int m, double ratio, uint64_t seed, const RowMat& targets_full);

// Split a raw TokenSet into its visible part plus the mask record.
// `targets_full` holds the per-token ground truth (pixel patches or grouped
// coordinates) for all M tokens; the record keeps only the masked rows.
std::pair<TokenSet, MaskRecord> apply_mask(const TokenSet& ts, const RowMat& targets_full,
                                           double ratio, uint64_t seed);

}  // namespace cmah::tok
