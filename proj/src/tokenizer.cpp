#include "cmah/tokenizer.hpp"

#include <cmath>
#include <stdexcept>

#include "cmah/ops.hpp"

namespace cmah::tok {

using diff::Tensor;

RowMat patchify(const Image& img, int patch) {
  if (patch <= 0 || img.h <= 0 || img.w <= 0 || img.h % patch != 0 || img.w % patch != 0) {
    throw std::invalid_argument("patchify: image " + std::to_string(img.h) + "x" +
                                std::to_string(img.w) + " not divisible by patch " +
                                std::to_string(patch));
  }
  if (img.pixels.size() != static_cast<Eigen::Index>(img.h) * img.w * 3) {
    throw std::invalid_argument("patchify: pixel buffer does not match h*w*3");
  }
  int gh = img.h / patch, gw = img.w / patch;
  RowMat out(gh * gw, patch * patch * 3);
  for (int pr = 0; pr < gh; ++pr) {
    for (int pc = 0; pc < gw; ++pc) {
      Scalar* dst = out.row(pr * gw + pc).data();
      for (int r = 0; r < patch; ++r) {
        for (int c = 0; c < patch; ++c) {
          const Scalar* src = img.pixels.data() + (((pr * patch + r) * img.w) + pc * patch + c) * 3;
          *dst++ = src[0];
          *dst++ = src[1];
          *dst++ = src[2];
        }
      }
    }
  }
  return out;
}

Image unpatchify(const RowMat& patches, int h, int w, int patch) {
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw std::invalid_argument("unpatchify: grid " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by patch " + std::to_string(patch));
  }
  int gh = h / patch, gw = w / patch;
  if (patches.rows() != gh * gw || patches.cols() != patch * patch * 3) {
    throw std::invalid_argument("unpatchify: patch matrix shape does not match grid");
  }
  Image img;
  img.h = h;
  img.w = w;
  img.pixels = Array::Zero(static_cast<Eigen::Index>(h) * w * 3);
  for (int pr = 0; pr < gh; ++pr) {
    for (int pc = 0; pc < gw; ++pc) {
      const Scalar* src = patches.row(pr * gw + pc).data();
      for (int r = 0; r < patch; ++r) {
        for (int c = 0; c < patch; ++c) {
          Scalar* dst = img.pixels.data() + (((pr * patch + r) * w) + pc * patch + c) * 3;
          dst[0] = *src++;
          dst[1] = *src++;
          dst[2] = *src++;
        }
      }
    }
  }
  return img;
}

ImageEmbedParams ImageEmbedParams::init(int patch_dim, int m, int d, Rng& rng) {
  ImageEmbedParams p;
  p.w = nn::init_weight({patch_dim, d}, rng);
  p.b = nn::init_zeros({d});
  p.pos = nn::init_weight({m, d}, rng);
  return p;
}

void ImageEmbedParams::register_into(nn::ParamMap& reg, const std::string& prefix) const {
  reg.emplace_back(prefix + ".w", w);
  reg.emplace_back(prefix + ".b", b);
  reg.emplace_back(prefix + ".pos", pos);
}

PointNetParams PointNetParams::init(int d, Rng& rng) {
  PointNetParams p;
  p.w1 = nn::init_linear(3, d, rng);
  p.b1 = nn::init_zeros({d});
  p.w2 = nn::init_linear(d, 2 * d, rng);
  p.b2 = nn::init_zeros({2 * d});
  p.w3 = nn::init_linear(2 * d, 2 * d, rng);
  p.b3 = nn::init_zeros({2 * d});
  p.w4 = nn::init_linear(2 * d, d, rng);
  p.b4 = nn::init_zeros({d});
  return p;
}

void PointNetParams::register_into(nn::ParamMap& reg, const std::string& prefix) const {
  reg.emplace_back(prefix + ".w1", w1);
  reg.emplace_back(prefix + ".b1", b1);
  reg.emplace_back(prefix + ".w2", w2);
  reg.emplace_back(prefix + ".b2", b2);
  reg.emplace_back(prefix + ".w3", w3);
  reg.emplace_back(prefix + ".b3", b3);
  reg.emplace_back(prefix + ".w4", w4);
  reg.emplace_back(prefix + ".b4", b4);
}

PointPosParams PointPosParams::init(int d, Rng& rng) {
  PointPosParams p;
  p.w1 = nn::init_linear(3, d, rng);
  p.b1 = nn::init_zeros({d});
  p.w2 = nn::init_linear(d, d, rng);
  p.b2 = nn::init_zeros({d});
  return p;
}

void PointPosParams::register_into(nn::ParamMap& reg, const std::string& prefix) const {
  reg.emplace_back(prefix + ".w1", w1);
  reg.emplace_back(prefix + ".b1", b1);
  reg.emplace_back(prefix + ".w2", w2);
  reg.emplace_back(prefix + ".b2", b2);
}

Tensor image_tokens(const Tensor& patches, const ImageEmbedParams& p) {
  if (patches.cols() != p.w.rows()) {
    throw std::invalid_argument("image_tokens: patch dim " + std::to_string(patches.cols()) +
                                " does not match projection rows " + std::to_string(p.w.rows()));
  }
  int m = p.pos.rows();
  if (patches.rows() % m != 0) {
    throw std::invalid_argument("image_tokens: row count " + std::to_string(patches.rows()) +
                                " is not a multiple of token count " + std::to_string(m));
  }
  Tensor proj = nn::linear(patches, p.w, p.b);
  int groups = patches.rows() / m;
  if (groups == 1) return diff::add(proj, p.pos);
  std::vector<int> idx(static_cast<size_t>(groups) * m);
  for (int g = 0; g < groups; ++g)
    for (int i = 0; i < m; ++i) idx[static_cast<size_t>(g) * m + i] = i;
  return diff::add(proj, diff::embedding_lookup(p.pos, idx));
}

Tensor pointnet_tokens(const Tensor& rel, int k, const PointNetParams& p) {
  if (rel.cols() != 3) {
    throw std::invalid_argument("pointnet_tokens: expected 3-wide coordinates, got " +
                                std::to_string(rel.cols()));
  }
  Tensor h = diff::relu(nn::linear(rel, p.w1, p.b1));
  h = nn::linear(h, p.w2, p.b2);
  Tensor pooled = diff::group_max(h, k);
  Tensor t = diff::relu(nn::linear(pooled, p.w3, p.b3));
  return nn::linear(t, p.w4, p.b4);
}

Tensor point_positions(const Tensor& centers, const PointPosParams& p) {
  Tensor h = diff::gelu(nn::linear(centers, p.w1, p.b1));
  return nn::linear(h, p.w2, p.b2);
}

TokenSet embed_image(const RowMat& patches, const ImageEmbedParams& p) {
  TokenSet ts;
  ts.modality = Modality::image;
  ts.stage = Stage::raw;
  if (patches.rows() != p.pos.rows()) {
    throw std::invalid_argument("embed_image: got " + std::to_string(patches.rows()) +
                                " patches for a table of " + std::to_string(p.pos.rows()));
  }
  ts.positions = p.pos;
  ts.tokens = image_tokens(Tensor::from_matrix(patches), p);
  return ts;
}

PointTokens embed_points(const RowMat& cloud, int m_point, int k_tok, const PointNetParams& pn,
                         const PointPosParams& pp, uint64_t fps_seed, geom::FpsStart start) {
  PointTokens out;
  std::vector<int> centers = geom::fps(cloud, m_point, fps_seed, start);
  out.grouping = geom::knn_group(cloud, centers, k_tok);
  RowMat rel(static_cast<Eigen::Index>(m_point) * k_tok, 3);
  for (int i = 0; i < m_point; ++i) rel.middleRows(static_cast<Eigen::Index>(i) * k_tok, k_tok) = out.grouping.groups[i];
  Tensor tokens_pre = pointnet_tokens(Tensor::from_matrix(rel), k_tok, pn);
  Tensor pos = point_positions(Tensor::from_matrix(out.grouping.centers), pp);
  out.tokens.modality = Modality::point;
  out.tokens.stage = Stage::raw;
  out.tokens.positions = pos;
  out.tokens.tokens = diff::add(tokens_pre, pos);
  return out;
}

int mask_count(double ratio, int m) {
  if (ratio < 0.0 || ratio >= 1.0) {
    throw std::invalid_argument("mask_count: ratio " + std::to_string(ratio) + " outside [0,1)");
  }
  long c = std::lround(ratio * m);
  if (c < 0) c = 0;
  if (c > m - 1) c = m - 1;  // keep at least one token visible
  return static_cast<int>(c);
}

std::vector<int> draw_mask(int m, int count, Rng& rng) {
  std::vector<int> perm = rng.permutation(m);
  std::vector<int> masked(perm.begin(), perm.begin() + count);
  std::sort(masked.begin(), masked.end());
  return masked;
}

MaskRecord make_mask_record(int m, double ratio, uint64_t seed, const RowMat& targets_full) {
  if (targets_full.rows() != m) {
    throw std::invalid_argument("make_mask_record: " + std::to_string(targets_full.rows()) +
                                " target rows for " + std::to_string(m) + " tokens");
  }
  Rng rng(seed);
  int count = mask_count(ratio, m);
  MaskRecord rec;
  rec.masked = draw_mask(m, count, rng);
  rec.visible.reserve(m - count);
  size_t mi = 0;
  for (int i = 0; i < m; ++i) {
    if (mi < rec.masked.size() && rec.masked[mi] == i) {
      ++mi;
    } else {
      rec.visible.push_back(i);
    }
  }
  rec.targets.resize(count, targets_full.cols());
  for (int i = 0; i < count; ++i) rec.targets.row(i) = targets_full.row(rec.masked[i]);
  return rec;
}

std::pair<TokenSet, MaskRecord> apply_mask(const TokenSet& ts, const RowMat& targets_full,
                                           double ratio, uint64_t seed) {
  if (ts.stage != Stage::raw) throw std::invalid_argument("apply_mask: token set must be raw");
  MaskRecord rec = make_mask_record(ts.count(), ratio, seed, targets_full);

  TokenSet vis;
  vis.modality = ts.modality;
  vis.stage = Stage::raw;
  if (rec.visible.empty()) throw std::logic_error("apply_mask: no visible tokens left");
  vis.tokens = diff::embedding_lookup(ts.tokens, rec.visible);
  vis.positions = diff::embedding_lookup(ts.positions, rec.visible);
  return {std::move(vis), std::move(rec)};
}

}  // namespace cmah::tok
