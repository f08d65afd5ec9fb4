#include "cmah/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "cmah/geometry.hpp"
#include "cmah/ops.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint and code files are written in native little-endian order");

namespace cmah::model {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

int rows_per_group(const Tensor& t, int groups, const char* what) {
  require(groups > 0, std::string(what) + ": groups must be positive");
  require(t.rows() % groups == 0, std::string(what) + ": " + std::to_string(t.rows()) +
                                      " rows do not split into " + std::to_string(groups) +
                                      " groups");
  return static_cast<int>(t.rows()) / groups;
}

}  // namespace

AttnParams AttnParams::init(int d, Rng& rng) {
  AttnParams p;
  p.wq = nn::init_linear(d, d, rng);
  p.bq = nn::init_zeros({d});
  p.wk = nn::init_linear(d, d, rng);
  p.bk = nn::init_zeros({d});
  p.wv = nn::init_linear(d, d, rng);
  p.bv = nn::init_zeros({d});
  p.wo = nn::init_linear(d, d, rng);
  p.bo = nn::init_zeros({d});
  return p;
}

void AttnParams::register_into(nn::ParamMap& reg, const std::string& prefix) const {
  reg.emplace_back(prefix + ".wq", wq);
  reg.emplace_back(prefix + ".bq", bq);
  reg.emplace_back(prefix + ".wk", wk);
  reg.emplace_back(prefix + ".bk", bk);
  reg.emplace_back(prefix + ".wv", wv);
  reg.emplace_back(prefix + ".bv", bv);
  reg.emplace_back(prefix + ".wo", wo);
  reg.emplace_back(prefix + ".bo", bo);
}

FfnParams FfnParams::init(int d, int mult, Rng& rng) {
  FfnParams p;
  p.w1 = nn::init_linear(d, mult * d, rng);
  p.b1 = nn::init_zeros({mult * d});
  p.w2 = nn::init_linear(mult * d, d, rng);
  p.b2 = nn::init_zeros({d});
  return p;
}

void FfnParams::register_into(nn::ParamMap& reg, const std::string& prefix) const {
  reg.emplace_back(prefix + ".w1", w1);
  reg.emplace_back(prefix + ".b1", b1);
  reg.emplace_back(prefix + ".w2", w2);
  reg.emplace_back(prefix + ".b2", b2);
}

StackParams StackParams::init(int depth, int d, int mult, Rng& rng) {
  StackParams s;
  s.blocks.reserve(depth);
  for (int i = 0; i < depth; ++i) {
    BlockParams b;
    b.attn = AttnParams::init(d, rng);
    b.ffn = FfnParams::init(d, mult, rng);
    s.blocks.push_back(std::move(b));
  }
  return s;
}

void StackParams::register_into(nn::ParamMap& reg, const std::string& prefix) const {
  for (size_t i = 0; i < blocks.size(); ++i) {
    std::string base = prefix + ".block" + std::to_string(i);
    blocks[i].attn.register_into(reg, base + ".attn");
    blocks[i].ffn.register_into(reg, base + ".ffn");
  }
}

Tensor attn_forward(const Tensor& x, const AttnParams& p, int heads, int len) {
  Tensor n = diff::layernorm(x);
  Tensor q = nn::linear(n, p.wq, p.bq);
  Tensor k = nn::linear(n, p.wk, p.bk);
  Tensor v = nn::linear(n, p.wv, p.bv);
  Tensor o = diff::scaled_dot_product_attention(q, k, v, heads, len, len);
  return diff::add(x, nn::linear(o, p.wo, p.bo));
}

Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
  Tensor h = diff::gelu(nn::linear(diff::layernorm(x), p.w1, p.b1));
  return diff::add(x, nn::linear(h, p.w2, p.b2));
}

Tensor stack_forward(const Tensor& x, const StackParams& p, int heads, int len) {
  Tensor h = x;
  for (const BlockParams& b : p.blocks) {
    h = attn_forward(h, b.attn, heads, len);
    h = ffn_forward(h, b.ffn);
  }
  if (!p.blocks.empty()) h = diff::layernorm(h);
  return h;
}

HashParams HashParams::init(int d, int bits, Rng& rng) {
  HashParams p;
  p.w1 = nn::init_linear(d, d, rng);
  p.b1 = nn::init_zeros({d});
  p.w2 = nn::init_linear(d, bits, rng);
  p.b2 = nn::init_zeros({bits});
  return p;
}

void HashParams::register_into(nn::ParamMap& reg, const std::string& prefix) const {
  reg.emplace_back(prefix + ".w1", w1);
  reg.emplace_back(prefix + ".b1", b1);
  reg.emplace_back(prefix + ".w2", w2);
  reg.emplace_back(prefix + ".b2", b2);
}

Tensor hash_head(const Tensor& cls, const HashParams& p) {
  Tensor h = diff::relu(nn::linear(cls, p.w1, p.b1));
  return diff::tanh(nn::linear(h, p.w2, p.b2));
}

FusionParams FusionParams::init(int d_q, int d_kv, int d_fus, int mult, Rng& rng) {
  FusionParams p;
  p.q_self = AttnParams::init(d_q, rng);
  p.kv_self = AttnParams::init(d_kv, rng);
  p.w_in = nn::init_linear(d_kv, d_fus, rng);
  p.b_in = nn::init_zeros({d_fus});
  p.wq = nn::init_linear(d_q, d_fus, rng);
  p.bq = nn::init_zeros({d_fus});
  p.wk = nn::init_linear(d_fus, d_fus, rng);
  p.bk = nn::init_zeros({d_fus});
  p.wv = nn::init_linear(d_fus, d_fus, rng);
  p.bv = nn::init_zeros({d_fus});
  p.wo = nn::init_linear(d_fus, d_fus, rng);
  p.bo = nn::init_zeros({d_fus});
  p.ffn = FfnParams::init(d_fus, mult, rng);
  return p;
}

void FusionParams::register_into(nn::ParamMap& reg, const std::string& prefix) const {
  q_self.register_into(reg, prefix + ".q_self");
  kv_self.register_into(reg, prefix + ".kv_self");
  reg.emplace_back(prefix + ".w_in", w_in);
  reg.emplace_back(prefix + ".b_in", b_in);
  reg.emplace_back(prefix + ".wq", wq);
  reg.emplace_back(prefix + ".bq", bq);
  reg.emplace_back(prefix + ".wk", wk);
  reg.emplace_back(prefix + ".bk", bk);
  reg.emplace_back(prefix + ".wv", wv);
  reg.emplace_back(prefix + ".bv", bv);
  reg.emplace_back(prefix + ".wo", wo);
  reg.emplace_back(prefix + ".bo", bo);
  ffn.register_into(reg, prefix + ".ffn");
}

Tensor fuse_forward(const Tensor& vis, const Tensor& other, const FusionParams& p, int q_heads,
                    int kv_heads, int cross_heads, int groups) {
  int lq = rows_per_group(vis, groups, "fuse_forward");
  int lkv = rows_per_group(other, groups, "fuse_forward");
  Tensor xs = attn_forward(vis, p.q_self, q_heads, lq);
  Tensor ys = attn_forward(other, p.kv_self, kv_heads, lkv);
  Tensor yp = nn::linear(ys, p.w_in, p.b_in);
  Tensor qp = nn::linear(diff::layernorm(xs), p.wq, p.bq);
  Tensor yn = diff::layernorm(yp);
  Tensor k = nn::linear(yn, p.wk, p.bk);
  Tensor v = nn::linear(yn, p.wv, p.bv);
  Tensor o = diff::scaled_dot_product_attention(qp, k, v, cross_heads, lq, lkv);
  Tensor z = diff::add(qp, nn::linear(o, p.wo, p.bo));
  return ffn_forward(z, p.ffn);
}

DecoderParams DecoderParams::init(int in_width, int width, int depth, int mult, int out_dim,
                                  Rng& rng) {
  DecoderParams p;
  p.has_adapter = in_width != width;
  if (p.has_adapter) {
    p.adapter_w = nn::init_linear(in_width, width, rng);
    p.adapter_b = nn::init_zeros({width});
  }
  p.mask_token = nn::init_weight({1, width}, rng);
  p.stack = StackParams::init(depth, width, mult, rng);
  p.head_w = nn::init_linear(width, out_dim, rng);
  p.head_b = nn::init_zeros({out_dim});
  return p;
}

void DecoderParams::register_into(nn::ParamMap& reg, const std::string& prefix) const {
  if (has_adapter) {
    reg.emplace_back(prefix + ".adapter_w", adapter_w);
    reg.emplace_back(prefix + ".adapter_b", adapter_b);
  }
  reg.emplace_back(prefix + ".mask_token", mask_token);
  stack.register_into(reg, prefix + ".stack");
  reg.emplace_back(prefix + ".head_w", head_w);
  reg.emplace_back(prefix + ".head_b", head_b);
}

CmahModel::CmahModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  Rng rng(seed_mix(seed, 0x6d6f64656cULL));
  img_embed_ = tok::ImageEmbedParams::init(cfg_.patch_dim(), cfg_.m_image(), cfg_.d_image, rng);
  cls_image_ = nn::init_weight({1, cfg_.d_image}, rng);
  img_stack_ = StackParams::init(cfg_.image_depth, cfg_.d_image, cfg_.ffn_mult, rng);
  pointnet_ = tok::PointNetParams::init(cfg_.d_point, rng);
  point_pos_ = tok::PointPosParams::init(cfg_.d_point, rng);
  cls_point_ = nn::init_weight({1, cfg_.d_point}, rng);
  point_stack_ = StackParams::init(cfg_.point_depth, cfg_.d_point, cfg_.ffn_mult, rng);
  hash_image_ = HashParams::init(cfg_.d_image, cfg_.code_bits, rng);
  hash_point_ = HashParams::init(cfg_.d_point, cfg_.code_bits, rng);
  fuse_image_ = FusionParams::init(cfg_.d_image, cfg_.d_point, cfg_.d_fusion, cfg_.ffn_mult, rng);
  fuse_point_ = FusionParams::init(cfg_.d_point, cfg_.d_image, cfg_.d_fusion, cfg_.ffn_mult, rng);
  dec_image_ = DecoderParams::init(cfg_.d_fusion, cfg_.d_image, cfg_.image_dec_depth,
                                   cfg_.ffn_mult, cfg_.patch_dim(), rng);
  dec_point_ = DecoderParams::init(cfg_.d_fusion, cfg_.d_point, cfg_.point_dec_depth,
                                   cfg_.ffn_mult, cfg_.k_tok * 3, rng);

  img_embed_.register_into(params_, "image.embed");
  params_.emplace_back("image.cls", cls_image_);
  img_stack_.register_into(params_, "image.stack");
  pointnet_.register_into(params_, "point.embed.net");
  point_pos_.register_into(params_, "point.embed.pos");
  params_.emplace_back("point.cls", cls_point_);
  point_stack_.register_into(params_, "point.stack");
  hash_image_.register_into(params_, "hash.image");
  hash_point_.register_into(params_, "hash.point");
  fuse_image_.register_into(params_, "fusion.image");
  fuse_point_.register_into(params_, "fusion.point");
  dec_image_.register_into(params_, "dec.image");
  dec_point_.register_into(params_, "dec.point");
}

tok::TokenSet CmahModel::tokenize_image(const tok::Image& img) const {
  require(img.h == cfg_.image_size && img.w == cfg_.image_size,
          "tokenize_image: image " + std::to_string(img.h) + "x" + std::to_string(img.w) +
              " does not match configured size " + std::to_string(cfg_.image_size));
  return tok::embed_image(tok::patchify(img, cfg_.patch), img_embed_);
}

tok::PointTokens CmahModel::tokenize_points(const RowMat& cloud, uint64_t fps_seed,
                                            bool seeded_fps) const {
  return tok::embed_points(cloud, cfg_.m_point, cfg_.k_tok, pointnet_, point_pos_, fps_seed,
                           seeded_fps ? geom::FpsStart::seeded : geom::FpsStart::index0);
}

Encoded CmahModel::encode_packed(const Tensor& tokens, const Tensor& cls_token,
                                 const StackParams& stack, int heads, int groups) const {
  int m = rows_per_group(tokens, groups, "encode");
  // Class token first in every group; the shared row sits at table index 0,
  // so its gradient accumulates across all groups.
  Tensor table = diff::concat({cls_token, tokens});
  std::vector<int> idx;
  idx.reserve(static_cast<size_t>(groups) * (m + 1));
  for (int g = 0; g < groups; ++g) {
    idx.push_back(0);
    for (int t = 0; t < m; ++t) idx.push_back(1 + g * m + t);
  }
  Tensor x = stack_forward(diff::embedding_lookup(table, idx), stack, heads, m + 1);
  std::vector<int> cls_idx(groups);
  std::vector<int> tok_idx(static_cast<size_t>(groups) * m);
  for (int g = 0; g < groups; ++g) {
    cls_idx[g] = g * (m + 1);
    for (int t = 0; t < m; ++t) tok_idx[static_cast<size_t>(g) * m + t] = g * (m + 1) + 1 + t;
  }
  Encoded e;
  e.cls = diff::embedding_lookup(x, cls_idx);
  e.tokens = diff::embedding_lookup(x, tok_idx);
  return e;
}

Encoded CmahModel::encode(const tok::TokenSet& ts) const {
  if (ts.modality == tok::Modality::image)
    return encode_packed(ts.tokens, cls_image_, img_stack_, cfg_.image_heads, 1);
  return encode_packed(ts.tokens, cls_point_, point_stack_, cfg_.point_heads, 1);
}

Tensor CmahModel::hash_forward(const Tensor& cls, tok::Modality modality) const {
  return hash_head(cls, modality == tok::Modality::image ? hash_image_ : hash_point_);
}

Tensor CmahModel::fuse(const Tensor& vis, const Tensor& other_full, tok::Modality query_side,
                       int groups) const {
  ++fusion_calls_;
  if (query_side == tok::Modality::image) {
    return fuse_forward(vis, other_full, fuse_image_, cfg_.image_heads, cfg_.point_heads,
                        cfg_.fusion_heads, groups);
  }
  return fuse_forward(vis, other_full, fuse_point_, cfg_.point_heads, cfg_.image_heads,
                      cfg_.fusion_heads, groups);
}

Tensor CmahModel::decode_packed(const Tensor& vis_tokens, const std::vector<tok::MaskRecord>& recs,
                                const Tensor& positions, const DecoderParams& p, int heads,
                                int m_full, int groups) const {
  ++decoder_calls_;
  require(static_cast<int>(recs.size()) == groups, "decode: one mask record per group required");
  Tensor x_vis = vis_tokens;
  if (x_vis.cols() != p.mask_token.cols()) {
    if (!p.has_adapter) {
      throw std::invalid_argument("decode: input width " + std::to_string(x_vis.cols()) +
                                  " does not match decoder width " +
                                  std::to_string(p.mask_token.cols()));
    }
    x_vis = nn::linear(x_vis, p.adapter_w, p.adapter_b);
  }
  int m_vis = rows_per_group(x_vis, groups, "decode");
  require(positions.rows() == static_cast<Eigen::Index>(groups) * m_full &&
              positions.cols() == p.mask_token.cols(),
          "decode: positional embedding shape mismatch");
  // Rebuild the full sequence: visible rows from their processed slot, masked
  // rows from the shared mask token appended as the last table row.
  Tensor table = diff::concat({x_vis, p.mask_token});
  const int mask_row = groups * m_vis;
  std::vector<int> idx(static_cast<size_t>(groups) * m_full);
  std::vector<int> masked_idx;
  for (int g = 0; g < groups; ++g) {
    const tok::MaskRecord& rec = recs[g];
    require(static_cast<int>(rec.visible.size()) == m_vis,
            "decode: mask record visible count does not match token rows");
    size_t vi = 0;
    for (int t = 0; t < m_full; ++t) {
      if (vi < rec.visible.size() && rec.visible[vi] == t) {
        idx[static_cast<size_t>(g) * m_full + t] = g * m_vis + static_cast<int>(vi);
        ++vi;
      } else {
        idx[static_cast<size_t>(g) * m_full + t] = mask_row;
      }
    }
    for (int t : rec.masked) masked_idx.push_back(g * m_full + t);
  }
  Tensor x = diff::add(diff::embedding_lookup(table, idx), positions);
  x = stack_forward(x, p.stack, heads, m_full);
  Tensor masked = diff::embedding_lookup(x, masked_idx);
  return nn::linear(masked, p.head_w, p.head_b);
}

Tensor CmahModel::decode_reconstruct(const Tensor& vis_tokens,
                                     const std::vector<tok::MaskRecord>& recs,
                                     const Tensor& positions, tok::Modality modality,
                                     int groups) const {
  if (modality == tok::Modality::image) {
    return decode_packed(vis_tokens, recs, positions, dec_image_, cfg_.image_heads, cfg_.m_image(),
                         groups);
  }
  return decode_packed(vis_tokens, recs, positions, dec_point_, cfg_.point_heads, cfg_.m_point,
                       groups);
}

ForwardBundle CmahModel::full_forward(const std::vector<PairSample>& batch, uint64_t mask_seed,
                                      uint64_t fps_seed, bool train_mode, bool use_fusion,
                                      bool use_recon) const {
  const int b = static_cast<int>(batch.size());
  require(b >= 1, "full_forward: empty batch");
  const int mi = cfg_.m_image();
  const int mp = cfg_.m_point;
  const int k = cfg_.k_tok;
  const int pd = cfg_.patch_dim();

  RowMat patches(static_cast<Eigen::Index>(b) * mi, pd);
  RowMat rel(static_cast<Eigen::Index>(b) * mp * k, 3);
  RowMat centers(static_cast<Eigen::Index>(b) * mp, 3);
  RowMat pt_targets(static_cast<Eigen::Index>(b) * mp, k * 3);
  for (int i = 0; i < b; ++i) {
    const PairSample& s = batch[i];
    require(s.image.h == cfg_.image_size && s.image.w == cfg_.image_size,
            "full_forward: sample " + std::to_string(i) + " image size mismatch");
    patches.middleRows(static_cast<Eigen::Index>(i) * mi, mi) = tok::patchify(s.image, cfg_.patch);
    std::vector<int> ctr = geom::fps(s.cloud, mp, seed_mix(fps_seed, static_cast<uint64_t>(i)),
                                     train_mode ? geom::FpsStart::seeded : geom::FpsStart::index0);
    geom::GroupedCloud grp = geom::knn_group(s.cloud, ctr, k);
    centers.middleRows(static_cast<Eigen::Index>(i) * mp, mp) = grp.centers;
    for (int t = 0; t < mp; ++t) {
      rel.middleRows((static_cast<Eigen::Index>(i) * mp + t) * k, k) = grp.groups[t];
      pt_targets.row(static_cast<Eigen::Index>(i) * mp + t) =
          Eigen::Map<const Eigen::RowVectorXd>(grp.groups[t].data(), k * 3);
    }
  }

  Tensor img_tok = tok::image_tokens(Tensor::from_matrix(patches), img_embed_);
  Tensor pt_pos = tok::point_positions(Tensor::from_matrix(centers), point_pos_);
  Tensor pt_tok = diff::add(tok::pointnet_tokens(Tensor::from_matrix(rel), k, pointnet_), pt_pos);

  const int mm_i = tok::mask_count(cfg_.mask_ratio_image, mi);
  const int mm_p = tok::mask_count(cfg_.mask_ratio_point, mp);
  std::vector<tok::MaskRecord> img_recs(b), pt_recs(b);
  std::vector<int> img_vis_idx, pt_vis_idx;
  img_vis_idx.reserve(static_cast<size_t>(b) * (mi - mm_i));
  pt_vis_idx.reserve(static_cast<size_t>(b) * (mp - mm_p));
  for (int i = 0; i < b; ++i) {
    img_recs[i] = tok::make_mask_record(
        mi, cfg_.mask_ratio_image, seed_mix(mask_seed, static_cast<uint64_t>(i), 0),
        patches.middleRows(static_cast<Eigen::Index>(i) * mi, mi));
    pt_recs[i] = tok::make_mask_record(
        mp, cfg_.mask_ratio_point, seed_mix(mask_seed, static_cast<uint64_t>(i), 1),
        pt_targets.middleRows(static_cast<Eigen::Index>(i) * mp, mp));
    for (int v : img_recs[i].visible) img_vis_idx.push_back(i * mi + v);
    for (int v : pt_recs[i].visible) pt_vis_idx.push_back(i * mp + v);
  }

  Encoded e_img = encode_packed(img_tok, cls_image_, img_stack_, cfg_.image_heads, b);
  Encoded e_pt = encode_packed(pt_tok, cls_point_, point_stack_, cfg_.point_heads, b);
  Encoded e_img_vis = encode_packed(diff::embedding_lookup(img_tok, img_vis_idx), cls_image_,
                                    img_stack_, cfg_.image_heads, b);
  Encoded e_pt_vis = encode_packed(diff::embedding_lookup(pt_tok, pt_vis_idx), cls_point_,
                                   point_stack_, cfg_.point_heads, b);

  ForwardBundle out;
  out.batch = b;
  out.m_mask_image = mm_i;
  out.m_mask_point = mm_p;
  out.k_tok = k;
  out.h_image = hash_head(e_img.cls, hash_image_);
  out.h_point = hash_head(e_pt.cls, hash_point_);
  out.h_image_vis = hash_head(e_img_vis.cls, hash_image_);
  out.h_point_vis = hash_head(e_pt_vis.cls, hash_point_);
  out.mask_image = img_recs;
  out.mask_point = pt_recs;

  if (!use_recon || (mm_i == 0 && mm_p == 0)) return out;
  out.has_recon = true;

  if (mm_i > 0) {
    Tensor img_in = use_fusion ? fuse(e_img_vis.tokens, e_pt.tokens, tok::Modality::image, b)
                               : e_img_vis.tokens;
    std::vector<int> pos_idx(static_cast<size_t>(b) * mi);
    for (int i = 0; i < b; ++i)
      for (int t = 0; t < mi; ++t) pos_idx[static_cast<size_t>(i) * mi + t] = t;
    Tensor img_positions = diff::embedding_lookup(img_embed_.pos, pos_idx);
    out.pred_2d = decode_packed(img_in, img_recs, img_positions, dec_image_, cfg_.image_heads, mi,
                                b);
    out.target_2d.resize(static_cast<Eigen::Index>(b) * mm_i, pd);
    for (int i = 0; i < b; ++i)
      out.target_2d.middleRows(static_cast<Eigen::Index>(i) * mm_i, mm_i) = img_recs[i].targets;
  }

  if (mm_p > 0) {
    Tensor pt_in = use_fusion ? fuse(e_pt_vis.tokens, e_img.tokens, tok::Modality::point, b)
                              : e_pt_vis.tokens;
    Tensor flat = decode_packed(pt_in, pt_recs, pt_pos, dec_point_, cfg_.point_heads, mp, b);
    out.pred_3d = diff::reshape(flat, {b * mm_p * k, 3});
    out.target_3d.resize(static_cast<Eigen::Index>(b) * mm_p * k, 3);
    for (int i = 0; i < b; ++i) {
      const RowMat& t = pt_recs[i].targets;  // mm_p x (k*3), row-major k x 3 blocks
      out.target_3d.middleRows(static_cast<Eigen::Index>(i) * mm_p * k, mm_p * k) =
          Eigen::Map<const RowMat>(t.data(), static_cast<Eigen::Index>(mm_p) * k, 3);
    }
  }
  return out;
}

Array CmahModel::hash_image_continuous(const tok::Image& img) const {
  diff::NoGradScope ng;
  tok::TokenSet ts = tokenize_image(img);
  Encoded e = encode_packed(ts.tokens, cls_image_, img_stack_, cfg_.image_heads, 1);
  return hash_head(e.cls, hash_image_).array();
}

Array CmahModel::hash_points_continuous(const RowMat& cloud) const {
  diff::NoGradScope ng;
  tok::PointTokens pt = tokenize_points(cloud, 0, false);
  Encoded e = encode_packed(pt.tokens.tokens, cls_point_, point_stack_, cfg_.point_heads, 1);
  return hash_head(e.cls, hash_point_).array();
}

Array CmahModel::binarize(const Array& h) {
  return h.unaryExpr([](Scalar v) { return v >= 0.0 ? Scalar(1) : Scalar(-1); });
}

Array CmahModel::encode_image_for_retrieval(const tok::Image& img) const {
  return binarize(hash_image_continuous(img));
}

Array CmahModel::encode_points_for_retrieval(const RowMat& cloud) const {
  return binarize(hash_points_continuous(cloud));
}

// Checkpoint container, all integers little-endian:
//   magic "CMAHCKPT" | u16 version | u64 seed | u32 config-JSON length |
//   config JSON | u32 tensor count | per tensor: u16 name length, name,
//   u8 ndim, i32 dims, f64 values (row-major)
namespace {

constexpr char kCkptMagic[8] = {'C', 'M', 'A', 'H', 'C', 'K', 'P', 'T'};
constexpr uint16_t kCkptVersion = 1;

template <typename T>
void put(std::ostream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::istream& f, const char* what) {
  T v{};
  if (!f.read(reinterpret_cast<char*>(&v), sizeof v))
    throw FormatError(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

}  // namespace

void CmahModel::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  f.write(kCkptMagic, sizeof kCkptMagic);
  put<uint16_t>(f, kCkptVersion);
  put<uint64_t>(f, seed_);
  std::string cfg = cfg_.to_json();
  put<uint32_t>(f, static_cast<uint32_t>(cfg.size()));
  f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put<uint32_t>(f, static_cast<uint32_t>(params_.size()));
  for (const auto& [name, t] : params_) {
    put<uint16_t>(f, static_cast<uint16_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint8_t>(f, static_cast<uint8_t>(t.ndim()));
    for (int d : t.shape()) put<int32_t>(f, d);
    f.write(reinterpret_cast<const char*>(t.array().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(Scalar)));
  }
  f.flush();
  if (!f) throw FormatError("checkpoint: write to '" + path + "' failed");
}

CmahModel CmahModel::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  if (!f.read(magic, sizeof magic) || std::memcmp(magic, kCkptMagic, sizeof magic) != 0)
    throw FormatError("checkpoint: bad magic in '" + path + "' (expected CMAHCKPT)");
  uint16_t version = take<uint16_t>(f, "version");
  if (version != kCkptVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  uint64_t seed = take<uint64_t>(f, "seed");
  uint32_t cfg_len = take<uint32_t>(f, "config length");
  std::string cfg_json(cfg_len, '\0');
  if (!f.read(cfg_json.data(), cfg_len)) throw FormatError("checkpoint: truncated config");
  CmahModel model(ModelConfig::from_json(cfg_json), seed);
  uint32_t count = take<uint32_t>(f, "tensor count");
  if (count != model.params_.size())
    throw FormatError("checkpoint: has " + std::to_string(count) + " tensors, model needs " +
                      std::to_string(model.params_.size()));
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = take<uint16_t>(f, "tensor name length");
    std::string name(name_len, '\0');
    if (!f.read(name.data(), name_len)) throw FormatError("checkpoint: truncated tensor name");
    if (name != model.params_[i].first)
      throw FormatError("checkpoint: tensor '" + name + "' where '" + model.params_[i].first +
                        "' was expected");
    diff::Tensor t = model.params_[i].second;
    int ndim = take<uint8_t>(f, "tensor rank");
    std::vector<int> dims(ndim);
    for (int d = 0; d < ndim; ++d) dims[d] = take<int32_t>(f, "tensor dim");
    if (dims != t.shape())
      throw FormatError("checkpoint: tensor '" + name + "' stored as " + diff::shape_str(dims) +
                        ", model expects " + diff::shape_str(t.shape()));
    if (!f.read(reinterpret_cast<char*>(t.array().data()),
                static_cast<std::streamsize>(t.numel() * sizeof(Scalar))))
      throw FormatError("checkpoint: truncated values for tensor '" + name + "'");
  }
  return model;
}

namespace {

// FLOP bookkeeping: matrix products only, multiply-add = 2.
double attn_sublayer_flops(double len, double d) { return 8 * len * d * d + 4 * len * len * d; }

double stack_flops(double depth, double len, double d, double mult) {
  return depth * (attn_sublayer_flops(len, d) + 4 * mult * len * d * d);
}

long long params_with_prefix(const nn::ParamMap& reg, const std::string& prefix) {
  long long n = 0;
  for (const auto& [name, t] : reg)
    if (name.rfind(prefix, 0) == 0) n += t.numel();
  return n;
}

}  // namespace

ModelStats CmahModel::stats() const {
  const double mi = cfg_.m_image(), mp = cfg_.m_point, k = cfg_.k_tok, pd = cfg_.patch_dim();
  const double di = cfg_.d_image, dp = cfg_.d_point, df = cfg_.d_fusion, mult = cfg_.ffn_mult;
  const double vis_i = mi - tok::mask_count(cfg_.mask_ratio_image, cfg_.m_image());
  const double vis_p = mp - tok::mask_count(cfg_.mask_ratio_point, cfg_.m_point);
  const double mm_i = mi - vis_i, mm_p = mp - vis_p;

  auto fusion_flops = [&](double lq, double dq, double lkv, double dkv) {
    return attn_sublayer_flops(lq, dq) + attn_sublayer_flops(lkv, dkv) +
           2 * lkv * dkv * df +         // input projection into the fusion width
           2 * lq * dq * df +           // query projection
           2 * 2 * lkv * df * df +      // key and value projections
           4 * lq * lkv * df +          // cross-attention scores and weighted sum
           2 * lq * df * df +           // output projection
           4 * mult * lq * df * df;     // feed-forward
  };
  auto decoder_flops = [&](double width, double in_width, double lvis, double m, double mm,
                           double out_dim, double depth, bool adapter) {
    double fl = stack_flops(depth, m, width, mult) + 2 * mm * width * out_dim;
    if (adapter) fl += 2 * lvis * in_width * width;
    return fl;
  };

  ModelStats s;
  s.components = {
      {"image encoder", params_with_prefix(params_, "image."),
       2 * mi * pd * di + stack_flops(cfg_.image_depth, mi + 1, di, mult)},
      {"point encoder", params_with_prefix(params_, "point."),
       2 * mp * k * (3 * dp + dp * 2 * dp) + 2 * mp * (2 * dp * 2 * dp + 2 * dp * dp) +
           2 * mp * (3 * dp + dp * dp) + stack_flops(cfg_.point_depth, mp + 1, dp, mult)},
      {"image fusion", params_with_prefix(params_, "fusion.image."),
       fusion_flops(vis_i, di, mp, dp)},
      {"point fusion", params_with_prefix(params_, "fusion.point."),
       fusion_flops(vis_p, dp, mi, di)},
      {"image decoder", params_with_prefix(params_, "dec.image."),
       decoder_flops(di, df, vis_i, mi, mm_i, pd, cfg_.image_dec_depth, dec_image_.has_adapter)},
      {"point decoder", params_with_prefix(params_, "dec.point."),
       decoder_flops(dp, df, vis_p, mp, mm_p, k * 3, cfg_.point_dec_depth,
                     dec_point_.has_adapter)},
  };
  s.head_params = params_with_prefix(params_, "hash.");
  s.head_flops = 2 * (di * di + di * cfg_.code_bits) + 2 * (dp * dp + dp * cfg_.code_bits);
  for (const ComponentStats& c : s.components) {
    s.total_params += c.params;
    s.total_flops += c.flops;
  }
  s.total_params += s.head_params;
  s.total_flops += s.head_flops;
  return s;
}

}  // namespace cmah::model
