#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmah/common.hpp"
#include "cmah/config.hpp"
#include "cmah/nn.hpp"
#include "cmah/tensor.hpp"
#include "cmah/tokenizer.hpp"

namespace cmah::model {

using diff::Tensor;

// Transformer building blocks. Every forward operates on packed 2-D inputs:
// G independent groups of `len` rows laid out consecutively, so one call
// serves a whole batch and a single sample is just G = 1.

struct AttnParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  static AttnParams init(int d, Rng& rng);
  void register_into(nn::ParamMap& reg, const std::string& prefix) const;
};

struct FfnParams {
  Tensor w1, b1, w2, b2;  // d -> mult*d -> d with gelu
  static FfnParams init(int d, int mult, Rng& rng);
  void register_into(nn::ParamMap& reg, const std::string& prefix) const;
};

struct BlockParams {
  AttnParams attn;
  FfnParams ffn;
};

struct StackParams {
  std::vector<BlockParams> blocks;
  static StackParams init(int depth, int d, int mult, Rng& rng);
  void register_into(nn::ParamMap& reg, const std::string& prefix) const;
};

// Pre-norm residual sublayers; a non-empty stack ends with a closing layer
// norm, a depth-0 stack is the identity.
Tensor attn_forward(const Tensor& x, const AttnParams& p, int heads, int len);
Tensor ffn_forward(const Tensor& x, const FfnParams& p);
Tensor stack_forward(const Tensor& x, const StackParams& p, int heads, int len);

// Two-layer hash head: D -> D relu -> K tanh; outputs strictly inside (-1,1).
struct HashParams {
  Tensor w1, b1, w2, b2;
  static HashParams init(int d, int bits, Rng& rng);
  void register_into(nn::ParamMap& reg, const std::string& prefix) const;
};
Tensor hash_head(const Tensor& cls, const HashParams& p);

// Cross-modal fusion. Both sides first run a self-attention sublayer at
// their native width; the key/value side is then projected into the fusion
// width and the query side cross-attends into it, followed by a
// feed-forward sublayer at the fusion width.
struct FusionParams {
  AttnParams q_self;                      // at the query branch width
  AttnParams kv_self;                     // at the other branch width
  Tensor w_in, b_in;                      // other width -> fusion width
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // cross attention at fusion width
  FfnParams ffn;
  static FusionParams init(int d_q, int d_kv, int d_fus, int mult, Rng& rng);
  void register_into(nn::ParamMap& reg, const std::string& prefix) const;
};
Tensor fuse_forward(const Tensor& vis, const Tensor& other, const FusionParams& p, int q_heads,
                    int kv_heads, int cross_heads, int groups);

// Masked-token decoder: rebuilds the full sequence from processed visible
// tokens plus one shared learnable mask token, re-adds the original
// positional embeddings, runs a small stack, and projects the masked rows.
struct DecoderParams {
  bool has_adapter = false;
  Tensor adapter_w, adapter_b;  // input width -> decoder width, when they differ
  Tensor mask_token;            // 1 x decoder width, shared across positions
  StackParams stack;
  Tensor head_w, head_b;        // decoder width -> output dim
  static DecoderParams init(int in_width, int width, int depth, int mult, int out_dim, Rng& rng);
  void register_into(nn::ParamMap& reg, const std::string& prefix) const;
};

struct PairSample {
  RowMat cloud;      // N x 3
  tok::Image image;  // pixels in [0,1], dimensions must match the config
};

struct Encoded {
  Tensor tokens;  // (G*M) x D with the class token removed
  Tensor cls;     // G x D
};

// Everything one training step needs. The pred tensors stay invalid when the
// corresponding side has no masked tokens (ratio 0) or reconstruction is off.
struct ForwardBundle {
  Tensor h_point, h_image;          // B x K full codes
  Tensor h_point_vis, h_image_vis;  // B x K masked-pass codes
  bool has_recon = false;
  Tensor pred_2d;     // (B*Mmask_I) x patch_dim
  RowMat target_2d;   // same layout, raw pixels
  Tensor pred_3d;     // (B*Mmask_P*k) x 3, k predicted points per masked token
  RowMat target_3d;   // same layout, center-relative ground truth
  std::vector<tok::MaskRecord> mask_image, mask_point;  // one record per sample
  int batch = 0, m_mask_image = 0, m_mask_point = 0, k_tok = 0;
};

struct ComponentStats {
  std::string name;
  long long params = 0;
  double flops = 0.0;
};

// FLOP numbers follow one documented counting rule: matrix products only, a
// multiply-add costs 2, evaluated at the component's operating sizes for one
// sample (encoders and decoders at the full token count, fusion at the
// visible count implied by the default mask ratios).
struct ModelStats {
  std::vector<ComponentStats> components;  // the six architecture components
  long long head_params = 0;
  double head_flops = 0.0;
  long long total_params = 0;
  double total_flops = 0.0;
};

class CmahModel {
 public:
  CmahModel(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }
  nn::ParamMap& params() { return params_; }
  const nn::ParamMap& params() const { return params_; }

  // Single-sample pipeline pieces (G = 1 views of the packed kernels).
  tok::TokenSet tokenize_image(const tok::Image& img) const;
  tok::PointTokens tokenize_points(const RowMat& cloud, uint64_t fps_seed,
                                   bool seeded_fps) const;
  Encoded encode(const tok::TokenSet& ts) const;
  Tensor hash_forward(const Tensor& cls, tok::Modality modality) const;
  Tensor fuse(const Tensor& vis, const Tensor& other_full, tok::Modality query_side,
              int groups) const;
  Tensor decode_reconstruct(const Tensor& vis_tokens, const std::vector<tok::MaskRecord>& recs,
                            const Tensor& positions, tok::Modality modality, int groups) const;

  // The training double pass: full + visible encodings of both modalities,
  // four hash codes, cross-modal fusion and both reconstructions. Masks are
  // drawn per sample from mask_seed; FPS starts are seeded from fps_seed in
  // training mode and pinned to index 0 otherwise.
  ForwardBundle full_forward(const std::vector<PairSample>& batch, uint64_t mask_seed,
                             uint64_t fps_seed, bool train_mode, bool use_fusion = true,
                             bool use_recon = true) const;

  // Retrieval path: encoder and hash head only, no gradient recording, the
  // fusion block and decoders never run. sign(0) counts as +1.
  Array hash_image_continuous(const tok::Image& img) const;
  Array hash_points_continuous(const RowMat& cloud) const;
  Array encode_image_for_retrieval(const tok::Image& img) const;
  Array encode_points_for_retrieval(const RowMat& cloud) const;
  static Array binarize(const Array& h);

  // Instrumentation: how often the deactivatable components actually ran.
  int fusion_calls() const { return fusion_calls_; }
  int decoder_calls() const { return decoder_calls_; }

  void save(const std::string& path) const;
  static CmahModel load(const std::string& path);

  ModelStats stats() const;

 private:
  Encoded encode_packed(const Tensor& tokens, const Tensor& cls_token, const StackParams& stack,
                        int heads, int groups) const;
  Tensor decode_packed(const Tensor& vis_tokens, const std::vector<tok::MaskRecord>& recs,
                       const Tensor& positions, const DecoderParams& p, int heads, int m_full,
                       int groups) const;

  ModelConfig cfg_;
  uint64_t seed_ = 0;

  tok::ImageEmbedParams img_embed_;
  Tensor cls_image_;
  StackParams img_stack_;
  tok::PointNetParams pointnet_;
  tok::PointPosParams point_pos_;
  Tensor cls_point_;
  StackParams point_stack_;
  HashParams hash_image_, hash_point_;
  FusionParams fuse_image_, fuse_point_;  // named by their query side
  DecoderParams dec_image_, dec_point_;
  nn::ParamMap params_;

  mutable int fusion_calls_ = 0;
  mutable int decoder_calls_ = 0;
};

}  // namespace cmah::model
