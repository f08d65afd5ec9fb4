#pragma once

#include <cstdint>
#include <string>

#include "cmah/common.hpp"

namespace cmah {

// Negative-set construction for the cross contrastive losses. The rule for
// full-full pairs is fixed (both code families of the batch); for full-masked
// and masked-full the same mirroring is the default, with a cross-modal-only
// alternative kept selectable.
enum class NegativeSet { both_families, cross_modal_only };

// All architecture and training hyper-parameters. Two presets: `paper`
// mirrors the published configuration, `desk` trains in minutes on a CPU.
struct ModelConfig {
  // image branch
  int image_size = 224;
  int patch = 16;
  int d_image = 768;
  int image_depth = 12;
  int image_heads = 12;
  int image_dec_depth = 8;
  // point branch
  int n_points = 1024;
  int m_point = 64;   // FPS centers = point tokens
  int k_tok = 32;     // group size, also the reconstruction group size
  int d_point = 384;
  int point_depth = 12;
  int point_heads = 12;
  int point_dec_depth = 4;
  // fusion
  int d_fusion = 768;
  int fusion_heads = 12;
  // heads and blocks
  int code_bits = 16;
  int ffn_mult = 4;
  // masking
  double mask_ratio_image = 0.75;
  double mask_ratio_point = 0.60;
  // losses
  double tau = 0.2;
  bool per_patch_norm_targets = false;
  NegativeSet negatives = NegativeSet::both_families;
  // training
  double lr0 = 1e-4;
  double lr_min = 1e-5;
  double lr_decay = 0.1;
  int lr_decay_every = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.05;
  int batch = 32;
  int epochs = 60;

  int m_image() const { return (image_size / patch) * (image_size / patch); }
  int patch_dim() const { return patch * patch * 3; }

  static ModelConfig paper_preset();
  static ModelConfig desk_preset();
  static ModelConfig preset(const std::string& name);  // "paper" | "desk"

  void validate() const;  // throws UsageError on inconsistent fields

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace cmah
