#include "cmah/config.hpp"

#include <json.hpp>

namespace cmah {

using nlohmann::json;

ModelConfig ModelConfig::paper_preset() { return ModelConfig{}; }

ModelConfig ModelConfig::desk_preset() {
  ModelConfig c;
  c.image_size = 32;
  c.patch = 8;
  c.d_image = 64;
  c.image_depth = 2;
  c.image_heads = 4;
  c.image_dec_depth = 2;
  c.n_points = 256;
  c.m_point = 16;
  c.k_tok = 16;
  c.d_point = 32;
  c.point_depth = 2;
  c.point_heads = 4;
  c.point_dec_depth = 1;
  c.d_fusion = 64;
  c.fusion_heads = 4;
  c.code_bits = 16;
  c.lr0 = 1e-3;  // small widths tolerate (and need) a hotter start than the paper scale
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "paper") return paper_preset();
  if (name == "desk") return desk_preset();
  throw UsageError("unknown preset '" + name + "' (expected 'paper' or 'desk')");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw UsageError("config: " + msg); };
  if (image_size <= 0 || patch <= 0 || image_size % patch != 0)
    fail("image_size must be a positive multiple of patch");
  if (d_image <= 0 || d_point <= 0 || d_fusion <= 0) fail("model widths must be positive");
  if (image_heads <= 0 || d_image % image_heads != 0) fail("image_heads must divide d_image");
  if (point_heads <= 0 || d_point % point_heads != 0) fail("point_heads must divide d_point");
  if (fusion_heads <= 0 || d_fusion % fusion_heads != 0) fail("fusion_heads must divide d_fusion");
  if (image_depth < 0 || point_depth < 0 || image_dec_depth < 0 || point_dec_depth < 0)
    fail("depths must be non-negative");
  if (m_point <= 0 || k_tok <= 0 || n_points < m_point || k_tok > n_points)
    fail("need n_points >= m_point and k_tok <= n_points");
  if (code_bits <= 0) fail("code_bits must be positive");
  if (ffn_mult <= 0) fail("ffn_mult must be positive");
  if (mask_ratio_image < 0.0 || mask_ratio_image >= 1.0 || mask_ratio_point < 0.0 ||
      mask_ratio_point >= 1.0)
    fail("mask ratios must lie in [0,1)");
  if (tau <= 0.0) fail("tau must be positive");
  if (lr0 <= 0.0 || lr_min <= 0.0 || lr_decay <= 0.0 || lr_decay > 1.0 || lr_decay_every <= 0)
    fail("bad learning-rate schedule");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || adam_eps <= 0.0)
    fail("bad optimizer constants");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (batch <= 0) fail("batch must be positive");
  if (epochs < 0) fail("epochs must be non-negative");
}

std::string ModelConfig::to_json() const {
  json j;
  j["image_size"] = image_size;
  j["patch"] = patch;
  j["d_image"] = d_image;
  j["image_depth"] = image_depth;
  j["image_heads"] = image_heads;
  j["image_dec_depth"] = image_dec_depth;
  j["n_points"] = n_points;
  j["m_point"] = m_point;
  j["k_tok"] = k_tok;
  j["d_point"] = d_point;
  j["point_depth"] = point_depth;
  j["point_heads"] = point_heads;
  j["point_dec_depth"] = point_dec_depth;
  j["d_fusion"] = d_fusion;
  j["fusion_heads"] = fusion_heads;
  j["code_bits"] = code_bits;
  j["ffn_mult"] = ffn_mult;
  j["mask_ratio_image"] = mask_ratio_image;
  j["mask_ratio_point"] = mask_ratio_point;
  j["tau"] = tau;
  j["per_patch_norm_targets"] = per_patch_norm_targets;
  j["negatives"] = negatives == NegativeSet::both_families ? "both_families" : "cross_modal_only";
  j["lr0"] = lr0;
  j["lr_min"] = lr_min;
  j["lr_decay"] = lr_decay;
  j["lr_decay_every"] = lr_decay_every;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["weight_decay"] = weight_decay;
  j["batch"] = batch;
  j["epochs"] = epochs;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config: invalid JSON: ") + e.what());
  }
  ModelConfig c;
  try {
    j.at("image_size").get_to(c.image_size);
    j.at("patch").get_to(c.patch);
    j.at("d_image").get_to(c.d_image);
    j.at("image_depth").get_to(c.image_depth);
    j.at("image_heads").get_to(c.image_heads);
    j.at("image_dec_depth").get_to(c.image_dec_depth);
    j.at("n_points").get_to(c.n_points);
    j.at("m_point").get_to(c.m_point);
    j.at("k_tok").get_to(c.k_tok);
    j.at("d_point").get_to(c.d_point);
    j.at("point_depth").get_to(c.point_depth);
    j.at("point_heads").get_to(c.point_heads);
    j.at("point_dec_depth").get_to(c.point_dec_depth);
    j.at("d_fusion").get_to(c.d_fusion);
    j.at("fusion_heads").get_to(c.fusion_heads);
    j.at("code_bits").get_to(c.code_bits);
    j.at("ffn_mult").get_to(c.ffn_mult);
    j.at("mask_ratio_image").get_to(c.mask_ratio_image);
    j.at("mask_ratio_point").get_to(c.mask_ratio_point);
    j.at("tau").get_to(c.tau);
    j.at("per_patch_norm_targets").get_to(c.per_patch_norm_targets);
    std::string neg = j.at("negatives").get<std::string>();
    if (neg == "both_families") {
      c.negatives = NegativeSet::both_families;
    } else if (neg == "cross_modal_only") {
      c.negatives = NegativeSet::cross_modal_only;
    } else {
      throw FormatError("config: unknown negatives mode '" + neg + "'");
    }
    j.at("lr0").get_to(c.lr0);
    j.at("lr_min").get_to(c.lr_min);
    j.at("lr_decay").get_to(c.lr_decay);
    j.at("lr_decay_every").get_to(c.lr_decay_every);
    j.at("beta1").get_to(c.beta1);
    j.at("beta2").get_to(c.beta2);
    j.at("adam_eps").get_to(c.adam_eps);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("batch").get_to(c.batch);
    j.at("epochs").get_to(c.epochs);
  } catch (const json::out_of_range& e) {
    throw FormatError(std::string("config: missing field: ") + e.what());
  } catch (const json::type_error& e) {
    throw FormatError(std::string("config: wrong field type: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace cmah
