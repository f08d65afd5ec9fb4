#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmah/common.hpp"
#include "cmah/config.hpp"
#include "cmah/model.hpp"
#include "cmah/nn.hpp"

namespace cmah::train {

// Optimization-loop settings. Architecture, masking ratios, tau, and the
// negative-set rule ride with the model's own config; this struct carries the
// schedule, the optimizer constants, and the ablation switches.
struct TrainConfig {
  int batch = 32;
  Scalar lr0 = 1e-4;
  Scalar lr_decay = 0.1;  // multiplied in every lr_decay_every epochs
  int lr_decay_every = 20;
  Scalar lr_min = 1e-5;
  Scalar beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 0.05;
  int epochs = 60;
  uint64_t seed = 0;
  bool use_fusion = true;
  bool use_recon = true;
  bool use_contrastive = true;

  static TrainConfig from_model_config(const ModelConfig& mc, uint64_t seed);
  void validate() const;  // throws UsageError
};

// Step-decay schedule: lr0 * decay^(epoch / every), floored at lr_min.
Scalar lr_at(const TrainConfig& cfg, int epoch);

// Per-parameter first/second moments, indexed in registry order.
struct AdamWState {
  std::vector<Array> m, v;
  long long step = 0;     // completed updates (bias-correction exponent)
  long long skipped = 0;  // updates dropped because a gradient was non-finite
  static AdamWState init(const nn::ParamMap& params);
};

// One decoupled-weight-decay Adam update across every parameter:
//   m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
//   mhat = m/(1-b1^t)             vhat = v/(1-b2^t)
//   theta <- theta - lr (mhat/(sqrt(vhat)+eps) + wd theta)
// Returns false without touching parameters or moments when any gradient is
// non-finite (the skip counter increments).
bool adamw_step(nn::ParamMap& params, AdamWState& st, Scalar lr, const TrainConfig& cfg);

struct StepRecord {
  long long step = 0;
  int epoch = 0;
  Scalar lr = 0.0;
  Scalar l_ff = 0.0, l_fm = 0.0, l_mf = 0.0, l_3d = 0.0, l_2d = 0.0, l_overall = 0.0;
  double wall_ms = 0.0;  // in-memory only; the serialized line must replay bit-identically

  std::string to_line() const;
  static StepRecord from_line(const std::string& line);
};

struct TrainLog {
  std::vector<StepRecord> records;
  long long skipped_steps = 0;

  void append(const StepRecord& r);  // enforces a strictly increasing step counter
  void save(const std::string& path) const;
  static TrainLog load(const std::string& path);
};

struct TrainResult {
  TrainLog log;
  std::string checkpoint_path;
};

// Full loop: per-epoch seeded shuffle, fixed-size batches (the trailing
// partial batch is dropped; a dataset smaller than one batch trains whole),
// forward/backward/AdamW per step, log line streamed to log_path as it is
// produced, final checkpoint at checkpoint_path. A checkpoint-write failure
// flushes the partial log and rethrows.
TrainResult train(model::CmahModel& m, const std::vector<model::PairSample>& dataset,
                  const TrainConfig& cfg, const std::string& checkpoint_path,
                  const std::string& log_path);

}  // namespace cmah::train
