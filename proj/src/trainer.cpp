#include "cmah/trainer.hpp"

#include <json.hpp>

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "cmah/losses.hpp"
#include "cmah/tensor.hpp"

namespace cmah::train {

namespace {

// Shortest round-trip decimal form, so logs replay bit-identically and stay
// readable at the same time.
std::string num(Scalar v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

TrainConfig TrainConfig::from_model_config(const ModelConfig& mc, uint64_t seed) {
  TrainConfig c;
  c.batch = mc.batch;
  c.lr0 = mc.lr0;
  c.lr_decay = mc.lr_decay;
  c.lr_decay_every = mc.lr_decay_every;
  c.lr_min = mc.lr_min;
  c.beta1 = mc.beta1;
  c.beta2 = mc.beta2;
  c.adam_eps = mc.adam_eps;
  c.weight_decay = mc.weight_decay;
  c.epochs = mc.epochs;
  c.seed = seed;
  return c;
}

void TrainConfig::validate() const {
  if (batch < 1) throw UsageError("train: batch must be >= 1");
  if (epochs < 0) throw UsageError("train: epochs must be >= 0");
  if (lr0 <= 0.0 || lr_min <= 0.0 || lr_decay <= 0.0 || lr_decay > 1.0) {
    throw UsageError("train: learning-rate schedule values out of range");
  }
  if (lr_decay_every < 1) throw UsageError("train: lr_decay_every must be >= 1");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || adam_eps <= 0.0) {
    throw UsageError("train: AdamW constants out of range");
  }
  if (weight_decay < 0.0) throw UsageError("train: weight_decay must be >= 0");
  if (!use_contrastive && !use_recon) {
    throw UsageError("train: at least one objective family must stay enabled");
  }
}

Scalar lr_at(const TrainConfig& cfg, int epoch) {
  if (epoch < 0) throw UsageError("lr_at: negative epoch");
  Scalar lr = cfg.lr0 * std::pow(cfg.lr_decay, epoch / cfg.lr_decay_every);
  return std::max(lr, cfg.lr_min);
}

AdamWState AdamWState::init(const nn::ParamMap& params) {
  AdamWState st;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const auto& [name, t] : params) {
    st.m.push_back(Array::Zero(t.numel()));
    st.v.push_back(Array::Zero(t.numel()));
  }
  return st;
}

bool adamw_step(nn::ParamMap& params, AdamWState& st, Scalar lr, const TrainConfig& cfg) {
  if (st.m.size() != params.size() || st.v.size() != params.size()) {
    throw std::invalid_argument("adamw_step: state does not match the parameter registry");
  }
  for (const auto& [name, t] : params) {
    if (t.has_grad() && !t.grad().isFinite().all()) {
      ++st.skipped;
      return false;
    }
  }
  ++st.step;
  const Scalar bc1 = 1.0 - std::pow(cfg.beta1, static_cast<Scalar>(st.step));
  const Scalar bc2 = 1.0 - std::pow(cfg.beta2, static_cast<Scalar>(st.step));
  for (size_t i = 0; i < params.size(); ++i) {
    diff::Tensor& t = params[i].second;
    // A parameter untouched by this step's graph has zero gradient.
    Array g = t.has_grad() ? t.grad() : Array(Array::Zero(t.numel()));
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g.square();
    Array update = (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + cfg.adam_eps);
    t.array() -= lr * (update + cfg.weight_decay * t.array());
  }
  return true;
}

std::string StepRecord::to_line() const {
  std::string s = "{\"step\":" + std::to_string(step);
  s += ",\"epoch\":" + std::to_string(epoch);
  s += ",\"lr\":" + num(lr);
  s += ",\"l_ff\":" + num(l_ff);
  s += ",\"l_fm\":" + num(l_fm);
  s += ",\"l_mf\":" + num(l_mf);
  s += ",\"l_3d\":" + num(l_3d);
  s += ",\"l_2d\":" + num(l_2d);
  s += ",\"l_overall\":" + num(l_overall);
  s += "}";
  return s;
}

StepRecord StepRecord::from_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train log: bad record line: ") + e.what());
  }
  StepRecord r;
  try {
    r.step = j.at("step").get<long long>();
    r.epoch = j.at("epoch").get<int>();
    r.lr = j.at("lr").get<Scalar>();
    r.l_ff = j.at("l_ff").get<Scalar>();
    r.l_fm = j.at("l_fm").get<Scalar>();
    r.l_mf = j.at("l_mf").get<Scalar>();
    r.l_3d = j.at("l_3d").get<Scalar>();
    r.l_2d = j.at("l_2d").get<Scalar>();
    r.l_overall = j.at("l_overall").get<Scalar>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train log: missing field: ") + e.what());
  }
  return r;
}

void TrainLog::append(const StepRecord& r) {
  if (!records.empty() && r.step <= records.back().step) {
    throw std::logic_error("TrainLog: step counter must increase");
  }
  records.push_back(r);
}

void TrainLog::save(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("train log: cannot open '" + path + "' for writing");
  for (const auto& r : records) f << r.to_line() << "\n";
  f.flush();
  if (!f) throw FormatError("train log: write to '" + path + "' failed");
}

TrainLog TrainLog::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("train log: cannot open '" + path + "'");
  TrainLog log;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    log.append(StepRecord::from_line(line));
  }
  return log;
}

TrainResult train(model::CmahModel& m, const std::vector<model::PairSample>& dataset,
                  const TrainConfig& cfg, const std::string& checkpoint_path,
                  const std::string& log_path) {
  cfg.validate();
  if (dataset.empty()) throw UsageError("train: dataset is empty");
  const int n = static_cast<int>(dataset.size());
  const int batch = std::min(cfg.batch, n);
  const int steps_per_epoch = n / batch;

  std::ofstream stream;
  if (!log_path.empty()) {
    stream.open(log_path, std::ios::trunc);
    if (!stream) throw FormatError("train log: cannot open '" + log_path + "' for writing");
  }

  const ModelConfig& mc = m.config();
  AdamWState st = AdamWState::init(m.params());
  TrainResult out;
  out.checkpoint_path = checkpoint_path;
  long long gstep = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Scalar lr = lr_at(cfg, epoch);
    std::vector<int> order = Rng(seed_mix(cfg.seed, 0x73687566ULL, epoch)).permutation(n);
    for (int s = 0; s < steps_per_epoch; ++s) {
      auto t0 = std::chrono::steady_clock::now();
      std::vector<model::PairSample> bv;
      bv.reserve(batch);
      for (int i = 0; i < batch; ++i) bv.push_back(dataset[order[s * batch + i]]);

      for (auto& [name, t] : m.params()) t.zero_grad();
      uint64_t mask_seed = seed_mix(cfg.seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(s));
      uint64_t fps_seed = seed_mix(mask_seed, 0x667073ULL);
      diff::Tape tape(mask_seed);
      losses::LossBreakdown lb;
      {
        diff::TapeScope ts(tape);
        model::ForwardBundle fb =
            m.full_forward(bv, mask_seed, fps_seed, true, cfg.use_fusion, cfg.use_recon);
        lb = losses::overall(fb, mc.tau, mc.negatives, mc.per_patch_norm_targets);
        diff::backward(cfg.use_contrastive ? lb.l_overall : lb.l_r);
      }
      if (!adamw_step(m.params(), st, lr, cfg)) {
        std::cerr << "train: non-finite gradients at step " << gstep << ", update skipped\n";
      }

      StepRecord r;
      r.step = gstep++;
      r.epoch = epoch;
      r.lr = lr;
      r.l_ff = lb.l_ff.item();
      r.l_fm = lb.l_fm.item();
      r.l_mf = lb.l_mf.item();
      r.l_3d = lb.l_3d.item();
      r.l_2d = lb.l_2d.item();
      r.l_overall = lb.l_overall.item();
      r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
      out.log.append(r);
      if (stream.is_open()) stream << r.to_line() << "\n";
    }
    if (stream.is_open()) stream.flush();
  }
  out.log.skipped_steps = st.skipped;

  try {
    m.save(checkpoint_path);
  } catch (...) {
    if (stream.is_open()) stream.flush();
    throw;
  }
  return out;
}

}  // namespace cmah::train
