#pragma once

// Model-level fixtures shared by the model, loss, and trainer suites plus the
// acceptance runner: random paired batches, a small config, and an
// end-to-end central-difference probe of parameter gradients.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmah/config.hpp"
#include "cmah/geometry.hpp"
#include "cmah/losses.hpp"
#include "cmah/model.hpp"
#include "cmah/tensor.hpp"

namespace cmah::test {

inline model::PairSample rand_sample(const ModelConfig& cfg, Rng& rng) {
  model::PairSample s;
  s.cloud.resize(cfg.n_points, 3);
  for (Eigen::Index i = 0; i < s.cloud.size(); ++i)
    s.cloud.data()[i] = rng.uniform(-1.0, 1.0);
  s.cloud = geom::normalize(s.cloud);
  s.image.h = s.image.w = cfg.image_size;
  s.image.pixels = Array(static_cast<Eigen::Index>(cfg.image_size) * cfg.image_size * 3);
  for (Eigen::Index i = 0; i < s.image.pixels.size(); ++i) s.image.pixels[i] = rng.uniform01();
  return s;
}

inline std::vector<model::PairSample> rand_batch(const ModelConfig& cfg, int b, uint64_t seed) {
  Rng rng(seed);
  std::vector<model::PairSample> out;
  for (int i = 0; i < b; ++i) out.push_back(rand_sample(cfg, rng));
  return out;
}

// Scratch file location for IO round-trip tests.
inline std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

inline diff::Tensor find_param(model::CmahModel& m, const std::string& name) {
  for (auto& [n, t] : m.params())
    if (n == name) return t;
  throw std::runtime_error("no parameter named " + name);
}

inline bool bits_equal(const Array& a, const Array& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(Scalar) * a.size()) == 0;
}

// Small desk-shaped config that keeps unit forwards cheap.
inline ModelConfig tiny_config() {
  ModelConfig c = ModelConfig::desk_preset();
  c.n_points = 64;
  c.m_point = 8;
  c.k_tok = 8;
  c.image_size = 16;  // 4 patch tokens
  return c;
}

struct E2eProbe {
  std::string param;
  Eigen::Index index = 0;
  Scalar analytic = 0.0, numeric = 0.0, rel_err = 0.0;
};

struct E2eGradReport {
  std::vector<E2eProbe> probes;
  Scalar max_rel_err = 0.0;
  bool pass = false;

  std::string summary() const {
    if (probes.empty()) return "no probes";
    const E2eProbe* worst = &probes[0];
    for (const auto& p : probes)
      if (p.rel_err >= worst->rel_err) worst = &p;
    char buf[192];
    std::snprintf(buf, sizeof(buf), "max_rel_err=%.3e at %s[%lld] (analytic=%.6e numeric=%.6e)",
                  max_rel_err, worst->param.c_str(), static_cast<long long>(worst->index),
                  worst->analytic, worst->numeric);
    return buf;
  }
};

// One taped backward gives every analytic parameter gradient of the overall
// training objective; each probed element is then nudged by +/-eps with the
// whole pipeline re-run under NoGrad. Probes stride across the parameter list
// so every architecture component gets hit. Valid because the discrete
// choices (sampling, grouping, mask draws) depend on inputs and seeds only,
// never on parameter values.
inline E2eGradReport e2e_grad_probe(model::CmahModel& m,
                                    const std::vector<model::PairSample>& batch,
                                    uint64_t mask_seed, uint64_t fps_seed, Scalar tau, int count,
                                    Scalar eps = 1e-4, Scalar rtol = 2e-3, bool use_fusion = true,
                                    bool use_recon = true) {
  auto eval = [&]() {
    diff::NoGradScope ng;
    model::ForwardBundle fb =
        m.full_forward(batch, mask_seed, fps_seed, true, use_fusion, use_recon);
    return losses::overall(fb, tau).l_overall.item();
  };

  for (auto& [name, t] : m.params()) t.zero_grad();
  diff::Tape tape;
  {
    diff::TapeScope ts(tape);
    model::ForwardBundle fb =
        m.full_forward(batch, mask_seed, fps_seed, true, use_fusion, use_recon);
    diff::backward(losses::overall(fb, tau).l_overall);
  }

  E2eGradReport rep;
  Rng rng(seed_mix(mask_seed, fps_seed));
  auto& params = m.params();
  const int np = static_cast<int>(params.size());
  for (int p = 0; p < count; ++p) {
    auto& [name, t] = params[static_cast<size_t>(p) * np / count];
    E2eProbe pr;
    pr.param = name;
    pr.index = rng.uniform_int(static_cast<int>(t.numel()));
    pr.analytic = t.has_grad() ? t.grad()[pr.index] : 0.0;
    Scalar orig = t.array()[pr.index];
    t.array()[pr.index] = orig + eps;
    Scalar up = eval();
    t.array()[pr.index] = orig - eps;
    Scalar dn = eval();
    t.array()[pr.index] = orig;
    pr.numeric = (up - dn) / (2.0 * eps);
    pr.rel_err = std::abs(pr.analytic - pr.numeric) / std::max(std::abs(pr.numeric), 1.0);
    rep.max_rel_err = std::max(rep.max_rel_err, pr.rel_err);
    rep.probes.push_back(pr);
  }
  rep.pass = std::isfinite(rep.max_rel_err) && rep.max_rel_err <= rtol;
  return rep;
}

}  // namespace cmah::test
