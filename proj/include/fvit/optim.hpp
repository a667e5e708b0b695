#pragma once

// AdamW with decoupled weight decay, plus the per-epoch cosine schedule.
//
// Decay is applied as a multiplicative pre-scale w *= (1 - lr*wd) before
// the adaptive update, so a zero-gradient step scales weights by exactly
// that factor and a decay-free run plus the same external pre-scale
// reproduces the decayed trajectory bit for bit. Normalization scales and
// shifts and positional tables are exempt from decay.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "fvit/errors.hpp"
#include "fvit/nn.hpp"
#include "fvit/tensor.hpp"

namespace fvit {

struct CosineSchedule {
  double eta_max = 5e-4;
  double eta_min = 1e-5;
  size_t t_max = 120;
};

inline double cosine_lr(const CosineSchedule& s, size_t epoch) {
  if (s.t_max == 0 || s.eta_min > s.eta_max)
    throw ConfigError("cosine schedule: need t_max >= 1 and eta_min <= eta_max");
  if (epoch > s.t_max)
    throw ContractError("cosine_lr: epoch " + std::to_string(epoch) +
                        " beyond period " + std::to_string(s.t_max));
  // branch at the endpoints so they return the configured rates exactly
  if (epoch == 0) return s.eta_max;
  if (epoch == s.t_max) return s.eta_min;
  const double c =
      std::cos(std::numbers::pi * double(epoch) / double(s.t_max));
  return s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + c);
}

inline bool decay_exempt(const std::string& name) {
  auto ends_with = [&](const char* suf) {
    const size_t n = std::char_traits<char>::length(suf);
    return name.size() >= n && name.compare(name.size() - n, n, suf) == 0;
  };
  return ends_with(".scale") || ends_with(".shift") || ends_with(".pos");
}

template <typename Real>
class AdamW {
 public:
  AdamW() = default;
  AdamW(double beta1, double beta2, double eps, double weight_decay,
        const std::vector<NamedParam<Real>>& params)
      : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    slots_.reserve(params.size());
    for (const auto& p : params)
      slots_.push_back({std::vector<Real>(p.tensor.size(), Real(0)),
                        std::vector<Real>(p.tensor.size(), Real(0)),
                        !decay_exempt(p.name)});
  }

  size_t steps() const { return t_; }

  // One update over all parameters from their accumulated gradients.
  // Parameters without a populated gradient are treated as zero-gradient.
  void step(std::vector<NamedParam<Real>>& params, double lr) {
    if (params.size() != slots_.size())
      throw ContractError("adamw: " + std::to_string(params.size()) +
                          " parameters for " + std::to_string(slots_.size()) +
                          " state slots");
    if (lr < 0) throw ContractError("adamw: negative learning rate");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    const double scale = 1.0 - lr * wd_;
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& w = params[pi].tensor.data();
      auto& slot = slots_[pi];
      if (slot.m.size() != w.size())
        throw ContractError("adamw: parameter " + params[pi].name +
                            " changed size");
      const bool has_grad = params[pi].tensor.has_grad();
      const std::vector<Real>* g =
          has_grad ? &params[pi].tensor.grad() : nullptr;
      for (size_t i = 0; i < w.size(); ++i) {
        // decay lands at storage precision before the adaptive term reads it,
        // so it is interchangeable with an external w *= 1 - lr*wd
        if (slot.decay && wd_ != 0.0) w[i] = Real(double(w[i]) * scale);
        double wi = double(w[i]);
        const double gi = g ? double((*g)[i]) : 0.0;
        const double m = beta1_ * double(slot.m[i]) + (1.0 - beta1_) * gi;
        const double v = beta2_ * double(slot.v[i]) + (1.0 - beta2_) * gi * gi;
        slot.m[i] = Real(m);
        slot.v[i] = Real(v);
        wi -= lr * ((m / bc1) / (std::sqrt(v / bc2) + eps_));
        w[i] = Real(wi);
      }
    }
  }

  // Moments exposed for checkpointing, named after their parameters.
  void collect_state(const std::vector<NamedParam<Real>>& params,
                     std::vector<NamedParam<Real>>& out) const {
    for (size_t i = 0; i < slots_.size(); ++i) {
      out.push_back({params[i].name + ".adam_m",
                     Tensor<Real>::from(params[i].tensor.shape(), slots_[i].m)});
      out.push_back({params[i].name + ".adam_v",
                     Tensor<Real>::from(params[i].tensor.shape(), slots_[i].v)});
    }
  }

  void restore_state(size_t step_count,
                     const std::vector<std::vector<Real>>& ms,
                     const std::vector<std::vector<Real>>& vs) {
    if (ms.size() != slots_.size() || vs.size() != slots_.size())
      throw ContractError("adamw: restored state count mismatch");
    for (size_t i = 0; i < slots_.size(); ++i) {
      if (ms[i].size() != slots_[i].m.size() ||
          vs[i].size() != slots_[i].v.size())
        throw ContractError("adamw: restored moment size mismatch");
      slots_[i].m = ms[i];
      slots_[i].v = vs[i];
    }
    t_ = step_count;
  }

 private:
  struct Slot {
    std::vector<Real> m, v;
    bool decay = true;
  };
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.01;
  size_t t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace fvit
