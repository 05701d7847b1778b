#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "doc2dict/autograd.hpp"

namespace d2d {

struct AdamConfig {
  float lr = 6.25e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float clip_norm = 1.0f;  // global gradient-norm clip; <= 0 disables
};

// Adam over a fixed parameter list. Missing gradients count as zero.
class Adam {
 public:
  Adam(std::vector<Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const Var& p : params_) {
      m_.push_back(Tensor::zeros(p.shape()));
      v_.push_back(Tensor::zeros(p.shape()));
    }
  }

  void set_lr(float lr) { cfg_.lr = lr; }

  // Applies one update with gradients divided by `grad_scale`, then clears them.
  // Returns the pre-clip global gradient norm.
  double step(float grad_scale = 1.0f) {
    double sq = 0.0;
    for (const Var& p : params_) {
      if (!p.grad()) continue;
      const float* g = p.grad()->ptr();
      float part = 0.0f;
      for (std::size_t i = 0; i < p.size(); ++i) part += g[i] * g[i];
      sq += part;
    }
    const double norm = std::sqrt(sq) / grad_scale;
    float factor = 1.0f / grad_scale;
    if (cfg_.clip_norm > 0.0f && norm > cfg_.clip_norm) factor *= static_cast<float>(cfg_.clip_norm / norm);
    ++t_;
    const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
    const float step_size = cfg_.lr * std::sqrt(bc2) / bc1;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const Var& p = params_[k];
      if (p.grad()) {
        update(p.node()->value.ptr(), m_[k].ptr(), v_[k].ptr(), p.grad()->ptr(), p.size(), factor, step_size);
      } else {
        const std::vector<float> zeros(p.size(), 0.0f);
        update(p.node()->value.ptr(), m_[k].ptr(), v_[k].ptr(), zeros.data(), p.size(), factor, step_size);
      }
      p.zero_grad();
    }
    return norm;
  }

  long steps() const { return t_; }
  AdamConfig& config() { return cfg_; }

 private:
  void update(float* __restrict w, float* __restrict m, float* __restrict v, const float* __restrict g, std::size_t n,
              float factor, float step_size) const {
    const float b1 = cfg_.beta1, b2 = cfg_.beta2, eps = cfg_.eps;
    for (std::size_t i = 0; i < n; ++i) {
      const float gi = g[i] * factor;
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      w[i] -= step_size * m[i] / (std::sqrt(v[i]) + eps);
    }
  }

  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  long t_ = 0;
};

}  // namespace d2d
