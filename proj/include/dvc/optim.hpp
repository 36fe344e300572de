#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvc/tensor.hpp"

namespace dvc {

// Named parameter registry. Iteration order is the registration order, which
// keeps optimizer updates and checkpoint layout stable across runs.
class ParamStore {
public:
  Tensor add(const std::string& name, Tensor t, bool trainable = true) {
    check(index_.find(name) == index_.end(),
          "duplicate parameter name: " + name);
    t.set_requires_grad(trainable);
    index_[name] = names_.size();
    names_.push_back(name);
    params_.push_back(t);
    return t;
  }
  bool has(const std::string& name) const {
    return index_.find(name) != index_.end();
  }
  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "unknown parameter: " + name);
    return params_[it->second];
  }
  std::size_t size() const { return params_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  Tensor& at(std::size_t i) { return params_[i]; }
  const Tensor& at(std::size_t i) const { return params_[i]; }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }
  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const Tensor& p : params_) n += p.numel();
    return n;
  }

private:
  std::map<std::string, std::size_t> index_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
};

struct AdamWConfig {
  float lr_start = 2e-4f;
  float lr_end = 5e-5f;
  std::int64_t decay_steps = 600000;
  float beta1 = 0.9f;
  float beta2 = 0.98f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
};

inline float linear_lr(const AdamWConfig& cfg, std::int64_t step) {
  double frac =
      cfg.decay_steps > 0
          ? std::min(1.0, double(step) / double(cfg.decay_steps))
          : 1.0;
  return float(double(cfg.lr_start) +
               (double(cfg.lr_end) - double(cfg.lr_start)) * frac);
}

// AdamW with decoupled weight decay and bias-corrected moments. The schedule
// argument of step() is the number of completed steps before this one.
class AdamW {
public:
  AdamW(ParamStore& params, AdamWConfig cfg)
      : params_(params), cfg_(cfg) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params.at(i).data().size(), 0.0f);
      v_[i].assign(params.at(i).data().size(), 0.0f);
    }
  }

  float step(std::int64_t completed_steps) {
    float lr = linear_lr(cfg_, completed_steps);
    ++t_;
    float bc1 = 1.0f - std::pow(cfg_.beta1, float(t_));
    float bc2 = 1.0f - std::pow(cfg_.beta2, float(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_.at(i);
      if (!p.requires_grad()) continue;  // frozen buffers, e.g. codebooks
      std::vector<float>& g = p.grad();
      std::vector<float>& m = m_[i];
      std::vector<float>& v = v_[i];
      std::vector<float>& w = p.data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
        float mh = m[j] / bc1;
        float vh = v[j] / bc2;
        w[j] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) +
                      cfg_.weight_decay * w[j]);
      }
    }
    return lr;
  }

  std::int64_t moment_steps() const { return t_; }
  void set_moment_steps(std::int64_t t) { t_ = t; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const AdamWConfig& config() const { return cfg_; }

private:
  ParamStore& params_;
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

}  // namespace dvc
