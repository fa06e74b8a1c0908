#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "peace/numerics/autograd.hpp"

namespace peace {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  Tensor first_moment;
  Tensor second_moment;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of `value` in place.
inline void adam_step(Tensor& value, const Tensor& grad, AdamState& state, const AdamConfig& cfg) {
  if (value.shape() != grad.shape()) {
    throw ValidationError("adam_step: gradient shape " + grad.shape_string() +
                          " does not match parameter shape " + value.shape_string());
  }
  if (state.first_moment.empty()) {
    state.first_moment = Tensor(value.shape());
    state.second_moment = Tensor(value.shape());
  }
  if (state.first_moment.shape() != value.shape()) {
    throw ValidationError("adam_step: optimizer state shape mismatch");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < value.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad[i];
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad[i] * grad[i];
    value[i] -= cfg.learning_rate * (m / c1) / (std::sqrt(v / c2) + cfg.epsilon);
  }
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which fixes checkpoint layout and gradient reduction order.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw ValidationError("duplicate parameter " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->value = std::move(value);
    p->zero_grad();
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  ParamStore clone() const {
    ParamStore out;
    for (const auto& p : params_) {
      Parameter& q = out.add(p->name, p->value);
      q.frozen = p->frozen;
    }
    return out;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter& operator[](const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter " + name);
    return *params_[it->second];
  }
  const Parameter& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter " + name);
    return *params_[it->second];
  }

  std::size_t size() const { return params_.size(); }
  Parameter& at(std::size_t i) { return *params_[i]; }
  const Parameter& at(std::size_t i) const { return *params_[i]; }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Adam over every non-frozen parameter of a store.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& store) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      Parameter& p = store.at(i);
      if (p.frozen) continue;
      adam_step(p.value, p.grad, states_[p.name], cfg_);
    }
  }

  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::map<std::string, AdamState> states_;
};

}  // namespace peace
