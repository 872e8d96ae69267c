#pragma once

#include <map>
#include <string>
#include <vector>

#include "odg/rng.hpp"
#include "odg/tensor.hpp"

namespace odg {

/// Named parameter tensors plus matching gradient accumulators. Iteration
/// order is the lexicographic name order, which keeps initialization and
/// serialization deterministic.
class ParamStore {
 public:
  Tensor& create(const std::string& name, std::vector<int> shape) {
    if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    params_.emplace(name, Tensor(shape));
    grads_.emplace(name, Tensor(shape));
    return params_.at(name);
  }

  Tensor& create_he_normal(const std::string& name, std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor& t = create(name, std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.normal(0.0, stddev);
    return t;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Tensor& value(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& value(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  Tensor& grad(const std::string& name) {
    auto it = grads_.find(name);
    if (it == grads_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  void add_grad(const std::string& name, const Tensor& g) {
    Tensor& acc = grad(name);
    if (!acc.same_shape(g))
      throw ShapeError("gradient shape " + Tensor::shape_str(g.shape) +
                       " does not match parameter " + name + " " + Tensor::shape_str(acc.shape));
    for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i];
  }

  void zero_grad() {
    for (auto& [name, g] : grads_) std::fill(g.data.begin(), g.data.end(), 0.0);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, t] : params_) out.push_back(name);
    return out;
  }

  std::size_t size() const { return params_.size(); }

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> grads_;
};

/// SGD with momentum and decoupled-from-nothing classic weight decay
/// (gradient += wd * w before the momentum update).
class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(ParamStore& ps) {
    for (const std::string& name : ps.names()) {
      Tensor& w = ps.value(name);
      Tensor& g = ps.grad(name);
      auto it = velocity_.find(name);
      if (it == velocity_.end()) it = velocity_.emplace(name, Tensor(w.shape)).first;
      Tensor& v = it->second;
      for (std::size_t i = 0; i < w.data.size(); ++i) {
        const double grad = g.data[i] + weight_decay_ * w.data[i];
        v.data[i] = momentum_ * v.data[i] + grad;
        w.data[i] -= lr_ * v.data[i];
      }
    }
  }

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  std::map<std::string, Tensor> velocity_;
};

}  // namespace odg
