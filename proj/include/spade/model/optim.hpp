#pragma once

#include <vector>

#include "spade/core/tensor.hpp"

namespace spade {

// Plain SGD with classical momentum and an optional step-decay schedule.
class SgdOptimizer {
public:
  SgdOptimizer(std::vector<Tensor> params, double lr, double momentum = 0.9)
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    for (const auto& p : params_) velocity_.emplace_back(p.size(), 0.0);
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      auto& v = velocity_[i];
      auto& x = p.mutable_data();
      for (std::size_t k = 0; k < x.size(); ++k) {
        v[k] = momentum_ * v[k] + g[k];
        x[k] -= lr_ * v[k];
      }
    }
  }

  const std::vector<Tensor>& params() const { return params_; }

private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_, momentum_;
};

}  // namespace spade
