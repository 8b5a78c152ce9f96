#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"

namespace spade {

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = true;
  std::size_t coords_checked = 0;
  std::string worst;  // "param/index" of the worst coordinate
};

// Central-difference gradient verification.
//
// f must rebuild its graph from the current parameter values on every call and
// return a scalar. Each selected coordinate is perturbed by +/-step and the
// numeric slope compared against the recorded analytic gradient with
// rel = |a - n| / max(|a|, |n|, 1.0).
//
// When a parameter has more coordinates than max_coords_per_param, a seeded
// subset is sampled so large models stay checkable in bounded time.
inline GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                         std::vector<Tensor> params,
                                         double step = 1e-3,
                                         double tol = 1e-4,
                                         std::size_t max_coords_per_param = 24,
                                         std::uint64_t seed = 0) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tape::active().clear();
  Tensor loss = f();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0));

  GradCheckReport rep;
  Rng pick(child_seed(seed, 0x9e3779b9ULL));
  NoGradGuard ng;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<std::size_t> coords;
    if (p.size() <= max_coords_per_param) {
      for (std::size_t i = 0; i < p.size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < max_coords_per_param; ++i)
        coords.push_back(static_cast<std::size_t>(
            pick.uniform_int(0, static_cast<long>(p.size()) - 1)));
    }
    for (std::size_t ci : coords) {
      const double orig = p.data()[ci];
      p.mutable_data()[ci] = orig + step;
      const double fp = f().item();
      p.mutable_data()[ci] = orig - step;
      const double fm = f().item();
      p.mutable_data()[ci] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[pi][ci];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1.0});
      ++rep.coords_checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst = "param" + std::to_string(pi) + "/" + std::to_string(ci);
      }
    }
  }
  rep.pass = rep.max_rel_error <= tol;
  for (auto& p : params) p.zero_grad();
  return rep;
}

}  // namespace spade
