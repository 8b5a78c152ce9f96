#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "spade/core/errors.hpp"

namespace spade {

// Discrete noising schedule. alphas[k] is defined for steps k = 1..T
// (alphas[0] unused); alpha_bars[t] = prod_{k<=t} alpha_k with alpha_bars[0] = 1.
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> alphas;      // size T+1, index 0 unused
  std::vector<double> alpha_bars;  // size T+1

  double sqrt_ab(std::size_t t) const { return std::sqrt(alpha_bars[t]); }
  double sqrt_one_minus_ab(std::size_t t) const { return std::sqrt(1.0 - alpha_bars[t]); }

  void validate() const {
    if (T < 1) throw ContractError("schedule needs at least one step");
    if (alphas.size() != T + 1 || alpha_bars.size() != T + 1)
      throw ContractError("schedule arrays must have T+1 entries");
    if (alpha_bars[0] != 1.0) throw ContractError("alpha_bar[0] must be 1");
    for (std::size_t k = 1; k <= T; ++k) {
      if (!(alphas[k] > 0.0 && alphas[k] < 1.0))
        throw ContractError("alpha out of (0,1) at step " + std::to_string(k));
      if (!(alpha_bars[k] < alpha_bars[k - 1]))
        throw ContractError("alpha_bar not strictly decreasing at step " + std::to_string(k));
    }
  }
};

// Conventional linear beta ramp; beta_1 = beta_lo, beta_T = beta_hi.
inline NoiseSchedule linear_beta_schedule(std::size_t T, double beta_lo = 1e-4,
                                          double beta_hi = 0.02) {
  if (T < 1) throw ContractError("schedule needs at least one step");
  NoiseSchedule s;
  s.T = T;
  s.alphas.assign(T + 1, 0.0);
  s.alpha_bars.assign(T + 1, 0.0);
  s.alpha_bars[0] = 1.0;
  for (std::size_t k = 1; k <= T; ++k) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(k - 1) / static_cast<double>(T - 1);
    const double beta = beta_lo + (beta_hi - beta_lo) * frac;
    s.alphas[k] = 1.0 - beta;
    s.alpha_bars[k] = s.alpha_bars[k - 1] * s.alphas[k];
  }
  s.validate();
  return s;
}

}  // namespace spade
