#pragma once

#include <functional>
#include <vector>

#include "spade/core/tensor.hpp"
#include "spade/diffusion/schedule.hpp"

namespace spade {

// A denoiser maps (x_t, t) to a predicted noise tensor of the same shape.
// Conditioning and capture live inside the closure.
using Denoiser = std::function<Tensor(const Tensor&, std::size_t)>;

// x_t = sqrt(ab_t) x + sqrt(1 - ab_t) eps
inline Tensor forward_noise(const Tensor& x, std::size_t t, const Tensor& eps,
                            const NoiseSchedule& s) {
  if (x.shape() != eps.shape())
    throw ContractError("forward_noise: x and eps shapes differ");
  if (t > s.T) throw ContractError("forward_noise: t out of range");
  return add(scale(x, s.sqrt_ab(t)), scale(eps, s.sqrt_one_minus_ab(t)));
}

// x_{t-1} = sqrt(ab_{t-1}) (x_t - sqrt(1-ab_t) eps) / sqrt(ab_t)
//           + sqrt(1-ab_{t-1}) eps
inline Tensor ddim_step(const Tensor& x_t, std::size_t t, const Tensor& eps_pred,
                        const NoiseSchedule& s) {
  if (t < 1 || t > s.T) throw ContractError("ddim_step: t out of range");
  Tensor x0_hat = scale(sub(x_t, scale(eps_pred, s.sqrt_one_minus_ab(t))), 1.0 / s.sqrt_ab(t));
  return add(scale(x0_hat, s.sqrt_ab(t - 1)), scale(eps_pred, s.sqrt_one_minus_ab(t - 1)));
}

// Deterministic sampling from a terminal latent back to the data end.
inline Tensor ddim_sample(const Tensor& z, const Denoiser& eps_fn, const NoiseSchedule& s) {
  Tensor x = z;
  for (std::size_t t = s.T; t >= 1; --t) x = ddim_step(x, t, eps_fn(x, t), s);
  return x;
}

// One inversion update: given the noise estimate at (x_{t-1}, t-1), solve the
// sampling step for x_t.
//   x_t = sqrt(ab_t) (x_{t-1} - sqrt(1-ab_{t-1}) eps_hat) / sqrt(ab_{t-1})
//         + sqrt(1-ab_t) eps_hat
inline Tensor ddim_invert_step(const Tensor& x_prev, std::size_t t, const Tensor& eps_hat,
                               const NoiseSchedule& s) {
  if (t < 1 || t > s.T) throw ContractError("ddim_invert_step: t out of range");
  Tensor x0_style = scale(sub(x_prev, scale(eps_hat, s.sqrt_one_minus_ab(t - 1))),
                          1.0 / s.sqrt_ab(t - 1));
  return add(scale(x0_style, s.sqrt_ab(t)), scale(eps_hat, s.sqrt_one_minus_ab(t)));
}

// First-order inversion from the data end to the terminal latent. Step index
// k of the trajectory evaluates the denoiser at (x_k, t=k); k = 0 is the data
// end.
inline Tensor ddim_invert(const Tensor& x, const Denoiser& eps_fn, const NoiseSchedule& s) {
  Tensor xt = x;
  for (std::size_t t = 1; t <= s.T; ++t) xt = ddim_invert_step(xt, t, eps_fn(xt, t - 1), s);
  return xt;
}

// Round-trip reconstruction error, the probe used to compare step counts.
inline double inversion_rmse(const Tensor& x, const Denoiser& eps_fn, const NoiseSchedule& s) {
  NoGradGuard ng;
  Tensor z = ddim_invert(x, eps_fn, s);
  Tensor back = ddim_sample(z, eps_fn, s);
  double sse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = back.data()[i] - x.data()[i];
    sse += d * d;
  }
  return std::sqrt(sse / static_cast<double>(x.size()));
}

}  // namespace spade
