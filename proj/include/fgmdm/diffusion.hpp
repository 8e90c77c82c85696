#pragma once

// Gaussian diffusion with clean-sample (x0) prediction: noise schedules,
// forward noising, the closed-form posterior step, and classifier-free
// guidance mixing. Schedule math is kept in double regardless of the tensor
// scalar type.

#include <cmath>
#include <string>
#include <vector>

#include "fgmdm/common.hpp"
#include "fgmdm/tensor.hpp"

namespace fgmdm {

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

struct NoiseSchedule {
  std::string kind;  // "cosine" or "linear"
  int steps = 0;     // T
  // 1-based: index 0 unused for beta/alpha; alpha_bar[0] == 1 by definition
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double beta_at(int t) const {
    check_t(t);
    return beta[static_cast<std::size_t>(t)];
  }
  double alpha_at(int t) const {
    check_t(t);
    return alpha[static_cast<std::size_t>(t)];
  }
  /// Valid for t in [0, T]; alpha_bar(0) == 1.
  double alpha_bar_at(int t) const {
    if (t < 0 || t > steps)
      throw ContractError("schedule: t out of range [0,T]");
    return alpha_bar[static_cast<std::size_t>(t)];
  }

 private:
  void check_t(int t) const {
    if (t < 1 || t > steps)
      throw ContractError("schedule: t out of range [1,T]");
  }
};

/// Run-level diffusion settings shared by training and sampling.
struct DiffusionConfig {
  int total_steps = 1000;         // T
  std::string schedule = "cosine";
  double guidance_scale = 2.5;    // s; 1 disables the unconditional branch
  double dropout_p = 0.1;         // condition dropout during training

  void validate() const {
    if (total_steps < 1)
      throw ConfigError("diffusion: total_steps must be >= 1");
    if (schedule != "cosine" && schedule != "linear")
      throw ConfigError("diffusion: unknown schedule kind '" + schedule + "'");
    if (guidance_scale < 0.0)
      throw ConfigError("diffusion: guidance scale must be >= 0");
    if (dropout_p < 0.0 || dropout_p > 1.0)
      throw ConfigError("diffusion: dropout must be in [0, 1]");
  }
};

/// "cosine": squared-cosine alpha-bar profile with offset s and betas clipped
/// at 0.999. "linear": betas from 1e-4 to 0.02 inclusive.
inline NoiseSchedule make_schedule(const std::string& kind, int steps,
                                   double cosine_s = 0.008) {
  if (steps < 1) throw ConfigError("schedule: steps must be >= 1");
  NoiseSchedule ns;
  ns.kind = kind;
  ns.steps = steps;
  ns.beta.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  ns.alpha.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  ns.alpha_bar.assign(static_cast<std::size_t>(steps) + 1, 1.0);

  if (kind == "linear") {
    const double b0 = 1e-4, b1 = 0.02;
    for (int t = 1; t <= steps; ++t) {
      const double frac = steps == 1 ? 0.0 : double(t - 1) / double(steps - 1);
      ns.beta[t] = b0 + (b1 - b0) * frac;
    }
  } else if (kind == "cosine") {
    const double half_pi = 1.5707963267948966;
    auto f = [&](double t) {
      const double u = (t / steps + cosine_s) / (1.0 + cosine_s);
      const double c = std::cos(u * half_pi);
      return c * c;
    };
    const double f0 = f(0.0);
    double prev = 1.0;
    for (int t = 1; t <= steps; ++t) {
      const double cur = f(double(t)) / f0;
      ns.beta[t] = std::min(0.999, 1.0 - cur / prev);
      prev = cur;
    }
  } else {
    throw ConfigError("schedule: unknown kind '" + kind + "'");
  }

  for (int t = 1; t <= steps; ++t) {
    ns.alpha[t] = 1.0 - ns.beta[t];
    ns.alpha_bar[t] = ns.alpha_bar[t - 1] * ns.alpha[t];
  }
  return ns;
}

// ---------------------------------------------------------------------------
// Forward noising
// ---------------------------------------------------------------------------

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
template <typename T>
TensorT<T> q_sample(const TensorT<T>& x0, int t, const NoiseSchedule& ns,
                    const TensorT<T>& eps) {
  if (!x0.same_shape(eps))
    throw ContractError("q_sample: noise shape must match x0");
  const double ab = ns.alpha_bar_at(t);
  if (t < 1) throw ContractError("q_sample: t must be >= 1");
  const T c0 = static_cast<T>(std::sqrt(ab));
  const T ce = static_cast<T>(std::sqrt(1.0 - ab));
  TensorT<T> out = x0;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data[i] = c0 * x0.data[i] + ce * eps.data[i];
  return out;
}

template <typename T>
TensorT<T> gaussian_like(const TensorT<T>& ref, Rng& rng) {
  TensorT<T> out = TensorT<T>::zeros(ref.shape);
  for (auto& x : out.data) x = static_cast<T>(rng.normal());
  return out;
}

// ---------------------------------------------------------------------------
// Reverse (posterior) step
// ---------------------------------------------------------------------------

struct PosteriorCoeffs {
  double x0_coef = 0;  // multiplies the predicted clean sample
  double xt_coef = 0;  // multiplies the current noisy sample
  double var = 0;      // posterior variance
};

/// Coefficients of q(x_{t-1} | x_t, x0) for t in [1, T]:
///   mean = x0_coef * x0 + xt_coef * x_t,  variance = var.
inline PosteriorCoeffs posterior_coeffs(const NoiseSchedule& ns, int t) {
  const double b = ns.beta_at(t);
  const double a = ns.alpha_at(t);
  const double ab_t = ns.alpha_bar_at(t);
  const double ab_prev = ns.alpha_bar_at(t - 1);
  PosteriorCoeffs c;
  c.x0_coef = std::sqrt(ab_prev) * b / (1.0 - ab_t);
  c.xt_coef = std::sqrt(a) * (1.0 - ab_prev) / (1.0 - ab_t);
  c.var = b * (1.0 - ab_prev) / (1.0 - ab_t);
  return c;
}

/// One reverse step. At t == 1 the predicted clean sample is returned exactly
/// and no noise is consumed from the generator.
template <typename T>
TensorT<T> posterior_step(const TensorT<T>& xt, const TensorT<T>& x0_hat,
                          int t, const NoiseSchedule& ns, Rng& rng) {
  if (!xt.same_shape(x0_hat))
    throw ContractError("posterior_step: shape mismatch");
  if (t < 1 || t > ns.steps)
    throw ContractError("posterior_step: t out of range [1,T]");
  if (t == 1) return x0_hat;
  const PosteriorCoeffs c = posterior_coeffs(ns, t);
  const T c0 = static_cast<T>(c.x0_coef);
  const T ct = static_cast<T>(c.xt_coef);
  const T sd = static_cast<T>(std::sqrt(c.var));
  TensorT<T> out = xt;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data[i] = c0 * x0_hat.data[i] + ct * xt.data[i] +
                  sd * static_cast<T>(rng.normal());
  return out;
}

// ---------------------------------------------------------------------------
// Classifier-free guidance
// ---------------------------------------------------------------------------

/// guided = null + scale * (cond - null). scale == 1 returns cond unchanged.
template <typename T>
TensorT<T> guidance_combine(const TensorT<T>& cond, const TensorT<T>& null_pred,
                            T scale) {
  if (!cond.same_shape(null_pred))
    throw ContractError("guidance_combine: shape mismatch");
  if (scale == T(1)) return cond;
  TensorT<T> out = cond;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data[i] =
        null_pred.data[i] + scale * (cond.data[i] - null_pred.data[i]);
  return out;
}

}  // namespace fgmdm
