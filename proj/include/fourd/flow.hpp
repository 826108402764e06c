#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "fourd/common.hpp"
#include "fourd/model.hpp"

namespace fourd {

// ---------------------------------------------------------------------------
// Rectified-flow primitives on flat vectors: z_tau = (1 - tau) z0 + tau eps.

template <typename Real>
std::vector<Real> forward_interpolate(const std::vector<Real>& z0,
                                      const std::vector<Real>& eps, Real tau) {
  if (z0.size() != eps.size()) throw InputError("forward_interpolate: shape mismatch");
  if (tau < Real(0) || tau > Real(1)) throw InputError("forward_interpolate: tau outside [0,1]");
  std::vector<Real> out(z0.size());
  for (std::size_t i = 0; i < z0.size(); ++i)
    out[i] = (Real(1) - tau) * z0[i] + tau * eps[i];
  return out;
}

// One-step denoised estimate f = z_tau - tau * v.
template <typename Real>
std::vector<Real> clean_estimate(const std::vector<Real>& z_tau, Real tau,
                                 const std::vector<Real>& v) {
  if (z_tau.size() != v.size()) throw InputError("clean_estimate: shape mismatch");
  if (tau < Real(0) || tau > Real(1)) throw InputError("clean_estimate: tau outside [0,1]");
  std::vector<Real> out(z_tau.size());
  for (std::size_t i = 0; i < z_tau.size(); ++i) out[i] = z_tau[i] - tau * v[i];
  return out;
}

// Euler ODE integration from tau = 1 down to 0 with step 1/n_steps. The
// field is evaluated at tau = 1, 1 - dt, ..., dt.
template <typename Real, typename Field>
std::vector<Real> euler_sample_from(std::vector<Real> z, const Field& field,
                                    int n_steps) {
  if (n_steps < 1) throw InputError("euler_sample: n_steps must be >= 1");
  const Real dt = Real(1) / static_cast<Real>(n_steps);
  for (int step = 0; step < n_steps; ++step) {
    const Real tau = Real(1) - static_cast<Real>(step) * dt;
    const std::vector<Real> v = field(z, tau);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= v[i] * dt;
  }
  return z;
}

template <typename Real, typename Field>
std::vector<Real> euler_sample(const Field& field, std::size_t dim, int n_steps,
                               std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Real> z(dim);
  for (auto& e : z) e = static_cast<Real>(rng.normal());
  return euler_sample_from(std::move(z), field, n_steps);
}

// ---------------------------------------------------------------------------
// Conditional Flow Matching loss against the straight-path target eps - z0.
// Accumulates parameter gradients into the model's grad store.

template <typename Real>
Real cfm_loss(VelocityModel<Real>& model, const LatentGrid<Real>& z0,
              const typename VelocityModel<Real>::Conditioning& cond, Real tau,
              const LatentGrid<Real>& eps) {
  if (!z0.same_shape(eps)) throw InputError("cfm_loss: z0/eps shape mismatch");
  LatentGrid<Real> z_tau = z0;
  for (std::size_t i = 0; i < z_tau.values.size(); ++i)
    z_tau.values[i] = (Real(1) - tau) * z0.values[i] + tau * eps.values[i];

  const LatentGrid<Real> v = model.forward(z_tau, tau, cond);
  Real loss = 0;
  LatentGrid<Real> d_v = v;
  for (std::size_t i = 0; i < v.values.size(); ++i) {
    const Real diff = v.values[i] - (eps.values[i] - z0.values[i]);
    loss += diff * diff;
    d_v.values[i] = 2 * diff;
  }
  model.backward(d_v);
  return loss;
}

// ---------------------------------------------------------------------------
// Flow Matching Distillation. The model is a frozen differentiable function;
// the gradient target is the rendered latent.

template <typename Real>
struct FMDConfig {
  std::function<Real(Real)> omega = [](Real) { return Real(1); };
  Real lambda_fmd = Real(1);
  bool sds_gradient = false;  // truncated SDS-style gradient instead of the full path
};

template <typename Real>
struct FMDResult {
  Real loss = 0;
  LatentGrid<Real> grad_rendered;
};

template <typename Real>
FMDResult<Real> fmd_loss(const LatentGrid<Real>& rendered, VelocityModel<Real>& model,
                         const typename VelocityModel<Real>::Conditioning& cond,
                         const FMDConfig<Real>& config, std::uint64_t seed) {
  Rng rng(seed);
  const Real tau = static_cast<Real>(rng.uniform());
  LatentGrid<Real> eps = rendered;
  for (auto& e : eps.values) e = static_cast<Real>(rng.normal());

  LatentGrid<Real> z_tau = rendered;
  for (std::size_t i = 0; i < z_tau.values.size(); ++i)
    z_tau.values[i] = (Real(1) - tau) * rendered.values[i] + tau * eps.values[i];

  const Real w = config.omega(tau);
  FMDResult<Real> res;
  res.grad_rendered = LatentGrid<Real>(rendered.n_views, rendered.f, rendered.channels,
                                       rendered.height, rendered.width);
  if (w == Real(0)) return res;

  const LatentGrid<Real> v = model.forward(z_tau, tau, cond);
  LatentGrid<Real> g = rendered;  // dL/d(clean)
  for (std::size_t i = 0; i < rendered.values.size(); ++i) {
    const Real clean = z_tau.values[i] - tau * v.values[i];
    const Real diff = clean - rendered.values[i];
    res.loss += w * diff * diff;
    g.values[i] = 2 * w * diff;
  }

  if (config.sds_gradient) {
    // sg[f_theta] - rendered: gradient only through the direct -rendered term.
    for (std::size_t i = 0; i < g.values.size(); ++i)
      res.grad_rendered.values[i] = -g.values[i];
    return res;
  }

  // Full path: dL/dz = g - tau * J^T g, dL/dr = (1 - tau) dL/dz - g.
  LatentGrid<Real> d_v = g;
  for (auto& e : d_v.values) e *= -tau;
  model.zero_grads();  // parameter grads discarded; the model stays frozen
  const LatentGrid<Real> jt_g = model.backward(d_v);
  for (std::size_t i = 0; i < g.values.size(); ++i)
    res.grad_rendered.values[i] =
        (Real(1) - tau) * (g.values[i] + jt_g.values[i]) - g.values[i];
  return res;
}

// ---------------------------------------------------------------------------
// Toy 2-D velocity field: a plain feed-forward network used to validate the
// CFM objective end to end on point datasets.

class ToyVelocityField {
 public:
  static constexpr int kTauFeat = 8;
  static constexpr int kIn = 2 + kTauFeat;
  static constexpr int kHidden = 64;

  explicit ToyVelocityField(std::uint64_t seed) {
    w1_ = params_.add("w1", {kHidden, kIn});
    b1_ = params_.add("b1", {kHidden});
    w2_ = params_.add("w2", {kHidden, kHidden});
    b2_ = params_.add("b2", {kHidden});
    w3_ = params_.add("w3", {2, kHidden});
    b3_ = params_.add("b3", {2});
    Rng rng(seed);
    auto fill = [&](std::size_t off, std::size_t rows, std::size_t cols) {
      const real scale = 1.0 / std::sqrt(static_cast<real>(cols));
      for (std::size_t i = 0; i < rows * cols; ++i)
        params_.data[off + i] = rng.uniform(-1, 1) * scale;
    };
    fill(w1_, kHidden, kIn);
    fill(w2_, kHidden, kHidden);
    fill(w3_, 2, kHidden);
    grads_.assign(params_.data.size(), 0);
  }

  std::array<real, 2> forward(const std::array<real, 2>& z, real tau) {
    in_.resize(kIn);
    in_[0] = z[0];
    in_[1] = z[1];
    for (int i = 0; i < kTauFeat / 2; ++i) {
      const real f = std::pow(2.0, i);
      in_[2 + 2 * i] = std::sin(tau * f * 3.14159265358979323846);
      in_[2 + 2 * i + 1] = std::cos(tau * f * 3.14159265358979323846);
    }
    h1_.assign(kHidden, 0);
    linear_forward(in_.data(), 1, kIn, params_.at(w1_), params_.at(b1_), kHidden, h1_.data());
    for (auto& e : h1_) e = std::tanh(e);
    h2_.assign(kHidden, 0);
    linear_forward(h1_.data(), 1, kHidden, params_.at(w2_), params_.at(b2_), kHidden, h2_.data());
    for (auto& e : h2_) e = std::tanh(e);
    std::vector<real> out(2);
    linear_forward(h2_.data(), 1, kHidden, params_.at(w3_), params_.at(b3_), 2, out.data());
    return {out[0], out[1]};
  }

  void backward(const std::array<real, 2>& d_out) {
    std::vector<real> dh2(kHidden, 0);
    linear_backward(h2_.data(), d_out.data(), 1, kHidden, params_.at(w3_), 2,
                    dh2.data(), grads_.data() + w3_, grads_.data() + b3_);
    for (int i = 0; i < kHidden; ++i) dh2[i] *= (1 - h2_[i] * h2_[i]);
    std::vector<real> dh1(kHidden, 0);
    linear_backward(h1_.data(), dh2.data(), 1, kHidden, params_.at(w2_), kHidden,
                    dh1.data(), grads_.data() + w2_, grads_.data() + b2_);
    for (int i = 0; i < kHidden; ++i) dh1[i] *= (1 - h1_[i] * h1_[i]);
    linear_backward(in_.data(), dh1.data(), 1, kIn, params_.at(w1_), kHidden,
                    static_cast<real*>(nullptr), grads_.data() + w1_, grads_.data() + b1_);
  }

  void zero_grads() { grads_.assign(params_.data.size(), 0); }

  void sgd_step(real lr) {
    for (std::size_t i = 0; i < params_.data.size(); ++i)
      params_.data[i] -= lr * grads_[i];
  }

  ParamStore<real>& params() { return params_; }

 private:
  ParamStore<real> params_;
  std::vector<real> grads_;
  std::size_t w1_, b1_, w2_, b2_, w3_, b3_;
  std::vector<real> in_, h1_, h2_;
};

enum class ToyDataset { kPointMass, kGaussian, kMixture };

inline std::array<real, 2> toy_sample(ToyDataset ds, Rng& rng) {
  switch (ds) {
    case ToyDataset::kPointMass:
      return {3.0, -1.0};
    case ToyDataset::kGaussian:
      return {rng.normal(), rng.normal()};
    case ToyDataset::kMixture: {
      const real cx = rng.uniform() < 0.5 ? -2.0 : 2.0;
      return {cx + rng.normal(0, 0.3), rng.normal(0, 0.3)};
    }
  }
  return {0, 0};
}

struct ToyTrainStats {
  std::vector<real> losses;  // one smoothed entry per step
};

// Plain gradient descent on the CFM objective, mini-batches of 64, lr 1e-2.
inline ToyTrainStats train_toy(ToyVelocityField& field, ToyDataset ds, int steps,
                               std::uint64_t seed, real lr = 1e-2,
                               int batch = 64) {
  Rng rng(seed);
  ToyTrainStats stats;
  stats.losses.reserve(steps);
  for (int step = 0; step < steps; ++step) {
    field.zero_grads();
    real loss = 0;
    for (int b = 0; b < batch; ++b) {
      const std::array<real, 2> z0 = toy_sample(ds, rng);
      const std::array<real, 2> eps{rng.normal(), rng.normal()};
      const real tau = rng.uniform();
      const std::array<real, 2> z_tau{(1 - tau) * z0[0] + tau * eps[0],
                                      (1 - tau) * z0[1] + tau * eps[1]};
      const std::array<real, 2> v = field.forward(z_tau, tau);
      const std::array<real, 2> u{eps[0] - z0[0], eps[1] - z0[1]};
      std::array<real, 2> d{2 * (v[0] - u[0]) / batch, 2 * (v[1] - u[1]) / batch};
      loss += ((v[0] - u[0]) * (v[0] - u[0]) + (v[1] - u[1]) * (v[1] - u[1])) / batch;
      field.backward(d);
    }
    field.sgd_step(lr);
    stats.losses.push_back(loss);
  }
  return stats;
}

inline std::array<real, 2> toy_euler_sample(ToyVelocityField& field, int n_steps,
                                            Rng& rng) {
  std::vector<real> z{rng.normal(), rng.normal()};
  auto f = [&](const std::vector<real>& zz, real tau) {
    const std::array<real, 2> v = field.forward({zz[0], zz[1]}, tau);
    return std::vector<real>{v[0], v[1]};
  };
  z = euler_sample_from(std::move(z), f, n_steps);
  return {z[0], z[1]};
}

}  // namespace fourd
