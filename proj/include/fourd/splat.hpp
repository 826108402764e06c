#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <unordered_map>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "fourd/common.hpp"
#include "fourd/geometry.hpp"

namespace fourd {

// ---------------------------------------------------------------------------
// 2D splats and the differentiable rasterizer.
// ---------------------------------------------------------------------------

// A projected Gaussian: pixel-space mean, symmetric 2x2 covariance stored as
// (a, b, c) for [[a, b], [b, c]], view depth, opacity in (0,1), RGB color.
template <typename Real>
struct Splat2D {
  Real mean_x = 0, mean_y = 0;
  Real cov_a = 1, cov_b = 0, cov_c = 1;
  Real depth = 0;
  Real opacity = 0;
  Real color[3] = {0, 0, 0};
};

template <typename Real>
struct Raster {
  int height = 0, width = 0;
  std::vector<Real> rgb;            // height*width*3, row-major interleaved
  std::vector<Real> transmittance;  // height*width, residual T after compositing

  Raster() = default;
  Raster(int h, int w)
      : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, Real(0)),
        transmittance(static_cast<std::size_t>(h) * w, Real(1)) {}

  Real* px(int y, int x) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const Real* px(int y, int x) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
};

namespace detail {

// Compositing order: ascending depth, original index breaks ties.
template <typename Real>
std::vector<std::size_t> depth_order(const std::vector<Splat2D<Real>>& splats) {
  std::vector<std::size_t> order(splats.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return splats[a].depth < splats[b].depth;
  });
  return order;
}

// Conservative pixel bounding box: beyond it the Gaussian falls below 1e-17,
// negligible against the finite-difference tolerances.
template <typename Real>
struct SplatBox {
  int x0, x1, y0, y1;  // half-open
  Real inv_a, inv_b, inv_c;
  bool valid;
};

template <typename Real>
SplatBox<Real> splat_box(const Splat2D<Real>& g, int height, int width) {
  SplatBox<Real> box{};
  const Real det = g.cov_a * g.cov_c - g.cov_b * g.cov_b;
  if (!(det > Real(0)) || !(g.cov_a > Real(0))) {
    box.valid = false;
    return box;
  }
  box.inv_a = g.cov_c / det;
  box.inv_b = -g.cov_b / det;
  box.inv_c = g.cov_a / det;
  // Largest eigenvalue bound: a + c.
  // 7 sigma of the (upper-bound) trace: truncation ~2e-11, below every
  // finite-difference tolerance used by the gradient checks.
  const Real r = Real(7) * std::sqrt(g.cov_a + g.cov_c);
  box.x0 = std::max(0, static_cast<int>(std::floor(g.mean_x - r)));
  box.x1 = std::min(width, static_cast<int>(std::ceil(g.mean_x + r)) + 1);
  box.y0 = std::max(0, static_cast<int>(std::floor(g.mean_y - r)));
  box.y1 = std::min(height, static_cast<int>(std::ceil(g.mean_y + r)) + 1);
  box.valid = box.x0 < box.x1 && box.y0 < box.y1;
  return box;
}

}  // namespace detail

// Front-to-back alpha compositing over a black background.
template <typename Real>
Raster<Real> rasterize(const std::vector<Splat2D<Real>>& splats, int height, int width) {
  Raster<Real> out(height, width);
  const auto order = detail::depth_order(splats);
  std::vector<detail::SplatBox<Real>> boxes(splats.size());
  for (std::size_t i = 0; i < splats.size(); ++i)
    boxes[i] = detail::splat_box(splats[i], height, width);

  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Real px = static_cast<Real>(x) + Real(0.5);
      const Real py = static_cast<Real>(y) + Real(0.5);
      Real T = 1;
      Real* rgb = out.px(y, x);
      for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const std::size_t i = order[oi];
        const auto& b = boxes[i];
        if (!b.valid || x < b.x0 || x >= b.x1 || y < b.y0 || y >= b.y1) continue;
        const auto& g = splats[i];
        const Real dx = px - g.mean_x;
        const Real dy = py - g.mean_y;
        const Real e = Real(0.5) * (b.inv_a * dx * dx + 2 * b.inv_b * dx * dy + b.inv_c * dy * dy);
        const Real alpha = g.opacity * std::exp(-e);
        const Real w = T * alpha;
        rgb[0] += w * g.color[0];
        rgb[1] += w * g.color[1];
        rgb[2] += w * g.color[2];
        T *= (1 - alpha);
      }
      out.transmittance[static_cast<std::size_t>(y) * width + x] = T;
    }
  }
  return out;
}

// Forward plus analytic gradients of sum(d_rgb * image) w.r.t. every splat
// parameter. d_rgb has the same layout as Raster::rgb. The depth gradient is
// zero (ordering is piecewise constant).
template <typename Real>
Raster<Real> rasterize_with_grad(const std::vector<Splat2D<Real>>& splats, int height, int width,
                                 const std::vector<Real>& d_rgb,
                                 std::vector<Splat2D<Real>>& d_splats) {
  if (d_rgb.size() != static_cast<std::size_t>(height) * width * 3)
    throw InputError("rasterize_with_grad: gradient image size mismatch");
  Raster<Real> out(height, width);
  d_splats.assign(splats.size(), Splat2D<Real>{});
  for (auto& d : d_splats) {
    d.cov_a = d.cov_b = d.cov_c = 0;
    d.mean_x = d.mean_y = d.depth = d.opacity = 0;
  }
  const auto order = detail::depth_order(splats);
  std::vector<detail::SplatBox<Real>> boxes(splats.size());
  for (std::size_t i = 0; i < splats.size(); ++i)
    boxes[i] = detail::splat_box(splats[i], height, width);

  struct Contrib {
    std::size_t idx;
    Real alpha, T, e, gx, gy;  // gx, gy = (Sigma^-1 d) components
  };
  std::vector<Contrib> hits;
  hits.reserve(64);

  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Real px = static_cast<Real>(x) + Real(0.5);
      const Real py = static_cast<Real>(y) + Real(0.5);
      const Real* dpx = d_rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
      hits.clear();
      Real T = 1;
      Real* rgb = out.px(y, x);
      for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const std::size_t i = order[oi];
        const auto& b = boxes[i];
        if (!b.valid || x < b.x0 || x >= b.x1 || y < b.y0 || y >= b.y1) continue;
        const auto& g = splats[i];
        const Real dx = px - g.mean_x;
        const Real dy = py - g.mean_y;
        const Real gx = b.inv_a * dx + b.inv_b * dy;
        const Real gy = b.inv_b * dx + b.inv_c * dy;
        const Real e = Real(0.5) * (dx * gx + dy * gy);
        const Real alpha = g.opacity * std::exp(-e);
        const Real w = T * alpha;
        rgb[0] += w * g.color[0];
        rgb[1] += w * g.color[1];
        rgb[2] += w * g.color[2];
        hits.push_back({i, alpha, T, e, gx, gy});
        T *= (1 - alpha);
      }
      out.transmittance[static_cast<std::size_t>(y) * width + x] = T;

      // Back-to-front: S accumulates sum_{j>i} color_j * alpha_j * T_j per
      // channel; dL/dalpha_i = <dpx, T_i*color_i> - <dpx, S_i> / (1 - alpha_i).
      Real S[3] = {0, 0, 0};
      for (std::size_t h = hits.size(); h-- > 0;) {
        const auto& c = hits[h];
        const auto& g = splats[c.idx];
        auto& d = d_splats[c.idx];
        const Real w = c.T * c.alpha;
        d.color[0] += dpx[0] * w;
        d.color[1] += dpx[1] * w;
        d.color[2] += dpx[2] * w;
        Real d_alpha = 0;
        for (int ch = 0; ch < 3; ++ch)
          d_alpha += dpx[ch] * (c.T * g.color[ch] - S[ch] / (1 - c.alpha));
        // alpha = opacity * exp(-e)
        const Real gauss = c.alpha / std::max(g.opacity, std::numeric_limits<Real>::min());
        d.opacity += d_alpha * gauss;
        const Real d_e = -d_alpha * c.alpha;
        // e = 0.5 d^T M d with d = pixel - mean: de/dmean = -M d.
        const Real dx = px - g.mean_x;
        const Real dy = py - g.mean_y;
        d.mean_x += -d_e * c.gx;
        d.mean_y += -d_e * c.gy;
        // de/dSigma = -0.5 (M d)(M d)^T; b appears twice.
        d.cov_a += d_e * (Real(-0.5) * c.gx * c.gx);
        d.cov_b += d_e * (-c.gx * c.gy);
        d.cov_c += d_e * (Real(-0.5) * c.gy * c.gy);
        (void)dx;
        (void)dy;
        for (int ch = 0; ch < 3; ++ch) S[ch] += g.color[ch] * w;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Canonical 4D Gaussians and the deformation field.
// ---------------------------------------------------------------------------

struct Gaussian4D {
  Vec3 mu{};
  Quat q{1, 0, 0, 0};
  Vec3 log_scale{};
  real opacity_logit = 0;  // sigmoid -> opacity
  Vec3 color{};
};

inline real sigmoid(real x) { return 1.0 / (1.0 + std::exp(-x)); }
inline real logit(real p) { return std::log(p / (1.0 - p)); }

// Deformed snapshot of a Gaussian at one timestamp. The quaternion is the raw
// additive update q + dq; it is renormalized during projection.
struct DeformedGaussian {
  Vec3 mu{};
  std::array<real, 4> q{1, 0, 0, 0};
  Vec3 log_scale{};
  real opacity = 0;  // already through sigmoid
  Vec3 color{};
};

struct DeformedGrad {
  Vec3 d_mu{};
  std::array<real, 4> d_q{0, 0, 0, 0};
  Vec3 d_log_scale{};
  real d_opacity = 0;
  Vec3 d_color{};
};

// Small MLP: [positional encoding of mu, encoding of t/f] -> (dmu, dq, ds).
// Final layer zero-initialized so deformation starts as the identity.
class DeformationField {
 public:
  static constexpr int kFreqs = 4;       // per-axis sin/cos frequencies
  static constexpr int kTimeFreqs = 4;   // sin/cos frequencies of t/f
  static constexpr int kIn = 3 + 3 * 2 * kFreqs + 2 * kTimeFreqs;
  static constexpr int kHidden = 64;
  static constexpr int kOut = 10;  // dmu(3) + dq(4) + ds(3)

  struct Delta {
    Vec3 dmu{};
    std::array<real, 4> dq{0, 0, 0, 0};
    Vec3 dscale{};
  };

  explicit DeformationField(int f, std::uint64_t seed = 0) : f_(f) {
    if (f < 1) throw InputError("DeformationField: f must be >= 1");
    w1_ = alloc(kHidden * kIn);
    b1_ = alloc(kHidden);
    w2_ = alloc(kHidden * kHidden);
    b2_ = alloc(kHidden);
    w3_ = alloc(kOut * kHidden);
    b3_ = alloc(kOut);
    grads_.assign(params_.size(), 0);
    Rng rng(seed);
    const real s1 = 1.0 / std::sqrt(static_cast<real>(kIn));
    const real s2 = 1.0 / std::sqrt(static_cast<real>(kHidden));
    for (int i = 0; i < kHidden * kIn; ++i) params_[w1_ + i] = rng.uniform(-s1, s1);
    for (int i = 0; i < kHidden * kHidden; ++i) params_[w2_ + i] = rng.uniform(-s2, s2);
    // w3, b3 stay zero.
  }

  int frames() const { return f_; }
  std::vector<real>& params() { return params_; }
  const std::vector<real>& params() const { return params_; }
  std::vector<real>& grads() { return grads_; }
  void zero_grads() { std::fill(grads_.begin(), grads_.end(), real(0)); }

  Delta eval(const Vec3& mu, int t) const {
    check_t(t);
    std::array<real, kIn> in = encode(mu, t);
    std::array<real, kHidden> h1{}, h2{};
    std::array<real, kOut> o{};
    layer(in.data(), kIn, w1_, b1_, kHidden, h1.data(), true);
    layer(h1.data(), kHidden, w2_, b2_, kHidden, h2.data(), true);
    layer(h2.data(), kHidden, w3_, b3_, kOut, o.data(), false);
    Delta d;
    d.dmu = {o[0], o[1], o[2]};
    d.dq = {o[3], o[4], o[5], o[6]};
    d.dscale = {o[7], o[8], o[9]};
    return d;
  }

  // Accumulates parameter gradients; optionally returns the gradient w.r.t.
  // mu (through the positional encoding).
  void backward(const Vec3& mu, int t, const Delta& d_delta, Vec3* d_mu = nullptr) {
    check_t(t);
    std::array<real, kIn> in = encode(mu, t);
    std::array<real, kHidden> h1{}, h2{};
    std::array<real, kOut> o{};
    layer(in.data(), kIn, w1_, b1_, kHidden, h1.data(), true);
    layer(h1.data(), kHidden, w2_, b2_, kHidden, h2.data(), true);
    layer(h2.data(), kHidden, w3_, b3_, kOut, o.data(), false);

    std::array<real, kOut> d_o = {d_delta.dmu.x,  d_delta.dmu.y,  d_delta.dmu.z,
                                  d_delta.dq[0],  d_delta.dq[1],  d_delta.dq[2],
                                  d_delta.dq[3],  d_delta.dscale.x, d_delta.dscale.y,
                                  d_delta.dscale.z};
    std::array<real, kHidden> d_h2{}, d_h1{};
    layer_backward(h2.data(), kHidden, w3_, kOut, nullptr, d_o.data(), d_h2.data());
    for (int i = 0; i < kHidden; ++i) d_h2[i] *= (1 - h2[i] * h2[i]);
    layer_backward(h1.data(), kHidden, w2_, kHidden, h2.data(), d_h2.data(), d_h1.data());
    for (int i = 0; i < kHidden; ++i) d_h1[i] *= (1 - h1[i] * h1[i]);
    std::array<real, kIn> d_in{};
    layer_backward(in.data(), kIn, w1_, kHidden, h1.data(), d_h1.data(), d_in.data());

    if (d_mu) {
      Vec3 g{d_in[0], d_in[1], d_in[2]};
      int k = 3;
      for (int axis = 0; axis < 3; ++axis) {
        const real v = mu[axis];
        for (int fr = 0; fr < kFreqs; ++fr) {
          const real w = std::pow(real(2), fr);
          g[axis] += d_in[k] * w * std::cos(w * v);
          g[axis] += d_in[k + 1] * (-w * std::sin(w * v));
          k += 2;
        }
      }
      *d_mu = g;
    }
  }

 private:
  std::size_t alloc(int n) {
    const std::size_t off = params_.size();
    params_.resize(off + n, 0);
    return off;
  }

  void check_t(int t) const {
    if (t < 1 || t > f_) throw InputError("DeformationField: timestamp out of range");
  }

  std::array<real, kIn> encode(const Vec3& mu, int t) const {
    std::array<real, kIn> in{};
    in[0] = mu.x;
    in[1] = mu.y;
    in[2] = mu.z;
    int k = 3;
    for (int axis = 0; axis < 3; ++axis)
      for (int fr = 0; fr < kFreqs; ++fr) {
        const real w = std::pow(real(2), fr);
        in[k++] = std::sin(w * mu[axis]);
        in[k++] = std::cos(w * mu[axis]);
      }
    const real tf = static_cast<real>(t) / static_cast<real>(f_);
    for (int fr = 0; fr < kTimeFreqs; ++fr) {
      const real w = std::pow(real(2), fr) * 3.14159265358979323846;
      in[k++] = std::sin(w * tf);
      in[k++] = std::cos(w * tf);
    }
    return in;
  }

  void layer(const real* in, int n_in, std::size_t w_off, int n_out_dummy_unused,
             int n_out, real* out, bool tanh_act) const {
    const std::size_t b_off = w_off + static_cast<std::size_t>(n_out) * n_in;
    for (int o = 0; o < n_out; ++o) {
      real s = params_[b_off + o];
      const real* w = params_.data() + w_off + static_cast<std::size_t>(o) * n_in;
      for (int i = 0; i < n_in; ++i) s += w[i] * in[i];
      out[o] = tanh_act ? std::tanh(s) : s;
    }
    (void)n_out_dummy_unused;
  }

  // d_out is the gradient at the (pre- or post-activation as prepared by the
  // caller) layer output; accumulates into grads_ and writes d_in.
  void layer_backward(const real* in, int n_in, std::size_t w_off, int n_out,
                      const real* /*out*/, const real* d_out, real* d_in) {
    const std::size_t b_off = w_off + static_cast<std::size_t>(n_out) * n_in;
    for (int i = 0; i < n_in; ++i) d_in[i] = 0;
    for (int o = 0; o < n_out; ++o) {
      const real g = d_out[o];
      grads_[b_off + o] += g;
      const real* w = params_.data() + w_off + static_cast<std::size_t>(o) * n_in;
      real* gw = grads_.data() + w_off + static_cast<std::size_t>(o) * n_in;
      for (int i = 0; i < n_in; ++i) {
        gw[i] += g * in[i];
        d_in[i] += g * w[i];
      }
    }
  }

  int f_;
  std::size_t w1_, b1_, w2_, b2_, w3_, b3_;
  std::vector<real> params_;
  std::vector<real> grads_;
};

// ---------------------------------------------------------------------------
// Scene state.
// ---------------------------------------------------------------------------

constexpr std::size_t kMaxGaussians = 120000;
constexpr std::size_t kPruneTrigger = 80000;
constexpr real kPruneOpacity = 0.015;

struct LossWeights {
  real lambda_ssim = 0.2;
  real lambda_fmd = 0.05;
  real lambda_arap = 0.01;
  real lambda_rot = 0.01;
};

struct SceneState {
  std::vector<Gaussian4D> gaussians;
  DeformationField deformation;
  // Densification statistics: accumulated 2D positional gradient norms.
  std::vector<real> grad_accum;
  std::vector<int> grad_count;
  real extent = 1.0;

  explicit SceneState(int f, std::uint64_t seed = 0) : deformation(f, seed) {}

  void reset_accumulators() {
    grad_accum.assign(gaussians.size(), 0);
    grad_count.assign(gaussians.size(), 0);
  }

  void compute_extent() {
    if (gaussians.empty()) return;
    Vec3 lo = gaussians[0].mu, hi = gaussians[0].mu;
    for (const auto& g : gaussians)
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], g.mu[a]);
        hi[a] = std::max(hi[a], g.mu[a]);
      }
    extent = std::max((hi - lo).norm(), real(1e-6));
  }
};

// Applies the deformation field at timestamp t (1-based, t in {1..f}).
inline std::vector<DeformedGaussian> deform(const SceneState& scene, int t) {
  std::vector<DeformedGaussian> out(scene.gaussians.size());
  for (std::size_t i = 0; i < scene.gaussians.size(); ++i) {
    const auto& g = scene.gaussians[i];
    const auto d = scene.deformation.eval(g.mu, t);
    out[i].mu = g.mu + d.dmu;
    out[i].q = {g.q.w + d.dq[0], g.q.x + d.dq[1], g.q.y + d.dq[2], g.q.z + d.dq[3]};
    out[i].log_scale = g.log_scale + d.dscale;
    out[i].opacity = sigmoid(g.opacity_logit);
    out[i].color = g.color;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Projection (3D deformed Gaussian -> 2D splat) with analytic backward.
// ---------------------------------------------------------------------------

namespace detail {

constexpr real kNearPlane = 0.01;
constexpr real kCovDilation = 0.3;

inline Mat3 quat_to_matrix_raw(const std::array<real, 4>& qr, std::array<real, 4>& unit,
                               real& norm) {
  norm = std::sqrt(qr[0] * qr[0] + qr[1] * qr[1] + qr[2] * qr[2] + qr[3] * qr[3]);
  if (norm < 1e-12) throw InputError("project_gaussian: zero quaternion");
  for (int i = 0; i < 4; ++i) unit[i] = qr[i] / norm;
  Quat q{unit[0], unit[1], unit[2], unit[3]};
  return q.to_matrix();
}

// dR/dq for a unit quaternion (w, x, y, z), one 3x3 slice per component.
inline void rotation_jacobian(const std::array<real, 4>& q, Mat3 dR[4]) {
  const real w = q[0], x = q[1], y = q[2], z = q[3];
  dR[0].m = {0, -z, y, z, 0, -x, -y, x, 0};
  dR[1].m = {0, y, z, y, -2 * x, -w, z, w, -2 * x};
  dR[2].m = {-2 * y, x, w, x, 0, z, -w, z, -2 * y};
  dR[3].m = {-2 * z, -w, x, w, -2 * z, y, x, y, 0};
  for (int k = 0; k < 4; ++k)
    for (auto& e : dR[k].m) e *= 2;
}

}  // namespace detail

// Returns false when the Gaussian is behind the near plane (culled).
inline bool project_gaussian(const DeformedGaussian& g, const CameraPose& cam,
                             Splat2D<real>& out) {
  const Vec3 p = cam.world_to_camera(g.mu);
  if (p.z <= detail::kNearPlane) return false;

  std::array<real, 4> unit;
  real qnorm;
  const Mat3 R = detail::quat_to_matrix_raw(g.q, unit, qnorm);
  const Vec3 s2{std::exp(2 * g.log_scale.x), std::exp(2 * g.log_scale.y),
                std::exp(2 * g.log_scale.z)};
  // Sigma3 = R diag(s2) R^T, rotated into camera frame: M = W Sigma3 W^T.
  Mat3 RD = R;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) RD(r, c) *= s2[c];
  const Mat3 sigma3 = RD * R.transposed();
  const Mat3 Wc = cam.rotation.to_matrix();
  const Mat3 M = Wc * sigma3 * Wc.transposed();

  const real iz = 1.0 / p.z;
  const real j00 = cam.fx * iz, j02 = -cam.fx * p.x * iz * iz;
  const real j11 = cam.fy * iz, j12 = -cam.fy * p.y * iz * iz;
  // Sigma2 = J M J^T with J = [[j00, 0, j02], [0, j11, j12]].
  const Vec3 r0{j00 * M(0, 0) + j02 * M(2, 0), j00 * M(0, 1) + j02 * M(2, 1),
                j00 * M(0, 2) + j02 * M(2, 2)};
  const Vec3 r1{j11 * M(1, 0) + j12 * M(2, 0), j11 * M(1, 1) + j12 * M(2, 1),
                j11 * M(1, 2) + j12 * M(2, 2)};
  out.cov_a = r0.x * j00 + r0.z * j02 + detail::kCovDilation;
  out.cov_b = r0.y * j11 + r0.z * j12;
  out.cov_c = r1.y * j11 + r1.z * j12 + detail::kCovDilation;
  out.mean_x = cam.fx * p.x * iz + cam.cx;
  out.mean_y = cam.fy * p.y * iz + cam.cy;
  out.depth = p.z;
  out.opacity = g.opacity;
  out.color[0] = g.color.x;
  out.color[1] = g.color.y;
  out.color[2] = g.color.z;
  return true;
}

// Backward through project_gaussian. d_splat carries gradients on the 2D
// parameters; results accumulate into d_g.
inline void project_gaussian_backward(const DeformedGaussian& g, const CameraPose& cam,
                                      const Splat2D<real>& d_splat, DeformedGrad& d_g) {
  const Vec3 p = cam.world_to_camera(g.mu);
  if (p.z <= detail::kNearPlane) return;

  std::array<real, 4> unit;
  real qnorm;
  const Mat3 R = detail::quat_to_matrix_raw(g.q, unit, qnorm);
  const Vec3 s2{std::exp(2 * g.log_scale.x), std::exp(2 * g.log_scale.y),
                std::exp(2 * g.log_scale.z)};
  Mat3 RD = R;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) RD(r, c) *= s2[c];
  const Mat3 sigma3 = RD * R.transposed();
  const Mat3 W = cam.rotation.to_matrix();
  const Mat3 M = W * sigma3 * W.transposed();

  const real iz = 1.0 / p.z;
  const real j00 = cam.fx * iz, j02 = -cam.fx * p.x * iz * iz;
  const real j11 = cam.fy * iz, j12 = -cam.fy * p.y * iz * iz;

  // Gradient w.r.t. camera-space position from the 2D mean.
  Vec3 d_p{d_splat.mean_x * j00, d_splat.mean_y * j11,
           d_splat.mean_x * j02 + d_splat.mean_y * j12};

  // Symmetric upstream on Sigma2 as a full 2x2.
  const real G00 = d_splat.cov_a, G01 = 0.5 * d_splat.cov_b, G11 = d_splat.cov_c;

  // dL/dM = J^T G J. J rows: j0 = (j00, 0, j02), j1 = (0, j11, j12).
  const Vec3 j0{j00, 0, j02}, j1{0, j11, j12};
  Mat3 dM{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      dM(r, c) = G00 * j0[r] * j0[c] + G01 * (j0[r] * j1[c] + j1[r] * j0[c]) +
                   G11 * j1[r] * j1[c];

  // dL/dJ = 2 G J M (G symmetric). Only four J entries are free.
  const Vec3 Mj0 = M * j0;  // M j0
  const Vec3 Mj1 = M * j1;
  // row 0 of (G J M) = G00 * (J M)_0 + G01 * (J M)_1, where (J M)_r = M j_r
  // (M symmetric).
  const Vec3 gjm0 = Mj0 * G00 + Mj1 * G01;
  const Vec3 gjm1 = Mj0 * G01 + Mj1 * G11;
  const real d_j00 = 2 * gjm0.x, d_j02 = 2 * gjm0.z;
  const real d_j11 = 2 * gjm1.y, d_j12 = 2 * gjm1.z;

  // J entries depend on camera-space position.
  // j00 = fx/z, j02 = -fx x/z^2, j11 = fy/z, j12 = -fy y/z^2.
  d_p.x += d_j02 * (-cam.fx * iz * iz);
  d_p.y += d_j12 * (-cam.fy * iz * iz);
  d_p.z += d_j00 * (-cam.fx * iz * iz) + d_j02 * (2 * cam.fx * p.x * iz * iz * iz) +
           d_j11 * (-cam.fy * iz * iz) + d_j12 * (2 * cam.fy * p.y * iz * iz * iz);

  // Through x_cam = R_cam mu + t.
  const Vec3 d_mu = W.transposed() * d_p;
  d_g.d_mu += d_mu;

  // dL/dSigma3 = W^T dM W.
  const Mat3 dSigma3 = W.transposed() * dM * W;

  // Sigma3 = R D R^T: dL/dD = R^T dSigma3 R (diagonal), dL/dR = 2 dSigma3 R D.
  const Mat3 RtGR = R.transposed() * dSigma3 * R;
  for (int k = 0; k < 3; ++k)
    d_g.d_log_scale[k] += RtGR(k, k) * 2 * s2[k];

  Mat3 dR{};
  {
    const Mat3 GRD = dSigma3 * RD;  // dSigma3 * R * D
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) dR(r, c) = 2 * GRD(r, c);
  }
  Mat3 slices[4];
  detail::rotation_jacobian(unit, slices);
  std::array<real, 4> d_unit{};
  for (int k = 0; k < 4; ++k) {
    real s = 0;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) s += dR(r, c) * slices[k](r, c);
    d_unit[k] = s;
  }
  // Normalization backward: d_q = (I - u u^T) d_unit / |q|.
  real dot = 0;
  for (int k = 0; k < 4; ++k) dot += unit[k] * d_unit[k];
  for (int k = 0; k < 4; ++k) d_g.d_q[k] += (d_unit[k] - unit[k] * dot) / qnorm;

  d_g.d_opacity += d_splat.opacity;
  d_g.d_color += Vec3{d_splat.color[0], d_splat.color[1], d_splat.color[2]};
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<real> ssim_window() {
  std::vector<real> w(11);
  real sum = 0;
  for (int i = 0; i < 11; ++i) {
    const real d = static_cast<real>(i - 5);
    w[i] = std::exp(-d * d / (2 * 1.5 * 1.5));
    sum += w[i];
  }
  for (auto& e : w) e /= sum;
  return w;
}

}  // namespace detail

struct ReconResult {
  real loss = 0;
  real l1 = 0;
  real ssim = 1;
  std::vector<real> d_rendered;  // same layout as the image
};

// L1 + lambda_ssim * (1 - SSIM), with the analytic gradient w.r.t. the
// rendered image. SSIM uses an 11x11 separable Gaussian window (sigma 1.5),
// valid-region convolution, standard constants.
inline ReconResult recon_loss(const std::vector<real>& rendered, const std::vector<real>& target,
                              int height, int width, real lambda_ssim) {
  const std::size_t n = static_cast<std::size_t>(height) * width * 3;
  if (rendered.size() != n || target.size() != n)
    throw InputError("recon_loss: image size mismatch");
  ReconResult res;
  res.d_rendered.assign(n, 0);

  for (std::size_t i = 0; i < n; ++i) {
    const real d = rendered[i] - target[i];
    res.l1 += std::abs(d);
    res.d_rendered[i] = (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / static_cast<real>(n);
  }
  res.l1 /= static_cast<real>(n);

  if (lambda_ssim > 0 && height >= 11 && width >= 11) {
    const auto w = detail::ssim_window();
    const int oh = height - 10, ow = width - 10;
    const real C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    const std::size_t m = static_cast<std::size_t>(oh) * ow * 3;

    // Separable valid convolution helper over one channel plane.
    auto conv = [&](const std::vector<real>& img, int ch, std::vector<real>& out) {
      std::vector<real> tmp(static_cast<std::size_t>(height) * ow);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < ow; ++x) {
          real s = 0;
          for (int k = 0; k < 11; ++k)
            s += w[k] * img[(static_cast<std::size_t>(y) * width + x + k) * 3 + ch];
          tmp[static_cast<std::size_t>(y) * ow + x] = s;
        }
      out.assign(static_cast<std::size_t>(oh) * ow, 0);
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          real s = 0;
          for (int k = 0; k < 11; ++k) s += w[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
          out[static_cast<std::size_t>(y) * ow + x] = s;
        }
    };
    // Adjoint of the valid convolution: scatter with the same separable window.
    auto conv_adjoint = [&](const std::vector<real>& grad, int ch, std::vector<real>& out) {
      std::vector<real> tmp(static_cast<std::size_t>(height) * ow, 0);
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          const real g = grad[static_cast<std::size_t>(y) * ow + x];
          for (int k = 0; k < 11; ++k) tmp[static_cast<std::size_t>(y + k) * ow + x] += w[k] * g;
        }
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < ow; ++x) {
          const real g = tmp[static_cast<std::size_t>(y) * ow + x];
          for (int k = 0; k < 11; ++k)
            out[(static_cast<std::size_t>(y) * width + x + k) * 3 + ch] += w[k] * g;
        }
    };

    real ssim_sum = 0;
    std::vector<real> d_ssim_from(n, 0);
    for (int ch = 0; ch < 3; ++ch) {
      std::vector<real> mu_r, mu_t, rr, tt, rt;
      conv(rendered, ch, mu_r);
      conv(target, ch, mu_t);
      std::vector<real> r2(static_cast<std::size_t>(height) * width),
          t2(r2.size()), rtp(r2.size());
      for (std::size_t i = 0; i < r2.size(); ++i) {
        const real rv = rendered[i * 3 + ch], tv = target[i * 3 + ch];
        r2[i] = rv * rv;
        t2[i] = tv * tv;
        rtp[i] = rv * tv;
      }
      // conv expects interleaved layout; wrap planes as 1-channel images.
      auto conv_plane = [&](const std::vector<real>& plane, std::vector<real>& out) {
        std::vector<real> tmp(static_cast<std::size_t>(height) * ow);
        for (int y = 0; y < height; ++y)
          for (int x = 0; x < ow; ++x) {
            real s = 0;
            for (int k = 0; k < 11; ++k) s += w[k] * plane[static_cast<std::size_t>(y) * width + x + k];
            tmp[static_cast<std::size_t>(y) * ow + x] = s;
          }
        out.assign(static_cast<std::size_t>(oh) * ow, 0);
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x) {
            real s = 0;
            for (int k = 0; k < 11; ++k) s += w[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = s;
          }
      };
      conv_plane(r2, rr);
      conv_plane(t2, tt);
      conv_plane(rtp, rt);

      // Per-window SSIM and its gradient w.r.t. mu_r, E[r^2], E[rt].
      std::vector<real> g_mu_r(mu_r.size()), g_rr(mu_r.size()), g_rt(mu_r.size());
      for (std::size_t i = 0; i < mu_r.size(); ++i) {
        const real mr = mu_r[i], mt = mu_t[i];
        const real vr = rr[i] - mr * mr, vt = tt[i] - mt * mt;
        const real cov = rt[i] - mr * mt;
        const real A = 2 * mr * mt + C1, B = 2 * cov + C2;
        const real C = mr * mr + mt * mt + C1, D = vr + vt + C2;
        const real denom = C * D;
        const real s = (A * B) / denom;
        ssim_sum += s;
        // ds/dmr, ds/dvr, ds/dcov; then map to the convolved moments.
        const real ds_dA = B / denom;
        const real ds_dB = A / denom;
        const real ds_dC = -s / C;
        const real ds_dD = -s / D;
        const real ds_dmr = ds_dA * 2 * mt + ds_dC * 2 * mr;
        const real ds_dvr = ds_dD;
        const real ds_dcov = ds_dB * 2;
        // vr = rr - mr^2, cov = rt - mr mt.
        g_mu_r[i] = ds_dmr - ds_dvr * 2 * mr - ds_dcov * mt;
        g_rr[i] = ds_dvr;
        g_rt[i] = ds_dcov;
      }
      // Chain back: d/d rendered = adjoint(g_mu_r) + 2 r * adjoint_plane(g_rr)
      // + t * adjoint_plane(g_rt).
      conv_adjoint(g_mu_r, ch, d_ssim_from);
      auto adjoint_plane = [&](const std::vector<real>& grad, std::vector<real>& out_plane) {
        std::vector<real> tmp(static_cast<std::size_t>(height) * ow, 0);
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x) {
            const real g = grad[static_cast<std::size_t>(y) * ow + x];
            for (int k = 0; k < 11; ++k)
              tmp[static_cast<std::size_t>(y + k) * ow + x] += w[k] * g;
          }
        out_plane.assign(static_cast<std::size_t>(height) * width, 0);
        for (int y = 0; y < height; ++y)
          for (int x = 0; x < ow; ++x) {
            const real g = tmp[static_cast<std::size_t>(y) * ow + x];
            for (int k = 0; k < 11; ++k) out_plane[static_cast<std::size_t>(y) * width + x + k] += w[k] * g;
          }
      };
      std::vector<real> arr, art;
      adjoint_plane(g_rr, arr);
      adjoint_plane(g_rt, art);
      for (std::size_t i = 0; i < arr.size(); ++i) {
        d_ssim_from[i * 3 + ch] += 2 * rendered[i * 3 + ch] * arr[i];
        d_ssim_from[i * 3 + ch] += target[i * 3 + ch] * art[i];
      }
    }
    const real inv_m = 1.0 / static_cast<real>(m);
    res.ssim = ssim_sum * inv_m;
    // loss contribution: lambda * (1 - mean ssim).
    for (std::size_t i = 0; i < n; ++i)
      res.d_rendered[i] += -lambda_ssim * inv_m * d_ssim_from[i];
  } else {
    res.ssim = 1;
  }

  res.loss = res.l1 + lambda_ssim * (1 - res.ssim);
  return res;
}

// k-nearest-neighbor graph over canonical means (brute force).
inline std::vector<std::vector<std::size_t>> knn_graph(const std::vector<Vec3>& pts, int k) {
  if (pts.size() <= static_cast<std::size_t>(k))
    throw InputError("knn_graph: need more points than neighbors");
  std::vector<std::vector<std::size_t>> nn(pts.size());
  std::vector<std::pair<real, std::size_t>> d(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = 0; j < pts.size(); ++j)
      d[j] = {(pts[i] - pts[j]).norm(), j};
    d[i].first = std::numeric_limits<real>::infinity();
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    nn[i].resize(k);
    for (int m = 0; m < k; ++m) nn[i][m] = d[m].second;
  }
  return nn;
}

struct ArapResult {
  real loss = 0;
  std::vector<Vec3> d_deformed;
};

// Mean squared deviation of canonical k-NN edge lengths under deformation.
inline ArapResult arap_loss(const std::vector<Vec3>& canonical, const std::vector<Vec3>& deformed,
                            const std::vector<std::vector<std::size_t>>& nn) {
  if (canonical.size() != deformed.size())
    throw InputError("arap_loss: size mismatch");
  ArapResult res;
  res.d_deformed.assign(deformed.size(), Vec3{});
  std::size_t edges = 0;
  for (const auto& row : nn) edges += row.size();
  if (edges == 0) return res;
  const real inv = 1.0 / static_cast<real>(edges);
  for (std::size_t i = 0; i < nn.size(); ++i)
    for (std::size_t j : nn[i]) {
      const real dc = (canonical[i] - canonical[j]).norm();
      const Vec3 diff = deformed[i] - deformed[j];
      const real dd = std::max(diff.norm(), real(1e-12));
      const real r = dd - dc;
      res.loss += r * r * inv;
      const Vec3 g = diff * (2 * r * inv / dd);
      res.d_deformed[i] += g;
      res.d_deformed[j] -= g;
    }
  return res;
}

inline ArapResult arap_loss(const std::vector<Vec3>& canonical, const std::vector<Vec3>& deformed,
                            int k_neighbors) {
  return arap_loss(canonical, deformed, knn_graph(canonical, k_neighbors));
}

// Temporal smoothness of the quaternion offsets: mean squared difference of
// dq between consecutive timestamps. Gradients accumulate into the
// deformation field's parameter gradients.
inline real rot_loss(SceneState& scene, bool with_grad = true) {
  const int f = scene.deformation.frames();
  if (f < 2) return 0;
  const std::size_t n = scene.gaussians.size();
  if (n == 0) return 0;
  const real inv = 1.0 / (static_cast<real>(n) * (f - 1));
  real loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 mu = scene.gaussians[i].mu;
    auto prev = scene.deformation.eval(mu, 1);
    for (int t = 2; t <= f; ++t) {
      const auto cur = scene.deformation.eval(mu, t);
      std::array<real, 4> d{};
      for (int k = 0; k < 4; ++k) {
        d[k] = cur.dq[k] - prev.dq[k];
        loss += d[k] * d[k] * inv;
      }
      if (with_grad) {
        DeformationField::Delta up{}, dn{};
        for (int k = 0; k < 4; ++k) {
          up.dq[k] = 2 * d[k] * inv;
          dn.dq[k] = -2 * d[k] * inv;
        }
        scene.deformation.backward(mu, t, up);
        scene.deformation.backward(mu, t - 1, dn);
      }
      prev = cur;
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Densify / prune.
// ---------------------------------------------------------------------------

struct DensifyStats {
  std::size_t cloned = 0;
  std::size_t pruned = 0;
};

inline DensifyStats densify_prune(SceneState& scene, real grad_threshold,
                                  std::uint64_t seed = 0) {
  DensifyStats stats;
  if (scene.grad_accum.size() != scene.gaussians.size())
    throw StateError("densify_prune: accumulators not aligned with gaussians");
  Rng rng(seed);

  // Growth: clone high-gradient Gaussians, jittered by their own scale,
  // subject to the hard cap.
  const std::size_t base = scene.gaussians.size();
  for (std::size_t i = 0; i < base && scene.gaussians.size() < kMaxGaussians; ++i) {
    if (scene.grad_count[i] == 0) continue;
    const real avg = scene.grad_accum[i] / static_cast<real>(scene.grad_count[i]);
    if (avg <= grad_threshold) continue;
    Gaussian4D clone = scene.gaussians[i];
    for (int a = 0; a < 3; ++a)
      clone.mu[a] += rng.normal(0, std::exp(clone.log_scale[a]));
    scene.gaussians.push_back(clone);
    ++stats.cloned;
  }

  // Prune only once the population is large.
  if (scene.gaussians.size() > kPruneTrigger) {
    const std::size_t before = scene.gaussians.size();
    std::vector<Gaussian4D> kept;
    kept.reserve(before);
    for (const auto& g : scene.gaussians)
      if (sigmoid(g.opacity_logit) >= kPruneOpacity) kept.push_back(g);
    stats.pruned = before - kept.size();
    scene.gaussians.swap(kept);
  }

  scene.reset_accumulators();
  return stats;
}

// ---------------------------------------------------------------------------
// Initialization from depth.
// ---------------------------------------------------------------------------

inline SceneState init_from_depth(const std::vector<Image>& frames,
                                  const std::vector<DepthMap>& depths,
                                  const std::vector<CameraPose>& cams, int f,
                                  real voxel_size, std::uint64_t seed = 0) {
  if (frames.size() != depths.size() || frames.size() != cams.size())
    throw InputError("init_from_depth: view count mismatch");
  PointCloud fused;
  for (std::size_t v = 0; v < frames.size(); ++v) {
    const auto cloud = back_project(depths[v], frames[v], cams[v]);
    fused.points.insert(fused.points.end(), cloud.points.begin(), cloud.points.end());
  }
  if (fused.points.empty()) throw InputError("init_from_depth: empty fusion");

  // Voxel downsample: keep the first point per occupied voxel.
  struct Key {
    long long x, y, z;
    bool operator==(const Key& o) const { return x == o.x && y == o.y && z == o.z; }
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      std::size_t h = std::hash<long long>()(k.x);
      h = h * 1315423911u ^ std::hash<long long>()(k.y);
      h = h * 2654435761u ^ std::hash<long long>()(k.z);
      return h;
    }
  };
  std::unordered_map<Key, std::size_t, KeyHash> voxels;
  std::vector<ColorPoint> kept;
  for (const auto& p : fused.points) {
    const Key k{static_cast<long long>(std::floor(p.position.x / voxel_size)),
                static_cast<long long>(std::floor(p.position.y / voxel_size)),
                static_cast<long long>(std::floor(p.position.z / voxel_size))};
    if (voxels.emplace(k, kept.size()).second) kept.push_back(p);
  }

  SceneState scene(f, seed);
  scene.gaussians.reserve(kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    // Scale from nearest-neighbor distance (capped search for large clouds).
    real best = voxel_size;
    const std::size_t lo = i > 256 ? i - 256 : 0;
    const std::size_t hi = std::min(kept.size(), i + 257);
    for (std::size_t j = lo; j < hi; ++j) {
      if (j == i) continue;
      best = std::min(best, (kept[i].position - kept[j].position).norm());
    }
    best = std::max(best, voxel_size * 0.1);
    Gaussian4D g;
    g.mu = kept[i].position;
    g.log_scale = {std::log(best), std::log(best), std::log(best)};
    g.opacity_logit = logit(0.1);
    g.color = kept[i].color;
    scene.gaussians.push_back(g);
  }
  scene.reset_accumulators();
  scene.compute_extent();
  return scene;
}

// ---------------------------------------------------------------------------
// Optimization loop.
// ---------------------------------------------------------------------------

struct OptimizeConfig {
  LossWeights weights;
  int iters = 2000;
  real p_fmd = 0.1;
  int densify_interval = 200;
  int densify_warmup = 500;
  real grad_threshold = 2e-4;
  // Per-group learning rates (means scaled by scene extent).
  real lr_means = 1.6e-4;
  real lr_colors = 2.5e-3;
  real lr_opacities = 5e-2;
  real lr_scales = 5e-3;
  real lr_rotations = 1e-3;
  real lr_deform = 1e-3;
  real momentum = 0.9;
  int k_neighbors = 8;
  // Max gaussians visited per iteration by the ARAP/rotation regularizers;
  // a random subset estimates the full sum when the scene is larger.
  int reg_subsample = 256;
};

// Optional FMD oracle: given f rendered frames at an interpolated pose,
// returns (loss, per-frame gradient images). Frames are row-major RGB at the
// render resolution.
using FmdOracle = std::function<std::pair<real, std::vector<std::vector<real>>>(
    const std::vector<std::vector<real>>&, const CameraPose&, std::uint64_t)>;

struct OptimizeStats {
  std::vector<real> losses;
  std::vector<std::size_t> counts;
};

inline OptimizeStats optimize(SceneState& scene, const std::vector<std::vector<Image>>& videos,
                              const std::vector<CameraPose>& cams, const Trajectory& trajectory,
                              const OptimizeConfig& cfg, std::uint64_t seed,
                              const FmdOracle& fmd = nullptr) {
  const int n_views = static_cast<int>(cams.size());
  const int f = scene.deformation.frames();
  if (videos.size() != cams.size()) throw InputError("optimize: views/cameras mismatch");
  for (const auto& seq : videos)
    if (static_cast<int>(seq.size()) != f) throw InputError("optimize: frame count mismatch");
  const int height = videos[0][0].height, width = videos[0][0].width;

  OptimizeStats stats;
  Rng rng(seed);
  scene.compute_extent();
  scene.reset_accumulators();

  // First-moment buffers, rebuilt whenever the population changes.
  struct Moments {
    std::vector<Vec3> mu, scale, color;
    std::vector<std::array<real, 4>> q;
    std::vector<real> opacity;
    std::vector<real> deform;
  };
  Moments mom;
  auto reset_moments = [&]() {
    const std::size_t n = scene.gaussians.size();
    mom.mu.assign(n, Vec3{});
    mom.scale.assign(n, Vec3{});
    mom.color.assign(n, Vec3{});
    mom.q.assign(n, {0, 0, 0, 0});
    mom.opacity.assign(n, 0);
    mom.deform.assign(scene.deformation.params().size(), 0);
  };
  reset_moments();

  auto nn = scene.gaussians.size() > static_cast<std::size_t>(cfg.k_neighbors)
                ? knn_graph([&] {
                    std::vector<Vec3> pts(scene.gaussians.size());
                    for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = scene.gaussians[i].mu;
                    return pts;
                  }(), cfg.k_neighbors)
                : std::vector<std::vector<std::size_t>>{};

  // Renders one timestamp through deform + project + rasterize, backprops
  // the given image gradient into canonical parameter gradients.
  struct GaussGrads {
    std::vector<Vec3> mu, scale, color;
    std::vector<std::array<real, 4>> q;
    std::vector<real> opacity;
  };
  GaussGrads gg;
  auto zero_gg = [&]() {
    const std::size_t n = scene.gaussians.size();
    gg.mu.assign(n, Vec3{});
    gg.scale.assign(n, Vec3{});
    gg.color.assign(n, Vec3{});
    gg.q.assign(n, {0, 0, 0, 0});
    gg.opacity.assign(n, 0);
  };

  auto render_t = [&](int t, const CameraPose& cam, std::vector<DeformedGaussian>& deformed,
                      std::vector<Splat2D<real>>& splats, std::vector<std::size_t>& vis) {
    deformed = deform(scene, t);
    splats.clear();
    vis.clear();
    for (std::size_t i = 0; i < deformed.size(); ++i) {
      Splat2D<real> s;
      if (project_gaussian(deformed[i], cam, s)) {
        splats.push_back(s);
        vis.push_back(i);
      }
    }
    return rasterize(splats, height, width);
  };

  auto backprop_image = [&](int t, const CameraPose& cam,
                            const std::vector<DeformedGaussian>& deformed,
                            const std::vector<Splat2D<real>>& splats,
                            const std::vector<std::size_t>& vis, const std::vector<real>& d_img,
                            real scale_factor) {
    std::vector<Splat2D<real>> d_splats;
    rasterize_with_grad(splats, height, width, d_img, d_splats);
    for (std::size_t k = 0; k < vis.size(); ++k) {
      const std::size_t i = vis[k];
      Splat2D<real> ds = d_splats[k];
      ds.mean_x *= scale_factor;
      ds.mean_y *= scale_factor;
      ds.cov_a *= scale_factor;
      ds.cov_b *= scale_factor;
      ds.cov_c *= scale_factor;
      ds.opacity *= scale_factor;
      for (auto& c : ds.color) c *= scale_factor;
      // Densification statistic: 2D positional gradient magnitude.
      scene.grad_accum[i] += std::hypot(ds.mean_x, ds.mean_y);
      scene.grad_count[i] += 1;

      DeformedGrad dg;
      project_gaussian_backward(deformed[i], cam, ds, dg);
      // Through deform: mu_d = mu + dmu(mu, t), q_d = q + dq, s_d = s + ds.
      DeformationField::Delta d_delta;
      d_delta.dmu = dg.d_mu;
      d_delta.dq = dg.d_q;
      d_delta.dscale = dg.d_log_scale;
      Vec3 d_mu_enc{};
      scene.deformation.backward(scene.gaussians[i].mu, t, d_delta, &d_mu_enc);
      gg.mu[i] += dg.d_mu + d_mu_enc;
      for (int k4 = 0; k4 < 4; ++k4) gg.q[i][k4] += dg.d_q[k4];
      gg.scale[i] += dg.d_log_scale;
      gg.color[i] += dg.d_color;
      const real op = deformed[i].opacity;
      gg.opacity[i] += dg.d_opacity * op * (1 - op);
    }
  };

  for (int iter = 0; iter < cfg.iters; ++iter) {
    const int v = static_cast<int>(rng.index(static_cast<std::size_t>(n_views)));
    const int t = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(f)));
    zero_gg();
    scene.deformation.zero_grads();

    std::vector<DeformedGaussian> deformed;
    std::vector<Splat2D<real>> splats;
    std::vector<std::size_t> vis;
    const auto img = render_t(t, cams[v], deformed, splats, vis);

    const auto& target = videos[v][t - 1];
    auto rec = recon_loss(img.rgb, target.data, height, width, cfg.weights.lambda_ssim);
    real loss = rec.loss;
    backprop_image(t, cams[v], deformed, splats, vis, rec.d_rendered, 1.0);

    // FMD on a random interpolated pose, stochastic cadence.
    const real fmd_draw = rng.uniform(0, 1);
    if (fmd && cfg.weights.lambda_fmd > 0 && fmd_draw < cfg.p_fmd &&
        !trajectory.poses.empty()) {
      const auto& pose = trajectory.poses[rng.index(trajectory.poses.size())];
      std::vector<std::vector<real>> frames(f);
      std::vector<std::vector<DeformedGaussian>> defs(f);
      std::vector<std::vector<Splat2D<real>>> spl(f);
      std::vector<std::vector<std::size_t>> viss(f);
      for (int tf = 1; tf <= f; ++tf)
        frames[tf - 1] = render_t(tf, pose, defs[tf - 1], spl[tf - 1], viss[tf - 1]).rgb;
      const auto [fmd_l, fmd_g] = fmd(frames, pose, rng.next_u64());
      loss += cfg.weights.lambda_fmd * fmd_l;
      for (int tf = 1; tf <= f; ++tf)
        backprop_image(tf, pose, defs[tf - 1], spl[tf - 1], viss[tf - 1], fmd_g[tf - 1],
                       cfg.weights.lambda_fmd);
    }

    // Regularizers. Gradients flow through a random subset of gaussians when
    // the scene exceeds reg_subsample; scaling keeps the estimate unbiased.
    const std::size_t n_g = scene.gaussians.size();
    const std::size_t sub =
        cfg.reg_subsample > 0 ? std::min<std::size_t>(n_g, cfg.reg_subsample) : n_g;
    std::vector<std::size_t> reg_idx(n_g);
    for (std::size_t i = 0; i < n_g; ++i) reg_idx[i] = i;
    if (sub < n_g)
      for (std::size_t i = 0; i < sub; ++i)
        std::swap(reg_idx[i], reg_idx[i + rng.index(n_g - i)]);
    const real reg_scale = sub ? static_cast<real>(n_g) / static_cast<real>(sub) : 0;

    if (cfg.weights.lambda_arap > 0 && !nn.empty()) {
      std::vector<Vec3> can(scene.gaussians.size()), def(scene.gaussians.size());
      for (std::size_t i = 0; i < can.size(); ++i) can[i] = scene.gaussians[i].mu;
      for (std::size_t i = 0; i < def.size(); ++i) def[i] = deformed[i].mu;
      const auto arap = arap_loss(can, def, nn);
      loss += cfg.weights.lambda_arap * arap.loss;
      for (std::size_t si = 0; si < sub; ++si) {
        const std::size_t i = reg_idx[si];
        const Vec3 g = arap.d_deformed[i] * (cfg.weights.lambda_arap * reg_scale);
        DeformationField::Delta dd;
        dd.dmu = g;
        Vec3 d_mu_enc{};
        scene.deformation.backward(scene.gaussians[i].mu, t, dd, &d_mu_enc);
        gg.mu[i] += g + d_mu_enc;
      }
    }
    if (cfg.weights.lambda_rot > 0) {
      // rot_loss accumulates directly into deformation grads; scale applied
      // by weighting the upstream.
      SceneState& s = scene;
      const int fr = s.deformation.frames();
      if (fr >= 2 && !s.gaussians.empty() && sub > 0) {
        const real inv = 1.0 / (static_cast<real>(sub) * (fr - 1));
        real rl = 0;
        for (std::size_t si = 0; si < sub; ++si) {
          const Vec3 mu = s.gaussians[reg_idx[si]].mu;
          auto prev = s.deformation.eval(mu, 1);
          for (int tt = 2; tt <= fr; ++tt) {
            const auto cur = s.deformation.eval(mu, tt);
            DeformationField::Delta up{}, dn{};
            for (int k = 0; k < 4; ++k) {
              const real d = cur.dq[k] - prev.dq[k];
              rl += d * d * inv;
              up.dq[k] = 2 * d * inv * cfg.weights.lambda_rot;
              dn.dq[k] = -2 * d * inv * cfg.weights.lambda_rot;
            }
            s.deformation.backward(mu, tt, up);
            s.deformation.backward(mu, tt - 1, dn);
            prev = cur;
          }
        }
        loss += cfg.weights.lambda_rot * rl;
      }
    }

    stats.losses.push_back(loss);
    stats.counts.push_back(scene.gaussians.size());

    // First-moment smoothed step.
    const real beta = cfg.momentum;
    const real lr_mu = cfg.lr_means * scene.extent;
    for (std::size_t i = 0; i < scene.gaussians.size(); ++i) {
      auto& g = scene.gaussians[i];
      mom.mu[i] = mom.mu[i] * beta + gg.mu[i] * (1 - beta);
      g.mu -= mom.mu[i] * lr_mu;
      mom.scale[i] = mom.scale[i] * beta + gg.scale[i] * (1 - beta);
      g.log_scale -= mom.scale[i] * cfg.lr_scales;
      mom.color[i] = mom.color[i] * beta + gg.color[i] * (1 - beta);
      g.color -= mom.color[i] * cfg.lr_colors;
      mom.opacity[i] = beta * mom.opacity[i] + (1 - beta) * gg.opacity[i];
      g.opacity_logit -= cfg.lr_opacities * mom.opacity[i];
      for (int k = 0; k < 4; ++k) {
        mom.q[i][k] = beta * mom.q[i][k] + (1 - beta) * gg.q[i][k];
      }
      g.q.w -= cfg.lr_rotations * mom.q[i][0];
      g.q.x -= cfg.lr_rotations * mom.q[i][1];
      g.q.y -= cfg.lr_rotations * mom.q[i][2];
      g.q.z -= cfg.lr_rotations * mom.q[i][3];
    }
    {
      auto& dp = scene.deformation.params();
      const auto& dgr = scene.deformation.grads();
      for (std::size_t k = 0; k < dp.size(); ++k) {
        mom.deform[k] = beta * mom.deform[k] + (1 - beta) * dgr[k];
        dp[k] -= cfg.lr_deform * mom.deform[k];
      }
    }

    if (iter + 1 > cfg.densify_warmup && (iter + 1) % cfg.densify_interval == 0) {
      densify_prune(scene, cfg.grad_threshold, seed ^ static_cast<std::uint64_t>(iter));
      reset_moments();
      zero_gg();
      if (scene.gaussians.size() > static_cast<std::size_t>(cfg.k_neighbors)) {
        std::vector<Vec3> pts(scene.gaussians.size());
        for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = scene.gaussians[i].mu;
        nn = knn_graph(pts, cfg.k_neighbors);
      }
    }
  }
  return stats;
}

}  // namespace fourd
