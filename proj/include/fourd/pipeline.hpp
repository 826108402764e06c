#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fourd/common.hpp"
#include "fourd/flow.hpp"
#include "fourd/geometry.hpp"
#include "fourd/io.hpp"
#include "fourd/model.hpp"
#include "fourd/splat.hpp"

namespace fourd {

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

inline real psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw InputError("psnr: image size mismatch");
  real mse = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const real d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<real>(a.data.size());
  if (mse == 0) return std::numeric_limits<real>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

inline real ssim(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw InputError("ssim: image size mismatch");
  return recon_loss(a.data, b.data, a.height, a.width, 1.0).ssim;
}

// ---------------------------------------------------------------------------
// Synthetic scenes.
// ---------------------------------------------------------------------------

struct SynthConfig {
  int schema_version = 1;
  int width = 64;
  int height = 64;
  int f = 8;
  int n_views = 6;
  int n_clusters = 3;
  int primitives_per_cluster = 40;
  real motion_amplitude = 0.25;
  real rig_radius = 4.0;
  real focal = 70.0;

  void validate() const {
    if (width < 16 || width > 128 || height < 16 || height > 128)
      throw InputError("SynthConfig: resolution out of range [16,128]");
    if (f < 1 || f > 16) throw InputError("SynthConfig: f out of range [1,16]");
    if (n_views < 2) throw InputError("SynthConfig: need at least 2 views");
    if (n_clusters < 1 || primitives_per_cluster < 1)
      throw InputError("SynthConfig: content must be nonempty");
  }
};

struct SceneBundle {
  std::vector<std::vector<Image>> videos;  // [view][t-1]
  std::vector<DepthMap> depths;            // frame-0 depth per view
  std::vector<CameraPose> cams;
  SceneState truth;                        // generating scene (closed loop)
  SynthConfig config;
  std::uint64_t seed = 0;

  SceneBundle(int f, std::uint64_t s) : truth(f, s) {}
};

namespace detail {

// Alpha-weighted depth alongside the color render; valid where coverage
// exceeds the threshold.
inline DepthMap rasterize_depth(const std::vector<Splat2D<real>>& splats, int height, int width,
                                real coverage_threshold = 0.3) {
  DepthMap out = DepthMap::invalid(width, height);
  const auto order = depth_order(splats);
  std::vector<SplatBox<real>> boxes(splats.size());
  for (std::size_t i = 0; i < splats.size(); ++i)
    boxes[i] = splat_box(splats[i], height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const real px = x + 0.5, py = y + 0.5;
      real T = 1, wsum = 0, dsum = 0;
      for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const std::size_t i = order[oi];
        const auto& b = boxes[i];
        if (!b.valid || x < b.x0 || x >= b.x1 || y < b.y0 || y >= b.y1) continue;
        const auto& g = splats[i];
        const real dx = px - g.mean_x, dy = py - g.mean_y;
        const real e = 0.5 * (b.inv_a * dx * dx + 2 * b.inv_b * dx * dy + b.inv_c * dy * dy);
        const real alpha = g.opacity * std::exp(-e);
        const real w = T * alpha;
        wsum += w;
        dsum += w * g.depth;
        T *= (1 - alpha);
      }
      if (wsum > coverage_threshold) {
        out.values[static_cast<std::size_t>(y) * width + x] = dsum / wsum;
        out.validity[static_cast<std::size_t>(y) * width + x] = true;
      }
    }
  return out;
}

}  // namespace detail

inline Image render_scene_frame(const SceneState& scene, int t, const CameraPose& cam, int width,
                                int height) {
  const auto deformed = deform(scene, t);
  std::vector<Splat2D<real>> splats;
  for (const auto& d : deformed) {
    Splat2D<real> s;
    if (project_gaussian(d, cam, s)) splats.push_back(s);
  }
  Image img(width, height);
  img.data = rasterize(splats, height, width).rgb;
  return img;
}

inline SceneBundle synth_scene(std::uint64_t seed, const SynthConfig& config = {}) {
  config.validate();
  SceneBundle bundle(config.f, seed);
  bundle.config = config;
  bundle.seed = seed;
  Rng rng(seed);

  // Camera rig: azimuths at 60-degree spacing with jitter, looking at the
  // origin from a jittered radius and height.
  for (int v = 0; v < config.n_views; ++v) {
    const real az = (360.0 / config.n_views) * v + rng.uniform(-10, 10);
    const real a = az * 3.14159265358979323846 / 180.0;
    const real radius = config.rig_radius * (1 + rng.uniform(-0.1, 0.1));
    const real height = 0.6 * config.rig_radius * rng.uniform(0.9, 1.1);
    const Vec3 pos{radius * std::cos(a), height, radius * std::sin(a)};
    // Camera looks at the origin: build an orthonormal world-to-camera basis
    // with +z forward.
    const Vec3 fwd = (-pos).normalized();
    const Vec3 up{0, 1, 0};
    const Vec3 right = Vec3{fwd.y * up.z - fwd.z * up.y, fwd.z * up.x - fwd.x * up.z,
                            fwd.x * up.y - fwd.y * up.x}
                           .normalized();
    const Vec3 down{fwd.y * right.z - fwd.z * right.y, fwd.z * right.x - fwd.x * right.z,
                    fwd.x * right.y - fwd.y * right.x};
    Mat3 R;
    for (int c = 0; c < 3; ++c) {
      R(0, c) = right[c];
      R(1, c) = down[c];
      R(2, c) = fwd[c];
    }
    CameraPose cam;
    cam.rotation = Quat::from_matrix(R).normalized();
    cam.translation = -(cam.rotation.to_matrix() * pos);
    cam.fx = cam.fy = config.focal * config.width / 64.0;
    cam.cx = config.width / 2.0;
    cam.cy = config.height / 2.0;
    cam.width = config.width;
    cam.height = config.height;
    bundle.cams.push_back(cam);
  }

  // Content: rigid clusters of fuzzy Gaussians near the origin; motion is
  // baked into the truth scene's deformation net only implicitly — instead,
  // motion is scripted per timestamp via a per-cluster offset, realized by
  // rendering from per-timestamp deformed copies below.
  struct Cluster {
    Vec3 center, velocity, wobble;
    real phase;
  };
  std::vector<Cluster> clusters(config.n_clusters);
  for (auto& c : clusters) {
    c.center = {rng.uniform(-0.7, 0.7), rng.uniform(-0.4, 0.4), rng.uniform(-0.7, 0.7)};
    c.velocity = {rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-1, 1)};
    c.velocity = c.velocity * (config.motion_amplitude / std::max(c.velocity.norm(), real(1e-6)));
    c.wobble = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)};
    c.phase = rng.uniform(0, 6.28);
  }
  std::vector<int> owner;
  for (int ci = 0; ci < config.n_clusters; ++ci)
    for (int p = 0; p < config.primitives_per_cluster; ++p) {
      Gaussian4D g;
      g.mu = clusters[ci].center + Vec3{rng.normal(0, 0.22), rng.normal(0, 0.22),
                                        rng.normal(0, 0.22)};
      const real s = rng.uniform(0.08, 0.16);
      g.log_scale = {std::log(s), std::log(s * rng.uniform(0.7, 1.4)),
                     std::log(s * rng.uniform(0.7, 1.4))};
      g.q = Quat::from_axis_angle({rng.normal(), rng.normal(), rng.normal()},
                                  rng.uniform(0, 3.14)).normalized();
      // Mostly opaque content keeps the depth maps crisp, so the depth-based
      // initialization starts near the generating geometry.
      g.opacity_logit = logit(rng.uniform(0.85, 0.98));
      g.color = {rng.uniform(0.15, 1), rng.uniform(0.15, 1), rng.uniform(0.15, 1)};
      bundle.truth.gaussians.push_back(g);
      owner.push_back(ci);
    }
  bundle.truth.reset_accumulators();
  bundle.truth.compute_extent();

  // Scripted rigid motion per timestamp.
  auto cluster_offset = [&](int ci, int t) {
    const real u = config.f > 1 ? static_cast<real>(t - 1) / (config.f - 1) : 0.0;
    const auto& c = clusters[ci];
    return c.velocity * u + c.wobble * std::sin(6.28318530717958648 * u + c.phase);
  };

  bundle.videos.assign(config.n_views, {});
  for (int v = 0; v < config.n_views; ++v) {
    for (int t = 1; t <= config.f; ++t) {
      std::vector<Splat2D<real>> splats;
      for (std::size_t i = 0; i < bundle.truth.gaussians.size(); ++i) {
        DeformedGaussian d;
        const auto& g = bundle.truth.gaussians[i];
        d.mu = g.mu + cluster_offset(owner[i], t);
        d.q = {g.q.w, g.q.x, g.q.y, g.q.z};
        d.log_scale = g.log_scale;
        d.opacity = sigmoid(g.opacity_logit);
        d.color = g.color;
        Splat2D<real> s;
        if (project_gaussian(d, bundle.cams[v], s)) splats.push_back(s);
      }
      Image img(config.width, config.height);
      img.data = rasterize(splats, config.height, config.width).rgb;
      bundle.videos[v].push_back(img);
      if (t == 1) bundle.depths.push_back(
          detail::rasterize_depth(splats, config.height, config.width));
    }
  }
  return bundle;
}

// Renders ground truth at an arbitrary pose/timestamp (used for held-out
// evaluation and for velocity-field training data).
inline Image render_truth(const SceneBundle& bundle, int t, const CameraPose& cam) {
  const auto& config = bundle.config;
  Rng rng(bundle.seed);
  // Re-derive the scripted cluster motion (same draws as synth_scene).
  for (int v = 0; v < config.n_views; ++v) {
    rng.uniform(-10, 10);
    rng.uniform(-0.1, 0.1);
    rng.uniform(0.9, 1.1);
  }
  struct Cluster {
    Vec3 velocity, wobble;
    real phase;
  };
  std::vector<Cluster> clusters(config.n_clusters);
  for (auto& c : clusters) {
    rng.uniform(-0.7, 0.7);
    rng.uniform(-0.4, 0.4);
    rng.uniform(-0.7, 0.7);
    Vec3 vel{rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-1, 1)};
    c.velocity = vel * (config.motion_amplitude / std::max(vel.norm(), real(1e-6)));
    c.wobble = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)};
    c.phase = rng.uniform(0, 6.28);
  }
  auto cluster_offset = [&](int ci) {
    const real u = config.f > 1 ? static_cast<real>(t - 1) / (config.f - 1) : 0.0;
    const auto& c = clusters[ci];
    return c.velocity * u + c.wobble * std::sin(6.28318530717958648 * u + c.phase);
  };
  std::vector<Splat2D<real>> splats;
  for (std::size_t i = 0; i < bundle.truth.gaussians.size(); ++i) {
    const int ci = static_cast<int>(i) / config.primitives_per_cluster;
    DeformedGaussian d;
    const auto& g = bundle.truth.gaussians[i];
    d.mu = g.mu + cluster_offset(ci);
    d.q = {g.q.w, g.q.x, g.q.y, g.q.z};
    d.log_scale = g.log_scale;
    d.opacity = sigmoid(g.opacity_logit);
    d.color = g.color;
    Splat2D<real> s;
    if (project_gaussian(d, cam, s)) splats.push_back(s);
  }
  Image img(config.width, config.height);
  img.data = rasterize(splats, config.height, config.width).rgb;
  return img;
}

// Held-out poses: trajectory samples maximally distant from the rig knots.
inline std::vector<CameraPose> held_out_poses(const SceneBundle& bundle, int count = 4) {
  const Trajectory traj = interpolate_trajectory(bundle.cams, 120);
  const int knots = static_cast<int>(bundle.cams.size());
  std::vector<CameraPose> out;
  for (int k = 0; k < count; ++k) {
    // Sample halfway between knots, spread evenly over the rig.
    const real param = (std::floor(static_cast<real>(k) * knots / count) + 0.5) * (120.0 / knots);
    out.push_back(traj.poses[static_cast<int>(param) % 120]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Downsampling between render resolution and model latent resolution.
// ---------------------------------------------------------------------------

inline std::vector<real> avg_pool(const std::vector<real>& rgb, int height, int width,
                                  int factor) {
  const int oh = height / factor, ow = width / factor;
  std::vector<real> out(static_cast<std::size_t>(oh) * ow * 3, 0);
  const real inv = 1.0 / (factor * factor);
  for (int y = 0; y < oh * factor; ++y)
    for (int x = 0; x < ow * factor; ++x)
      for (int c = 0; c < 3; ++c)
        out[(static_cast<std::size_t>(y / factor) * ow + x / factor) * 3 + c] +=
            rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c] * inv;
  return out;
}

// Adjoint of avg_pool.
inline std::vector<real> avg_pool_adjoint(const std::vector<real>& grad, int height, int width,
                                          int factor) {
  const int oh = height / factor, ow = width / factor;
  std::vector<real> out(static_cast<std::size_t>(height) * width * 3, 0);
  const real inv = 1.0 / (factor * factor);
  for (int y = 0; y < oh * factor; ++y)
    for (int x = 0; x < ow * factor; ++x)
      for (int c = 0; c < 3; ++c)
        out[(static_cast<std::size_t>(y) * width + x) * 3 + c] =
            grad[(static_cast<std::size_t>(y / factor) * ow + x / factor) * 3 + c] * inv;
  return out;
}

// ---------------------------------------------------------------------------
// Velocity-field pretraining on the synthetic domain, and the FMD oracle
// adapter used by optimize().
// ---------------------------------------------------------------------------

struct FmdSetup {
  ModelConfig model_config = [] {
    ModelConfig c;
    c.patch = 2;
    c.d = 16;
    c.blocks = 1;
    c.heads = 2;
    c.tau_dim = 16;
    return c;
  }();
  int pool_factor = 4;  // render resolution -> latent resolution
  int train_steps = 300;
  real lr = 2e-3;
};

// A pose-conditioned velocity model over downsampled frame sequences.
// Latents: n_views=1, f = scene f, 3 channels at the pooled resolution.
// Conditioning: ground-truth frame-0 content rendered at the pose (the
// point-cloud guide stand-in) plus the flattened relative camera.
class SceneVelocityModel {
 public:
  SceneVelocityModel(const SceneBundle& bundle, const FmdSetup& setup, std::uint64_t seed)
      : setup_(setup), bundle_(&bundle), model_(make_config(bundle, setup), seed) {}

  static ModelConfig make_config(const SceneBundle& bundle, const FmdSetup& setup) {
    ModelConfig cfg = setup.model_config;
    cfg.n_views = 1;
    cfg.f = bundle.config.f;
    cfg.channels = 3;
    cfg.height = bundle.config.height / setup.pool_factor;
    cfg.width = bundle.config.width / setup.pool_factor;
    return cfg;
  }

  VelocityModel<real>& model() { return model_; }
  const ModelConfig& config() const { return model_.cfg; }

  // Packs f pooled frames into a latent grid (single view).
  LatentGrid<real> to_latent(const std::vector<std::vector<real>>& pooled) const {
    const auto& cfg = model_.cfg;
    LatentGrid<real> grid(1, cfg.f, 3, cfg.height, cfg.width);
    for (int t = 0; t < cfg.f; ++t)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < cfg.height; ++y)
          for (int x = 0; x < cfg.width; ++x)
            grid.at(0, t, c, y, x) =
                pooled[t][(static_cast<std::size_t>(y) * cfg.width + x) * 3 + c];
    return grid;
  }

  std::vector<std::vector<real>> from_latent_grad(const LatentGrid<real>& grad) const {
    const auto& cfg = model_.cfg;
    std::vector<std::vector<real>> out(cfg.f);
    for (int t = 0; t < cfg.f; ++t) {
      out[t].assign(static_cast<std::size_t>(cfg.height) * cfg.width * 3, 0);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < cfg.height; ++y)
          for (int x = 0; x < cfg.width; ++x)
            out[t][(static_cast<std::size_t>(y) * cfg.width + x) * 3 + c] =
                grad.at(0, t, c, y, x);
    }
    return out;
  }

  typename VelocityModel<real>::Conditioning conditioning(const CameraPose& pose) const {
    typename VelocityModel<real>::Conditioning cond;
    // Condition latents: ground-truth frame-0 appearance at the pose, pooled.
    std::vector<std::vector<real>> pooled(model_.cfg.f);
    const Image guide = render_truth(*bundle_, 1, pose);
    const auto g = avg_pool(guide.data, bundle_->config.height, bundle_->config.width,
                            setup_.pool_factor);
    for (auto& p : pooled) p = g;
    cond.condition = to_latent(pooled);
    const RigidTransform rel = relative_pose(bundle_->cams[0], pose);
    const auto flat = flatten_transform(rel);
    std::array<real, 12> cam{};
    for (int i = 0; i < 12; ++i) cam[i] = flat[i];
    cond.cameras = {cam};
    return cond;
  }

  // CFM pretraining on ground-truth sequences at random trajectory poses.
  std::vector<real> train(std::uint64_t seed) {
    const Trajectory traj = interpolate_trajectory(bundle_->cams, 120);
    Rng rng(seed);
    std::vector<real> losses;
    // Momentum buffer.
    std::vector<real> mom(model_.params.data.size(), 0);
    for (int step = 0; step < setup_.train_steps; ++step) {
      const auto& pose = traj.poses[rng.index(traj.poses.size())];
      std::vector<std::vector<real>> pooled(model_.cfg.f);
      for (int t = 1; t <= model_.cfg.f; ++t) {
        const Image gt = render_truth(*bundle_, t, pose);
        pooled[t - 1] = avg_pool(gt.data, bundle_->config.height, bundle_->config.width,
                                 setup_.pool_factor);
      }
      const LatentGrid<real> z0 = to_latent(pooled);
      const auto cond = conditioning(pose);
      const real tau = rng.uniform(0, 1);
      LatentGrid<real> eps = z0;
      for (auto& e : eps.values) e = rng.normal();
      model_.zero_grads();
      const real loss = cfm_loss(model_, z0, cond, tau, eps);
      losses.push_back(loss / static_cast<real>(z0.values.size()));
      const real scale = 1.0 / static_cast<real>(z0.values.size());
      for (std::size_t i = 0; i < mom.size(); ++i) {
        mom[i] = 0.9 * mom[i] + 0.1 * model_.grads[i] * scale;
        model_.params.data[i] -= setup_.lr * mom[i];
      }
    }
    return losses;
  }

  // FmdOracle adapter for optimize().
  FmdOracle oracle() {
    return [this](const std::vector<std::vector<real>>& frames, const CameraPose& pose,
                  std::uint64_t seed) {
      const int rh = bundle_->config.height, rw = bundle_->config.width;
      std::vector<std::vector<real>> pooled(frames.size());
      for (std::size_t t = 0; t < frames.size(); ++t)
        pooled[t] = avg_pool(frames[t], rh, rw, setup_.pool_factor);
      const LatentGrid<real> rendered = to_latent(pooled);
      const auto cond = conditioning(pose);
      FMDConfig<real> fcfg;
      const auto res = fmd_loss(rendered, model_, cond, fcfg, seed);
      const auto pooled_grads = from_latent_grad(res.grad_rendered);
      std::vector<std::vector<real>> grads(frames.size());
      for (std::size_t t = 0; t < frames.size(); ++t)
        grads[t] = avg_pool_adjoint(pooled_grads[t], rh, rw, setup_.pool_factor);
      return std::make_pair(res.loss, grads);
    };
  }

 private:
  FmdSetup setup_;
  const SceneBundle* bundle_;
  VelocityModel<real> model_;
};

// ---------------------------------------------------------------------------
// Benchmark.
// ---------------------------------------------------------------------------

struct BenchConfig {
  int schema_version = 1;
  SynthConfig scene;
  OptimizeConfig fit;
  FmdSetup fmd;
  bool ablate_fmd = false;
  bool use_fmd = false;
  real init_voxel = 0.08;
  int held_out = 4;
};

struct ViewMetrics {
  std::string view_id;
  real psnr_db = 0;
  real ssim_val = 0;
  real wall_seconds = 0;
};

struct MetricReport {
  std::vector<ViewMetrics> rows;       // per held-out view (+ per variant)
  real mean_psnr = 0;
  real mean_ssim = 0;
  real train_mean_psnr = 0;
  std::vector<std::size_t> count_trajectory;
  real wall_seconds = 0;
};

struct BenchmarkResult {
  MetricReport with_fmd;     // populated when use_fmd or ablate_fmd
  MetricReport without_fmd;  // always populated
  bool has_fmd = false;
};

inline SceneState fit_scene(const SceneBundle& bundle, const OptimizeConfig& cfg,
                            std::uint64_t seed, const FmdOracle& fmd = nullptr,
                            real init_voxel = 0.08) {
  SceneState scene = init_from_depth(
      [&] {
        std::vector<Image> f0;
        for (const auto& seq : bundle.videos) f0.push_back(seq[0]);
        return f0;
      }(),
      bundle.depths, bundle.cams, bundle.config.f, init_voxel, seed);
  const Trajectory traj = interpolate_trajectory(bundle.cams, 120);
  optimize(scene, bundle.videos, bundle.cams, traj, cfg, seed, fmd);
  return scene;
}

inline MetricReport evaluate_scene(const SceneBundle& bundle, SceneState& scene,
                                   const std::vector<CameraPose>& held_out,
                                   const std::vector<real>& wall_per_view = {}) {
  MetricReport report;
  const int mid_t = (bundle.config.f + 1) / 2;
  for (std::size_t k = 0; k < held_out.size(); ++k) {
    const Image gt = render_truth(bundle, mid_t, held_out[k]);
    const Image pred = render_scene_frame(scene, mid_t, held_out[k], bundle.config.width,
                                          bundle.config.height);
    ViewMetrics m;
    m.view_id = "held_out_" + std::to_string(k);
    m.psnr_db = psnr(gt, pred);
    m.ssim_val = ssim(gt, pred);
    m.wall_seconds = k < wall_per_view.size() ? wall_per_view[k] : 0;
    report.rows.push_back(m);
    report.mean_psnr += m.psnr_db;
    report.mean_ssim += m.ssim_val;
  }
  if (!held_out.empty()) {
    report.mean_psnr /= static_cast<real>(held_out.size());
    report.mean_ssim /= static_cast<real>(held_out.size());
  }
  // Training-view PSNR across all timestamps (PSNR of the pooled MSE so a
  // single exact frame cannot push the mean to infinity).
  real mse = 0;
  int nt = 0;
  for (std::size_t v = 0; v < bundle.cams.size(); ++v)
    for (int t = 1; t <= bundle.config.f; ++t) {
      const Image pred = render_scene_frame(scene, t, bundle.cams[v], bundle.config.width,
                                            bundle.config.height);
      const auto& gt = bundle.videos[v][t - 1];
      for (std::size_t i = 0; i < gt.data.size(); ++i) {
        const real d = gt.data[i] - pred.data[i];
        mse += d * d;
      }
      ++nt;
    }
  if (nt) mse /= static_cast<real>(nt) * bundle.config.width * bundle.config.height * 3;
  report.train_mean_psnr =
      mse == 0 ? std::numeric_limits<real>::infinity() : 10.0 * std::log10(1.0 / mse);
  return report;
}

inline BenchmarkResult run_benchmark(std::uint64_t seed, const BenchConfig& config) {
  BenchmarkResult result;
  const auto t0 = std::chrono::steady_clock::now();
  const SceneBundle bundle = synth_scene(seed, config.scene);
  const auto held = held_out_poses(bundle, config.held_out);

  OptimizeConfig no_fmd_cfg = config.fit;
  no_fmd_cfg.weights.lambda_fmd = 0;
  SceneState plain = fit_scene(bundle, no_fmd_cfg, seed, nullptr, config.init_voxel);
  result.without_fmd = evaluate_scene(bundle, plain, held);

  if (config.use_fmd || config.ablate_fmd) {
    SceneVelocityModel svm(bundle, config.fmd, seed + 1);
    svm.train(seed + 2);
    SceneState fmd_scene = fit_scene(bundle, config.fit, seed, svm.oracle(), config.init_voxel);
    result.with_fmd = evaluate_scene(bundle, fmd_scene, held);
    result.has_fmd = true;
  }
  const auto t1 = std::chrono::steady_clock::now();
  result.without_fmd.wall_seconds =
      std::chrono::duration<real>(t1 - t0).count();
  return result;
}

// CSV schema: view_id, psnr_db, ssim, wall_seconds.
inline std::string metrics_csv(const MetricReport& report) {
  std::ostringstream out;
  out << "view_id,psnr_db,ssim,wall_seconds\n";
  out.precision(17);
  for (const auto& r : report.rows)
    out << r.view_id << "," << r.psnr_db << "," << r.ssim_val << "," << r.wall_seconds << "\n";
  out << "aggregate_mean," << report.mean_psnr << "," << report.mean_ssim << ","
      << report.wall_seconds << "\n";
  return out.str();
}

// Deterministic report (no timing) for byte-identity audits.
inline nlohmann::json metrics_json(const MetricReport& report) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows)
    j["rows"].push_back({{"view_id", r.view_id}, {"psnr_db", r.psnr_db}, {"ssim", r.ssim_val}});
  j["mean_psnr"] = report.mean_psnr;
  j["mean_ssim"] = report.mean_ssim;
  j["train_mean_psnr"] = report.train_mean_psnr;
  return j;
}

inline void export_frames(const std::vector<Image>& frames, const std::string& dir,
                          const std::string& format) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  if (format != "ppm" && format != "png")
    throw InputError("export_frames: format must be ppm or png");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu.%s", i, format.c_str());
    const std::string path = (fs::path(dir) / name).string();
    if (format == "ppm")
      write_ppm(path, frames[i]);
    else
      write_png(path, frames[i]);
  }
}

}  // namespace fourd
