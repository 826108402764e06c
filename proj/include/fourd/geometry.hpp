#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "fourd/common.hpp"

namespace fourd {

// ---------------------------------------------------------------------------
// Camera model. Extrinsics are world-to-camera: x_cam = R * x_world + t.

struct CameraPose {
  Quat rotation;      // world-to-camera
  Vec3 translation;
  real fx = 1, fy = 1;
  real cx = 0, cy = 0;
  int width = 1, height = 1;

  bool valid() const {
    return std::abs(rotation.norm() - 1.0) < 1e-9 && fx > 0 && fy > 0 &&
           width >= 1 && height >= 1;
  }

  Vec3 center() const {
    // C = -R^T t
    return rotation.to_matrix().transposed() * (-translation);
  }

  Vec3 world_to_camera(const Vec3& p) const {
    return rotation.to_matrix() * p + translation;
  }

  Vec3 camera_to_world(const Vec3& p) const {
    return rotation.to_matrix().transposed() * (p - translation);
  }
};

struct DepthMap {
  int width = 0, height = 0;
  std::vector<real> values;   // row-major, camera-frame z
  std::vector<bool> validity;

  static DepthMap invalid(int w, int h) {
    DepthMap d;
    d.width = w;
    d.height = h;
    d.values.assign(static_cast<std::size_t>(w) * h, 0);
    d.validity.assign(static_cast<std::size_t>(w) * h, false);
    return d;
  }

  real at(int v, int u) const { return values[static_cast<std::size_t>(v) * width + u]; }
  bool valid_at(int v, int u) const { return validity[static_cast<std::size_t>(v) * width + u]; }
  void set(int v, int u, real depth) {
    values[static_cast<std::size_t>(v) * width + u] = depth;
    validity[static_cast<std::size_t>(v) * width + u] = true;
  }
};

struct ColorPoint {
  Vec3 position;  // world frame
  Vec3 color;     // RGB in [0,1]
};

struct PointCloud {
  std::vector<ColorPoint> points;
};

// Simple row-major RGB image with channels interleaved last.
struct Image {
  int width = 0, height = 0;
  std::vector<real> data;  // H*W*3

  Image() = default;
  Image(int w, int h, real fill = 0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

  real& at(int v, int u, int c) { return data[(static_cast<std::size_t>(v) * width + u) * 3 + c]; }
  real at(int v, int u, int c) const { return data[(static_cast<std::size_t>(v) * width + u) * 3 + c]; }

  Vec3 pixel(int v, int u) const { return {at(v, u, 0), at(v, u, 1), at(v, u, 2)}; }
  void set_pixel(int v, int u, const Vec3& c) {
    at(v, u, 0) = c.x;
    at(v, u, 1) = c.y;
    at(v, u, 2) = c.z;
  }
};

struct RenderedGuide {
  Image image;
  std::vector<bool> coverage;  // H*W

  bool covered(int v, int u) const { return coverage[static_cast<std::size_t>(v) * image.width + u]; }
};

struct Trajectory {
  std::vector<CameraPose> poses;
  std::vector<real> knot_times;
};

// ---------------------------------------------------------------------------
// Rigid transform between two cameras: x_target = R * x_reference + t.

struct RigidTransform {
  Mat3 rotation;
  Vec3 translation;
};

inline RigidTransform relative_pose(const CameraPose& reference, const CameraPose& target) {
  const Mat3 r_ref = reference.rotation.to_matrix();
  const Mat3 r_tgt = target.rotation.to_matrix();
  RigidTransform rel;
  rel.rotation = r_tgt * r_ref.transposed();
  rel.translation = target.translation - rel.rotation * reference.translation;
  return rel;
}

inline std::array<real, 12> flatten_transform(const RigidTransform& t) {
  std::array<real, 12> out{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out[r * 4 + c] = t.rotation(r, c);
    out[r * 4 + 3] = t.translation[r];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Depth back-projection. Pixel (u,v) uses the pixel-center ray (u+0.5, v+0.5).

inline PointCloud back_project(const DepthMap& depth, const Image& image,
                               const CameraPose& pose) {
  if (depth.width != image.width || depth.height != image.height)
    throw InputError("back_project: depth and image dimensions differ");
  PointCloud pc;
  for (int v = 0; v < depth.height; ++v) {
    for (int u = 0; u < depth.width; ++u) {
      if (!depth.valid_at(v, u)) continue;
      const real z = depth.at(v, u);
      const real x = (u + 0.5 - pose.cx) / pose.fx * z;
      const real y = (v + 0.5 - pose.cy) / pose.fy * z;
      pc.points.push_back({pose.camera_to_world({x, y, z}), image.pixel(v, u)});
    }
  }
  return pc;
}

// Perspective projection with nearest-depth z-buffering. Ties go to the
// lowest point index; behind-camera points are culled.
inline RenderedGuide render_point_cloud(const PointCloud& pc, const CameraPose& cam) {
  RenderedGuide out;
  out.image = Image(cam.width, cam.height);
  out.coverage.assign(static_cast<std::size_t>(cam.width) * cam.height, false);
  std::vector<real> zbuf(out.coverage.size(), std::numeric_limits<real>::infinity());

  for (const auto& pt : pc.points) {
    const Vec3 p = cam.world_to_camera(pt.position);
    if (p.z <= 0) continue;
    const int u = static_cast<int>(std::floor(p.x / p.z * cam.fx + cam.cx));
    const int v = static_cast<int>(std::floor(p.y / p.z * cam.fy + cam.cy));
    if (u < 0 || u >= cam.width || v < 0 || v >= cam.height) continue;
    const std::size_t idx = static_cast<std::size_t>(v) * cam.width + u;
    if (p.z < zbuf[idx]) {
      zbuf[idx] = p.z;
      out.image.set_pixel(v, u, pt.color);
      out.coverage[idx] = true;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectory interpolation.

// Azimuth about the scene center (mean of camera centers), horizontal plane.
inline std::vector<CameraPose> sort_by_azimuth(const std::vector<CameraPose>& poses) {
  if (poses.size() < 2) throw InputError("sort_by_azimuth: need at least 2 poses");
  Vec3 center{0, 0, 0};
  for (const auto& p : poses) center += p.center();
  center = center / static_cast<real>(poses.size());

  std::vector<real> phi(poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Vec3 c = poses[i].center();
    const real dx = c.x - center.x;
    const real dz = c.z - center.z;
    if (std::hypot(dx, dz) < 1e-12)
      throw InputError("sort_by_azimuth: camera coincides with scene center");
    phi[i] = std::atan2(dz, dx);
  }

  std::vector<std::size_t> order(poses.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return phi[a] < phi[b]; });

  std::vector<CameraPose> sorted;
  sorted.reserve(poses.size());
  for (std::size_t i : order) sorted.push_back(poses[i]);
  return sorted;
}

namespace detail {

// Natural cubic spline through y_0..y_K at integer knots; returns the second
// derivatives m_0..m_K (m_0 = m_K = 0). Tridiagonal solve.
template <typename T = real>
inline std::vector<T> spline_second_derivs(const std::vector<T>& y) {
  const std::size_t n = y.size();
  std::vector<T> m(n, 0);
  if (n < 3) return m;
  const std::size_t in = n - 2;      // interior knots
  std::vector<T> diag(in, 4), rhs(in);
  for (std::size_t i = 0; i < in; ++i)
    rhs[i] = 6 * (y[i] - 2 * y[i + 1] + y[i + 2]);
  // Thomas algorithm, off-diagonals are all 1.
  for (std::size_t i = 1; i < in; ++i) {
    const T w = T(1) / diag[i - 1];
    diag[i] -= w;
    rhs[i] -= w * rhs[i - 1];
  }
  for (std::size_t i = in; i-- > 0;) {
    T upper = (i + 1 < in) ? m[i + 2] : T(0);
    m[i + 1] = (rhs[i] - upper) / diag[i];
  }
  return m;
}

template <typename T = real>
inline T spline_eval(const std::vector<T>& y, const std::vector<T>& m, T t) {
  const std::size_t segs = y.size() - 1;
  std::size_t k = static_cast<std::size_t>(std::floor(t));
  if (k >= segs) k = segs - 1;
  const T u = t - static_cast<T>(k);
  const T a = y[k], b = y[k + 1];
  return a + u * (b - a - (2 * m[k] + m[k + 1]) / T(6)) +
         u * u * (m[k] / T(2)) + u * u * u * ((m[k + 1] - m[k]) / T(6));
}

}  // namespace detail

// Closed-loop natural cubic spline over the sorted centers. The first center
// is appended as the final knot; samples are uniform on [0, K] where K is the
// number of input centers.
inline std::vector<Vec3> spline_positions(const std::vector<Vec3>& sorted_centers,
                                          std::size_t n_samples) {
  if (sorted_centers.size() < 2) throw InputError("spline_positions: need at least 2 centers");
  if (n_samples < 2) throw InputError("spline_positions: need at least 2 samples");

  std::vector<Vec3> knots = sorted_centers;
  knots.push_back(sorted_centers.front());
  const std::size_t k = knots.size();

  std::array<std::vector<real>, 3> axes;
  std::array<std::vector<real>, 3> derivs;
  for (int a = 0; a < 3; ++a) {
    axes[a].resize(k);
    for (std::size_t i = 0; i < k; ++i) axes[a][i] = knots[i][a];
    derivs[a] = detail::spline_second_derivs(axes[a]);
  }

  const real span = static_cast<real>(k - 1);
  std::vector<Vec3> out(n_samples);
  for (std::size_t j = 0; j < n_samples; ++j) {
    const real t = span * static_cast<real>(j) / static_cast<real>(n_samples - 1);
    out[j] = {detail::spline_eval(axes[0], derivs[0], t),
              detail::spline_eval(axes[1], derivs[1], t),
              detail::spline_eval(axes[2], derivs[2], t)};
  }
  return out;
}

// Shortest-geodesic SLERP with antipodal sign flip; falls back to normalized
// linear interpolation when the angle is tiny.
inline Quat slerp(const Quat& qa, const Quat& qb_in, real alpha) {
  Quat qb = qb_in;
  real d = qa.dot(qb);
  if (d < 0) {
    qb = -qb;
    d = -d;
  }
  d = std::min<real>(d, 1.0);
  const real theta = std::acos(d);
  if (theta < 1e-6) {
    Quat q{qa.w + alpha * (qb.w - qa.w), qa.x + alpha * (qb.x - qa.x),
           qa.y + alpha * (qb.y - qa.y), qa.z + alpha * (qb.z - qa.z)};
    return q.normalized();
  }
  const real s = std::sin(theta);
  const real wa = std::sin((1 - alpha) * theta) / s;
  const real wb = std::sin(alpha * theta) / s;
  Quat q{wa * qa.w + wb * qb.w, wa * qa.x + wb * qb.x, wa * qa.y + wb * qb.y,
         wa * qa.z + wb * qb.z};
  return q.normalized();
}

// Azimuth-sort the poses, spline the centers, SLERP the rotations, close the
// loop, and sample uniformly. Intrinsics come from the nearest knot.
inline Trajectory interpolate_trajectory(const std::vector<CameraPose>& poses,
                                         std::size_t n_samples) {
  const std::vector<CameraPose> sorted = sort_by_azimuth(poses);
  const std::size_t k = sorted.size();

  std::vector<Vec3> centers;
  centers.reserve(k);
  for (const auto& p : sorted) centers.push_back(p.center());
  const std::vector<Vec3> positions = spline_positions(centers, n_samples);

  std::vector<Quat> knots_q;
  knots_q.reserve(k + 1);
  for (const auto& p : sorted) knots_q.push_back(p.rotation);
  knots_q.push_back(sorted.front().rotation);

  Trajectory traj;
  traj.poses.reserve(n_samples);
  traj.knot_times.reserve(n_samples);
  const real span = static_cast<real>(k);
  for (std::size_t j = 0; j < n_samples; ++j) {
    const real t = span * static_cast<real>(j) / static_cast<real>(n_samples - 1);
    std::size_t seg = static_cast<std::size_t>(std::floor(t));
    if (seg >= k) seg = k - 1;
    const real alpha = t - static_cast<real>(seg);
    const Quat rot = slerp(knots_q[seg], knots_q[seg + 1], alpha);

    const std::size_t nearest = (alpha < 0.5 ? seg : seg + 1) % k;

    CameraPose pose = sorted[nearest];
    pose.rotation = rot;
    // Recover t from the sampled camera center: t = -R * C.
    pose.translation = rot.to_matrix() * (-positions[j]);
    traj.poses.push_back(pose);
    traj.knot_times.push_back(t);
  }
  return traj;
}

}  // namespace fourd
