#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fourd {

using real = double;

struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct StateError : std::runtime_error {
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Small fixed-size linear algebra. Column vectors, row-major matrices.

struct Vec3 {
  real x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(real x_, real y_, real z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(real s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(real s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec3 operator-() const { return {-x, -y, -z}; }

  real dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  real norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const { return *this / norm(); }
  real operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  real& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(real s, const Vec3& v) { return v * s; }

struct Mat3 {
  std::array<real, 9> m{};  // row-major

  static Mat3 identity() {
    Mat3 r;
    r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    return r;
  }

  real& operator()(int r, int c) { return m[r * 3 + c]; }
  real operator()(int r, int c) const { return m[r * 3 + c]; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        real s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }

  Mat3 operator*(real s) const {
    Mat3 r = *this;
    for (auto& e : r.m) e *= s;
    return r;
  }

  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
};

// Unit quaternion, w-first storage.
struct Quat {
  real w = 1, x = 0, y = 0, z = 0;

  Quat() = default;
  Quat(real w_, real x_, real y_, real z_) : w(w_), x(x_), y(y_), z(z_) {}

  static Quat from_axis_angle(const Vec3& axis, real angle) {
    const Vec3 a = axis.normalized();
    const real h = angle / 2;
    const real s = std::sin(h);
    return {std::cos(h), a.x * s, a.y * s, a.z * s};
  }

  real norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quat normalized() const {
    const real n = norm();
    return {w / n, x / n, y / n, z / n};
  }

  real dot(const Quat& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }

  Quat conjugate() const { return {w, -x, -y, -z}; }

  Quat operator*(const Quat& o) const {
    return {w * o.w - x * o.x - y * o.y - z * o.z,
            w * o.x + x * o.w + y * o.z - z * o.y,
            w * o.y - x * o.z + y * o.w + z * o.x,
            w * o.z + x * o.y - y * o.x + z * o.w};
  }

  Quat operator-() const { return {-w, -x, -y, -z}; }

  Mat3 to_matrix() const {
    Mat3 r;
    const real ww = w * w, xx = x * x, yy = y * y, zz = z * z;
    r.m = {ww + xx - yy - zz, 2 * (x * y - w * z), 2 * (x * z + w * y),
           2 * (x * y + w * z), ww - xx + yy - zz, 2 * (y * z - w * x),
           2 * (x * z - w * y), 2 * (y * z + w * x), ww - xx - yy + zz};
    return r;
  }

  static Quat from_matrix(const Mat3& m) {
    // Shepperd's method, branch on the largest diagonal contribution.
    const real tr = m(0, 0) + m(1, 1) + m(2, 2);
    Quat q;
    if (tr > 0) {
      const real s = std::sqrt(tr + 1.0) * 2;
      q = {s / 4, (m(2, 1) - m(1, 2)) / s, (m(0, 2) - m(2, 0)) / s,
           (m(1, 0) - m(0, 1)) / s};
    } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
      const real s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2;
      q = {(m(2, 1) - m(1, 2)) / s, s / 4, (m(0, 1) + m(1, 0)) / s,
           (m(0, 2) + m(2, 0)) / s};
    } else if (m(1, 1) > m(2, 2)) {
      const real s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2;
      q = {(m(0, 2) - m(2, 0)) / s, (m(0, 1) + m(1, 0)) / s, s / 4,
           (m(1, 2) + m(2, 1)) / s};
    } else {
      const real s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2;
      q = {(m(1, 0) - m(0, 1)) / s, (m(0, 2) + m(2, 0)) / s,
           (m(1, 2) + m(2, 1)) / s, s / 4};
    }
    return q.normalized();
  }
};

// Geodesic angle between two unit quaternions (rotation-space, in [0, pi]).
inline real quat_angle(const Quat& a, const Quat& b) {
  const real d = std::min<real>(1.0, std::abs(a.dot(b)));
  return 2 * std::acos(d);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. All stochastic code in the toolkit derives streams from
// explicit 64-bit seeds so runs are reproducible byte for byte.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  real uniform(real lo = 0, real hi = 1) {
    return std::uniform_real_distribution<real>(lo, hi)(gen_);
  }

  real normal(real mean = 0, real stddev = 1) {
    return std::normal_distribution<real>(mean, stddev)(gen_);
  }

  std::uint64_t next_u64() { return gen_(); }

  // Integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(gen_);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

inline std::vector<real> random_normal(Rng& rng, std::size_t n) {
  std::vector<real> v(n);
  for (auto& e : v) e = rng.normal();
  return v;
}

}  // namespace fourd
