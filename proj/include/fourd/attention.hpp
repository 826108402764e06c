#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <tuple>
#include <vector>

#include "fourd/common.hpp"

namespace fourd {

// ---------------------------------------------------------------------------
// Token-grid indexing: flat index <-> (view, time, spatial) coordinates.
// Row-major, view slowest, spatial-column fastest.

struct GridIndex {
  int n_views = 1;    // N_v
  int n_time = 2;     // 2f (target half then condition half, per view)
  int n_spatial = 1;  // s = h*w tokens per frame

  std::size_t total() const {
    return static_cast<std::size_t>(n_views) * n_time * n_spatial;
  }

  std::size_t flatten(int v, int t, int p) const {
    if (v < 0 || v >= n_views || t < 0 || t >= n_time || p < 0 || p >= n_spatial)
      throw InputError("GridIndex::flatten: coordinate out of range");
    return (static_cast<std::size_t>(v) * n_time + t) * n_spatial + p;
  }

  std::tuple<int, int, int> unflatten(std::size_t i) const {
    if (i >= total()) throw InputError("GridIndex::unflatten: index out of range");
    const int p = static_cast<int>(i % n_spatial);
    const int t = static_cast<int>((i / n_spatial) % n_time);
    const int v = static_cast<int>(i / (static_cast<std::size_t>(n_spatial) * n_time));
    return {v, t, p};
  }
};

// Convenience for the spec's 4D (v, t, p, q) indexing with s = rows*cols.
inline std::size_t flatten4(int v, int t, int p, int q, const GridIndex& grid,
                            int spatial_cols) {
  if (q < 0 || q >= spatial_cols) throw InputError("flatten4: q out of range");
  return grid.flatten(v, t, p * spatial_cols + q);
}

// ---------------------------------------------------------------------------
// Collapsed 4D -> 3D position, (v, t, p, q) -> (v*T_max + t, p, q).

struct CollapsedPosition {
  int t_prime = 0;
  int p = 0;
  int q = 0;
};

inline CollapsedPosition collapse_position(int v, int t, int p, int q, int t_max) {
  if (t < 0 || t >= t_max) throw InputError("collapse_position: t out of range");
  if (v < 0) throw InputError("collapse_position: negative view");
  return {v * t_max + t, p, q};
}

// ---------------------------------------------------------------------------
// T-V fused sparse mask at (view, time)-pair granularity. Spatial positions
// are all-to-all within an allowed pair.
//
// A pair ((v_i,t_i),(v_j,t_j)) is allowed iff
//   v_i = v_j, or t_i = t_j, or
//   (t_i < f and t_j = t_i + f and v_j is the reference view),
// with views 0-based and view 0 the reference.

struct TVMask {
  int n_views = 1;
  int f = 1;                    // target half-length; n_time = 2f
  std::vector<bool> pair_mask;  // (n_views*2f)^2, row-major over pair index

  int n_pairs() const { return n_views * 2 * f; }
  int pair_index(int v, int t) const { return v * 2 * f + t; }

  bool allowed_pair(int vi, int ti, int vj, int tj) const {
    return pair_mask[static_cast<std::size_t>(pair_index(vi, ti)) * n_pairs() +
                     pair_index(vj, tj)];
  }

  bool allowed_token(std::size_t i, std::size_t j, const GridIndex& grid) const {
    auto [vi, ti, pi] = grid.unflatten(i);
    auto [vj, tj, pj] = grid.unflatten(j);
    (void)pi;
    (void)pj;
    return allowed_pair(vi, ti, vj, tj);
  }
};

inline bool tv_pair_allowed(int vi, int ti, int vj, int tj, int f) {
  if (vi == vj || ti == tj) return true;
  return ti < f && tj == ti + f && vj == 0;
}

// Intra-view / intra-time part only (the clauses the density formula counts).
inline bool tv_pair_allowed_symmetric(int vi, int ti, int vj, int tj) {
  return vi == vj || ti == tj;
}

inline TVMask build_mask(int n_views, int f) {
  if (n_views < 1 || f < 1) throw InputError("build_mask: n_views and f must be >= 1");
  TVMask mask;
  mask.n_views = n_views;
  mask.f = f;
  const int np = mask.n_pairs();
  mask.pair_mask.assign(static_cast<std::size_t>(np) * np, false);
  for (int vi = 0; vi < n_views; ++vi)
    for (int ti = 0; ti < 2 * f; ++ti)
      for (int vj = 0; vj < n_views; ++vj)
        for (int tj = 0; tj < 2 * f; ++tj)
          mask.pair_mask[static_cast<std::size_t>(mask.pair_index(vi, ti)) * np +
                         mask.pair_index(vj, tj)] =
              tv_pair_allowed(vi, ti, vj, tj, f);
  return mask;
}

// Closed-form density (2f + N_v - 1) / (2f * N_v) of the intra-view/intra-time
// mask; the cross-half edges are not counted by the formula.
inline real mask_density(int n_views, int f) {
  if (n_views < 1 || f < 1) throw InputError("mask_density: n_views and f must be >= 1");
  return static_cast<real>(2 * f + n_views - 1) / static_cast<real>(2 * f * n_views);
}

// Fraction of true entries of the full pair mask (cross-half included).
inline real measured_density(const TVMask& mask) {
  std::size_t count = 0;
  for (bool b : mask.pair_mask) count += b ? 1 : 0;
  const std::size_t np = static_cast<std::size_t>(mask.n_pairs());
  return static_cast<real>(count) / static_cast<real>(np * np);
}

// Count of intra-view/intra-time pair entries; equals rows * (2f + N_v - 1).
inline std::size_t symmetric_pair_count(const TVMask& mask) {
  std::size_t count = 0;
  for (int vi = 0; vi < mask.n_views; ++vi)
    for (int ti = 0; ti < 2 * mask.f; ++ti)
      for (int vj = 0; vj < mask.n_views; ++vj)
        for (int tj = 0; tj < 2 * mask.f; ++tj)
          if (tv_pair_allowed_symmetric(vi, ti, vj, tj)) ++count;
  return count;
}

inline std::size_t cross_half_edge_count(const TVMask& mask) {
  std::size_t count = 0;
  for (int vi = 0; vi < mask.n_views; ++vi)
    for (int ti = 0; ti < 2 * mask.f; ++ti)
      for (int vj = 0; vj < mask.n_views; ++vj)
        for (int tj = 0; tj < 2 * mask.f; ++tj)
          if (tv_pair_allowed(vi, ti, vj, tj, mask.f) &&
              !tv_pair_allowed_symmetric(vi, ti, vj, tj))
            ++count;
  return count;
}

// ---------------------------------------------------------------------------
// Masked attention. Row-wise softmax over allowed keys only, with per-row
// max subtraction. Sequential within-row accumulation keeps results
// deterministic.

template <typename Real>
struct AttentionResult {
  std::vector<Real> output;   // N x d
  std::vector<Real> weights;  // N x N softmax weights (kept for backward)
};

template <typename Real>
AttentionResult<Real> masked_attention_full(const std::vector<Real>& q,
                                            const std::vector<Real>& k,
                                            const std::vector<Real>& v,
                                            std::size_t n, std::size_t d,
                                            const TVMask& mask,
                                            const GridIndex& grid) {
  if (q.size() != n * d || k.size() != n * d || v.size() != n * d)
    throw InputError("masked_attention: shape mismatch");
  if (grid.total() != n) throw InputError("masked_attention: grid/token mismatch");

  // Cache per-token pair indices once.
  std::vector<int> pair_of(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto [vi, ti, pi] = grid.unflatten(i);
    (void)pi;
    pair_of[i] = mask.pair_index(vi, ti);
  }
  const int np = mask.n_pairs();

  AttentionResult<Real> res;
  res.output.assign(n * d, Real(0));
  res.weights.assign(n * n, Real(0));
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(d));

  std::vector<Real> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    Real row_max = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.pair_mask[static_cast<std::size_t>(pair_of[i]) * np + pair_of[j]])
        continue;
      Real s = 0;
      for (std::size_t c = 0; c < d; ++c) s += q[i * d + c] * k[j * d + c];
      s *= scale;
      scores[j] = s;
      row_max = std::max(row_max, s);
    }
    Real denom = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.pair_mask[static_cast<std::size_t>(pair_of[i]) * np + pair_of[j]])
        continue;
      denom += std::exp(scores[j] - row_max);
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.pair_mask[static_cast<std::size_t>(pair_of[i]) * np + pair_of[j]])
        continue;
      const Real w = std::exp(scores[j] - row_max) / denom;
      res.weights[i * n + j] = w;
      for (std::size_t c = 0; c < d; ++c) res.output[i * d + c] += w * v[j * d + c];
    }
  }
  return res;
}

template <typename Real>
std::vector<Real> masked_attention(const std::vector<Real>& q,
                                   const std::vector<Real>& k,
                                   const std::vector<Real>& v, std::size_t n,
                                   std::size_t d, const TVMask& mask,
                                   const GridIndex& grid) {
  return masked_attention_full(q, k, v, n, d, mask, grid).output;
}

// Dense test oracle: materialize the N x N score matrix, additive -1e9 fill
// on disallowed entries, plain softmax, multiply by V.
template <typename Real>
std::vector<Real> dense_oracle_attention(const std::vector<Real>& q,
                                         const std::vector<Real>& k,
                                         const std::vector<Real>& v,
                                         std::size_t n, std::size_t d,
                                         const TVMask& mask,
                                         const GridIndex& grid) {
  if (q.size() != n * d || k.size() != n * d || v.size() != n * d)
    throw InputError("dense_oracle_attention: shape mismatch");
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(d));
  std::vector<Real> out(n * d, Real(0));
  std::vector<Real> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Real s = 0;
      for (std::size_t c = 0; c < d; ++c) s += q[i * d + c] * k[j * d + c];
      s *= scale;
      if (!mask.allowed_token(i, j, grid)) s += Real(-1e9);
      scores[j] = s;
    }
    Real row_max = scores[0];
    for (std::size_t j = 1; j < n; ++j) row_max = std::max(row_max, scores[j]);
    Real denom = 0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(scores[j] - row_max);
    for (std::size_t j = 0; j < n; ++j) {
      const Real w = std::exp(scores[j] - row_max) / denom;
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += w * v[j * d + c];
    }
  }
  return out;
}

}  // namespace fourd
