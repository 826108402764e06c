#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fourd/attention.hpp"
#include "fourd/common.hpp"

namespace fourd {

// ---------------------------------------------------------------------------
// Flat named parameter storage. Gradients live in a parallel flat vector with
// the same layout, which also makes finite-difference sweeps and checkpoint
// serialization straightforward.

template <typename Real>
struct ParamStore {
  struct Entry {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
    std::vector<std::size_t> shape;
  };

  std::vector<Real> data;
  std::vector<Entry> entries;

  std::size_t add(const std::string& name, const std::vector<std::size_t>& shape) {
    std::size_t size = 1;
    for (auto s : shape) size *= s;
    const std::size_t offset = data.size();
    entries.push_back({name, offset, size, shape});
    data.resize(offset + size, Real(0));
    return offset;
  }

  Real* at(std::size_t offset) { return data.data() + offset; }
  const Real* at(std::size_t offset) const { return data.data() + offset; }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Latent grids: n_views x f x c x h x w, row-major.

template <typename Real>
struct LatentGrid {
  int n_views = 0, f = 0, channels = 0, height = 0, width = 0;
  std::vector<Real> values;

  LatentGrid() = default;
  LatentGrid(int nv, int f_, int c, int h, int w)
      : n_views(nv), f(f_), channels(c), height(h), width(w),
        values(static_cast<std::size_t>(nv) * f_ * c * h * w, Real(0)) {}

  std::size_t index(int v, int t, int c, int y, int x) const {
    return (((static_cast<std::size_t>(v) * f + t) * channels + c) * height + y) *
               width + x;
  }
  Real& at(int v, int t, int c, int y, int x) { return values[index(v, t, c, y, x)]; }
  Real at(int v, int t, int c, int y, int x) const { return values[index(v, t, c, y, x)]; }

  bool same_shape(const LatentGrid& o) const {
    return n_views == o.n_views && f == o.f && channels == o.channels &&
           height == o.height && width == o.width;
  }
};

struct ModelConfig {
  int n_views = 2;
  int f = 2;
  int channels = 3;
  int height = 4;
  int width = 4;
  int patch = 1;
  int d = 32;
  int blocks = 2;
  int heads = 2;
  int tau_dim = 32;

  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  int s() const { return grid_h() * grid_w(); }
  int raw_dim() const { return channels * patch * patch; }
  int n_time() const { return 2 * f; }
  std::size_t n_tokens() const {
    return static_cast<std::size_t>(n_views) * n_time() * s();
  }
};

// ---------------------------------------------------------------------------
// Tokenization: patchify target and condition halves independently, then
// concatenate along the frame axis (target slots 0..f-1, condition f..2f-1).

template <typename Real>
std::vector<Real> tokenize(const LatentGrid<Real>& target,
                           const LatentGrid<Real>& condition,
                           const ModelConfig& cfg) {
  if (!target.same_shape(condition))
    throw InputError("tokenize: target and condition shapes differ");
  if (target.height % cfg.patch != 0 || target.width % cfg.patch != 0)
    throw InputError("tokenize: spatial dims not divisible by patch size");

  const int s = cfg.s(), raw = cfg.raw_dim(), p = cfg.patch;
  std::vector<Real> tokens(cfg.n_tokens() * raw, Real(0));
  auto write_half = [&](const LatentGrid<Real>& g, int slot_base) {
    for (int v = 0; v < g.n_views; ++v)
      for (int t = 0; t < g.f; ++t)
        for (int py = 0; py < cfg.grid_h(); ++py)
          for (int px = 0; px < cfg.grid_w(); ++px) {
            const std::size_t tok =
                (static_cast<std::size_t>(v) * cfg.n_time() + slot_base + t) * s +
                py * cfg.grid_w() + px;
            std::size_t r = 0;
            for (int c = 0; c < g.channels; ++c)
              for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                  tokens[tok * raw + r++] = g.at(v, t, c, py * p + dy, px * p + dx);
          }
  };
  write_half(target, 0);
  write_half(condition, cfg.f);
  return tokens;
}

// Inverse of tokenize for one half (slot_base 0 for target, f for condition).
template <typename Real>
LatentGrid<Real> detokenize_half(const std::vector<Real>& tokens, int slot_base,
                                 const ModelConfig& cfg) {
  LatentGrid<Real> g(cfg.n_views, cfg.f, cfg.channels, cfg.height, cfg.width);
  const int s = cfg.s(), raw = cfg.raw_dim(), p = cfg.patch;
  for (int v = 0; v < cfg.n_views; ++v)
    for (int t = 0; t < cfg.f; ++t)
      for (int py = 0; py < cfg.grid_h(); ++py)
        for (int px = 0; px < cfg.grid_w(); ++px) {
          const std::size_t tok =
              (static_cast<std::size_t>(v) * cfg.n_time() + slot_base + t) * s +
              py * cfg.grid_w() + px;
          std::size_t r = 0;
          for (int c = 0; c < cfg.channels; ++c)
            for (int dy = 0; dy < p; ++dy)
              for (int dx = 0; dx < p; ++dx)
                g.at(v, t, c, py * p + dy, px * p + dx) = tokens[tok * raw + r++];
        }
  return g;
}

// ---------------------------------------------------------------------------
// Linear layer primitives on flat row-major matrices. Y[n x out] = X[n x in]
// * W^T + b, with W stored [out x in].

template <typename Real>
void linear_forward(const Real* x, std::size_t n, std::size_t in, const Real* w,
                    const Real* b, std::size_t out, Real* y) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      Real s = b ? b[o] : Real(0);
      for (std::size_t c = 0; c < in; ++c) s += x[i * in + c] * w[o * in + c];
      y[i * out + o] = s;
    }
}

template <typename Real>
void linear_backward(const Real* x, const Real* dy, std::size_t n, std::size_t in,
                     const Real* w, std::size_t out, Real* dx, Real* dw,
                     Real* db = nullptr) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      const Real g = dy[i * out + o];
      if (g == Real(0)) continue;
      if (db) db[o] += g;
      for (std::size_t c = 0; c < in; ++c) {
        if (dw) dw[o * in + c] += g * x[i * in + c];
        if (dx) dx[i * in + c] += g * w[o * in + c];
      }
    }
}

// ---------------------------------------------------------------------------
// Pair-level attention masks shared by the per-view and fused paths. Tokens
// of one (view, time) pair are contiguous (pair * s .. pair * s + s).

struct PairRouting {
  int n_pairs = 0;
  int s = 1;
  std::vector<std::vector<int>> allowed;  // per pair row: allowed pair columns

  static PairRouting per_view(int n_views, int n_time, int s) {
    PairRouting r;
    r.n_pairs = n_views * n_time;
    r.s = s;
    r.allowed.resize(r.n_pairs);
    for (int v = 0; v < n_views; ++v)
      for (int t = 0; t < n_time; ++t) {
        auto& row = r.allowed[v * n_time + t];
        for (int t2 = 0; t2 < n_time; ++t2) row.push_back(v * n_time + t2);
      }
    return r;
  }

  static PairRouting fused(const TVMask& mask, int s) {
    PairRouting r;
    r.n_pairs = mask.n_pairs();
    r.s = s;
    r.allowed.resize(r.n_pairs);
    for (int i = 0; i < r.n_pairs; ++i)
      for (int j = 0; j < r.n_pairs; ++j)
        if (mask.pair_mask[static_cast<std::size_t>(i) * r.n_pairs + j])
          r.allowed[i].push_back(j);
    return r;
  }
};

// Offsets of one attention module's weights inside a ParamStore.
struct AttnOffsets {
  std::size_t wq = 0, wk = 0, wv = 0, wo = 0;
  std::size_t bq = 0, bk = 0, bv = 0, bo = 0;
};

template <typename Real>
struct AttnCache {
  std::vector<Real> x;               // input copy, N x d
  std::vector<Real> q, k, v;         // N x d
  std::vector<Real> concat;          // pre-out-projection, N x d
  std::vector<Real> probs;           // heads x N x N (dense; zero where masked)
};

// Multi-head attention with a pair-level mask. Deterministic sequential
// accumulation per row.
template <typename Real>
void mha_forward(const Real* x, std::size_t n, int d, int heads,
                 const ParamStore<Real>& params, const AttnOffsets& off,
                 const PairRouting& routing, AttnCache<Real>& cache, Real* y) {
  const int dh = d / heads;
  cache.x.assign(x, x + n * d);
  cache.q.resize(n * d);
  cache.k.resize(n * d);
  cache.v.resize(n * d);
  cache.concat.assign(n * d, Real(0));
  cache.probs.assign(static_cast<std::size_t>(heads) * n * n, Real(0));

  linear_forward(x, n, d, params.at(off.wq), params.at(off.bq), d, cache.q.data());
  linear_forward(x, n, d, params.at(off.wk), params.at(off.bk), d, cache.k.data());
  linear_forward(x, n, d, params.at(off.wv), params.at(off.bv), d, cache.v.data());

  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const int s = routing.s;
  std::vector<Real> scores(n);
  for (int h = 0; h < heads; ++h) {
    const int c0 = h * dh;
    Real* probs = cache.probs.data() + static_cast<std::size_t>(h) * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      const int row_pair = static_cast<int>(i / s);
      Real row_max = -std::numeric_limits<Real>::infinity();
      for (int ap : routing.allowed[row_pair])
        for (std::size_t j = static_cast<std::size_t>(ap) * s; j < static_cast<std::size_t>(ap + 1) * s; ++j) {
          Real sc = 0;
          for (int c = 0; c < dh; ++c) sc += cache.q[i * d + c0 + c] * cache.k[j * d + c0 + c];
          sc *= scale;
          scores[j] = sc;
          row_max = std::max(row_max, sc);
        }
      Real denom = 0;
      for (int ap : routing.allowed[row_pair])
        for (std::size_t j = static_cast<std::size_t>(ap) * s; j < static_cast<std::size_t>(ap + 1) * s; ++j)
          denom += std::exp(scores[j] - row_max);
      for (int ap : routing.allowed[row_pair])
        for (std::size_t j = static_cast<std::size_t>(ap) * s; j < static_cast<std::size_t>(ap + 1) * s; ++j) {
          const Real w = std::exp(scores[j] - row_max) / denom;
          probs[i * n + j] = w;
          for (int c = 0; c < dh; ++c)
            cache.concat[i * d + c0 + c] += w * cache.v[j * d + c0 + c];
        }
    }
  }
  linear_forward(cache.concat.data(), n, d, params.at(off.wo), params.at(off.bo), d, y);
}

template <typename Real>
void mha_backward(const Real* dy, std::size_t n, int d, int heads,
                  const ParamStore<Real>& params, const AttnOffsets& off,
                  const PairRouting& routing, const AttnCache<Real>& cache,
                  std::vector<Real>& grads, Real* dx) {
  const int dh = d / heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const int s = routing.s;

  std::vector<Real> d_concat(n * d, Real(0));
  linear_backward(cache.concat.data(), dy, n, d, params.at(off.wo), d,
                  d_concat.data(), grads.data() + off.wo, grads.data() + off.bo);

  std::vector<Real> dq(n * d, Real(0)), dk(n * d, Real(0)), dv(n * d, Real(0));
  std::vector<Real> d_scores(n);
  for (int h = 0; h < heads; ++h) {
    const int c0 = h * dh;
    const Real* probs = cache.probs.data() + static_cast<std::size_t>(h) * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      const int row_pair = static_cast<int>(i / s);
      // dA_ij = <d_concat_i, v_j>; softmax backward within the row.
      Real dot_sum = 0;
      for (int ap : routing.allowed[row_pair])
        for (std::size_t j = static_cast<std::size_t>(ap) * s; j < static_cast<std::size_t>(ap + 1) * s; ++j) {
          Real da = 0;
          for (int c = 0; c < dh; ++c) da += d_concat[i * d + c0 + c] * cache.v[j * d + c0 + c];
          d_scores[j] = da;
          dot_sum += probs[i * n + j] * da;
        }
      for (int ap : routing.allowed[row_pair])
        for (std::size_t j = static_cast<std::size_t>(ap) * s; j < static_cast<std::size_t>(ap + 1) * s; ++j) {
          const Real p = probs[i * n + j];
          const Real ds = p * (d_scores[j] - dot_sum) * scale;
          for (int c = 0; c < dh; ++c) {
            dq[i * d + c0 + c] += ds * cache.k[j * d + c0 + c];
            dk[j * d + c0 + c] += ds * cache.q[i * d + c0 + c];
            dv[j * d + c0 + c] += p * d_concat[i * d + c0 + c];
          }
        }
    }
  }

  linear_backward(cache.x.data(), dq.data(), n, d, params.at(off.wq), d, dx,
                  grads.data() + off.wq, grads.data() + off.bq);
  linear_backward(cache.x.data(), dk.data(), n, d, params.at(off.wk), d, dx,
                  grads.data() + off.wk, grads.data() + off.bk);
  linear_backward(cache.x.data(), dv.data(), n, d, params.at(off.wv), d, dx,
                  grads.data() + off.wv, grads.data() + off.bv);
}

// ---------------------------------------------------------------------------
// The velocity field: patch embed + positional/tau conditioning + B blocks of
// {per-view self-attention, camera injection, fused masked attention with a
// zero-initialized residual projector, feed-forward} + output head reading
// the target half only.

template <typename Real>
class VelocityModel {
 public:
  struct BlockOffsets {
    AttnOffsets self_attn;
    AttnOffsets fused_attn;
    std::size_t w_cam = 0, b_cam = 0;
    std::size_t w_proj = 0, b_proj = 0;
    std::size_t w_ff1 = 0, b_ff1 = 0, w_ff2 = 0, b_ff2 = 0;
  };

  struct Conditioning {
    LatentGrid<Real> condition;                   // projection-guide latents
    std::vector<std::array<Real, 12>> cameras;    // per-view flattened [R|t]
  };

  ModelConfig cfg;
  ParamStore<Real> params;
  std::vector<Real> grads;

  VelocityModel(const ModelConfig& config, std::uint64_t seed) : cfg(config) {
    if (cfg.d % cfg.heads != 0) throw InputError("VelocityModel: d % heads != 0");
    allocate();
    initialize(seed);
    mask_ = build_mask(cfg.n_views, cfg.f);
    routing_self_ = PairRouting::per_view(cfg.n_views, cfg.n_time(), cfg.s());
    routing_fused_ = PairRouting::fused(mask_, cfg.s());
    build_positional();
  }

  void zero_grads() { grads.assign(params.data.size(), Real(0)); }

  LatentGrid<Real> forward(const LatentGrid<Real>& z_noisy, Real tau,
                           const Conditioning& cond) {
    if (tau < Real(0) || tau > Real(1)) throw InputError("velocity_forward: tau outside [0,1]");
    if (static_cast<int>(cond.cameras.size()) != cfg.n_views)
      throw InputError("velocity_forward: camera count mismatch");
    const std::size_t n = cfg.n_tokens();
    const int d = cfg.d;

    cache_ = Cache{};
    cache_.tau = tau;
    cache_.cameras = cond.cameras;
    cache_.raw = tokenize(z_noisy, cond.condition, cfg);

    // Patch embed + fixed positional encoding + tau embedding.
    std::vector<Real> x(n * d);
    linear_forward(cache_.raw.data(), n, cfg.raw_dim(), params.at(w_embed_),
                   params.at(b_embed_), d, x.data());
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) x[i * d + c] += positional_[i * d + c];

    cache_.tau_features = tau_features(tau);
    std::vector<Real> tau_vec(d);
    linear_forward(cache_.tau_features.data(), 1, cfg.tau_dim, params.at(w_tau_),
                   params.at(b_tau_), d, tau_vec.data());
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) x[i * d + c] += tau_vec[c];

    cache_.block_inputs.clear();
    cache_.attn_self.assign(cfg.blocks, {});
    cache_.attn_fused.assign(cfg.blocks, {});
    cache_.ffn_in.assign(cfg.blocks, {});
    cache_.ffn_h.assign(cfg.blocks, {});
    cache_.fused_in.assign(cfg.blocks, {});
    cache_.fused_out.assign(cfg.blocks, {});

    for (int b = 0; b < cfg.blocks; ++b) {
      cache_.block_inputs.push_back(x);
      const BlockOffsets& off = blocks_[b];

      // Per-view self-attention, residual.
      std::vector<Real> attn(n * d);
      mha_forward(x.data(), n, d, cfg.heads, params, off.self_attn, routing_self_,
                  cache_.attn_self[b], attn.data());
      for (std::size_t i = 0; i < n * d; ++i) x[i] += attn[i];

      // Camera embedding, broadcast over one view's tokens.
      const std::size_t tokens_per_view = static_cast<std::size_t>(cfg.n_time()) * cfg.s();
      for (int v = 0; v < cfg.n_views; ++v) {
        std::vector<Real> cam(d);
        linear_forward(cond.cameras[v].data(), 1, 12, params.at(off.w_cam),
                       params.at(off.b_cam), d, cam.data());
        for (std::size_t i = v * tokens_per_view; i < (v + 1) * tokens_per_view; ++i)
          for (int c = 0; c < d; ++c) x[i * d + c] += cam[c];
      }

      // Fused masked attention with residual projector.
      cache_.fused_in[b] = x;
      std::vector<Real> fused(n * d);
      mha_forward(x.data(), n, d, cfg.heads, params, off.fused_attn, routing_fused_,
                  cache_.attn_fused[b], fused.data());
      cache_.fused_out[b] = fused;
      std::vector<Real> proj(n * d);
      linear_forward(fused.data(), n, d, params.at(off.w_proj), params.at(off.b_proj),
                     d, proj.data());
      for (std::size_t i = 0; i < n * d; ++i) x[i] += proj[i];

      // Feed-forward, tanh, residual.
      cache_.ffn_in[b] = x;
      const int hid = 4 * d;
      std::vector<Real> h(n * hid);
      linear_forward(x.data(), n, d, params.at(off.w_ff1), params.at(off.b_ff1), hid,
                     h.data());
      for (auto& e : h) e = std::tanh(e);
      cache_.ffn_h[b] = h;
      std::vector<Real> ff(n * d);
      linear_forward(h.data(), n, hid, params.at(off.w_ff2), params.at(off.b_ff2), d,
                     ff.data());
      for (std::size_t i = 0; i < n * d; ++i) x[i] += ff[i];
    }

    cache_.final_x = x;

    // Head over target-half tokens only.
    std::vector<Real> raw_out(n * cfg.raw_dim(), Real(0));
    for (int v = 0; v < cfg.n_views; ++v)
      for (int t = 0; t < cfg.f; ++t) {
        const std::size_t tok0 =
            (static_cast<std::size_t>(v) * cfg.n_time() + t) * cfg.s();
        linear_forward(x.data() + tok0 * d, cfg.s(), d, params.at(w_head_),
                       params.at(b_head_), cfg.raw_dim(),
                       raw_out.data() + tok0 * cfg.raw_dim());
      }
    cache_.ready = true;
    return detokenize_half(raw_out, 0, cfg);
  }

  // Reverse-mode pass. Accumulates parameter gradients into `grads` and
  // returns the gradient with respect to the noisy target latent.
  LatentGrid<Real> backward(const LatentGrid<Real>& d_out) {
    if (!cache_.ready) throw StateError("backward: no cached forward pass");
    if (grads.size() != params.data.size()) zero_grads();
    const std::size_t n = cfg.n_tokens();
    const int d = cfg.d;

    // Head backward (target-half tokens only).
    LatentGrid<Real> cond_shape(cfg.n_views, cfg.f, cfg.channels, cfg.height, cfg.width);
    std::vector<Real> d_raw_out = tokenize(d_out, cond_shape, cfg);
    std::vector<Real> dx(n * d, Real(0));
    for (int v = 0; v < cfg.n_views; ++v)
      for (int t = 0; t < cfg.f; ++t) {
        const std::size_t tok0 =
            (static_cast<std::size_t>(v) * cfg.n_time() + t) * cfg.s();
        linear_backward(cache_.final_x.data() + tok0 * d,
                        d_raw_out.data() + tok0 * cfg.raw_dim(), cfg.s(), d,
                        params.at(w_head_), cfg.raw_dim(), dx.data() + tok0 * d,
                        grads.data() + w_head_, grads.data() + b_head_);
      }

    for (int b = cfg.blocks - 1; b >= 0; --b) {
      const BlockOffsets& off = blocks_[b];
      const int hid = 4 * d;

      // FFN backward (residual: dx flows through both paths).
      std::vector<Real> dh(n * hid, Real(0));
      linear_backward(cache_.ffn_h[b].data(), dx.data(), n, hid, params.at(off.w_ff2),
                      d, dh.data(), grads.data() + off.w_ff2, grads.data() + off.b_ff2);
      for (std::size_t i = 0; i < n * static_cast<std::size_t>(hid); ++i) {
        const Real t = cache_.ffn_h[b][i];
        dh[i] *= (Real(1) - t * t);
      }
      linear_backward(cache_.ffn_in[b].data(), dh.data(), n, d, params.at(off.w_ff1),
                      hid, dx.data(), grads.data() + off.w_ff1, grads.data() + off.b_ff1);

      // Fused path backward.
      std::vector<Real> d_fused(n * d, Real(0));
      linear_backward(cache_.fused_out[b].data(), dx.data(), n, d,
                      params.at(off.w_proj), d, d_fused.data(),
                      grads.data() + off.w_proj, grads.data() + off.b_proj);
      mha_backward(d_fused.data(), n, d, cfg.heads, params, off.fused_attn,
                   routing_fused_, cache_.attn_fused[b], grads, dx.data());

      // Camera embedding backward: per-view sum of token grads.
      const std::size_t tokens_per_view = static_cast<std::size_t>(cfg.n_time()) * cfg.s();
      for (int v = 0; v < cfg.n_views; ++v) {
        std::vector<Real> d_cam(d, Real(0));
        for (std::size_t i = v * tokens_per_view; i < (v + 1) * tokens_per_view; ++i)
          for (int c = 0; c < d; ++c) d_cam[c] += dx[i * d + c];
        linear_backward(cache_.cameras[v].data(), d_cam.data(), 1, 12,
                        params.at(off.w_cam), d, static_cast<Real*>(nullptr),
                        grads.data() + off.w_cam, grads.data() + off.b_cam);
      }

      // Self-attention backward.
      mha_backward(dx.data(), n, d, cfg.heads, params, off.self_attn, routing_self_,
                   cache_.attn_self[b], grads, dx.data());
    }

    // Tau embedding backward.
    std::vector<Real> d_tau_vec(d, Real(0));
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) d_tau_vec[c] += dx[i * d + c];
    linear_backward(cache_.tau_features.data(), d_tau_vec.data(), 1, cfg.tau_dim,
                    params.at(w_tau_), d, static_cast<Real*>(nullptr), grads.data() + w_tau_,
                    grads.data() + b_tau_);

    // Patch-embed backward; positional encoding is fixed.
    std::vector<Real> d_raw(n * cfg.raw_dim(), Real(0));
    linear_backward(cache_.raw.data(), dx.data(), n, cfg.raw_dim(),
                    params.at(w_embed_), d, d_raw.data(), grads.data() + w_embed_,
                    grads.data() + b_embed_);
    return detokenize_half(d_raw, 0, cfg);
  }

  const TVMask& mask() const { return mask_; }

 private:
  struct Cache {
    bool ready = false;
    Real tau = 0;
    std::vector<std::array<Real, 12>> cameras;
    std::vector<Real> raw;
    std::vector<Real> tau_features;
    std::vector<std::vector<Real>> block_inputs;
    std::vector<AttnCache<Real>> attn_self, attn_fused;
    std::vector<std::vector<Real>> fused_in, fused_out, ffn_in, ffn_h;
    std::vector<Real> final_x;
  };

  void allocate() {
    const std::size_t d = cfg.d, raw = cfg.raw_dim(), hid = 4 * d;
    w_embed_ = params.add("embed.weight", {d, raw});
    b_embed_ = params.add("embed.bias", {d});
    w_tau_ = params.add("tau.weight", {d, static_cast<std::size_t>(cfg.tau_dim)});
    b_tau_ = params.add("tau.bias", {d});
    blocks_.resize(cfg.blocks);
    for (int b = 0; b < cfg.blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      auto attn = [&](const std::string& tag) {
        AttnOffsets o;
        o.wq = params.add(pre + tag + ".wq", {d, d});
        o.wk = params.add(pre + tag + ".wk", {d, d});
        o.wv = params.add(pre + tag + ".wv", {d, d});
        o.wo = params.add(pre + tag + ".wo", {d, d});
        o.bq = params.add(pre + tag + ".bq", {d});
        o.bk = params.add(pre + tag + ".bk", {d});
        o.bv = params.add(pre + tag + ".bv", {d});
        o.bo = params.add(pre + tag + ".bo", {d});
        return o;
      };
      blocks_[b].self_attn = attn("self_attn");
      blocks_[b].fused_attn = attn("fused_attn");
      blocks_[b].w_cam = params.add(pre + "camera.weight", {d, 12});
      blocks_[b].b_cam = params.add(pre + "camera.bias", {d});
      blocks_[b].w_proj = params.add(pre + "fused_proj.weight", {d, d});
      blocks_[b].b_proj = params.add(pre + "fused_proj.bias", {d});
      blocks_[b].w_ff1 = params.add(pre + "ffn.w1", {hid, d});
      blocks_[b].b_ff1 = params.add(pre + "ffn.b1", {hid});
      blocks_[b].w_ff2 = params.add(pre + "ffn.w2", {d, hid});
      blocks_[b].b_ff2 = params.add(pre + "ffn.b2", {d});
    }
    w_head_ = params.add("head.weight", {raw, d});
    b_head_ = params.add("head.bias", {raw});
  }

  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    auto fill = [&](std::size_t off, std::size_t rows, std::size_t cols) {
      const Real scale = Real(1) / std::sqrt(static_cast<Real>(cols));
      for (std::size_t i = 0; i < rows * cols; ++i)
        params.data[off + i] = static_cast<Real>(rng.uniform(-1, 1)) * scale;
    };
    const std::size_t d = cfg.d, raw = cfg.raw_dim(), hid = 4 * d;
    fill(w_embed_, d, raw);
    fill(w_tau_, d, cfg.tau_dim);
    for (int b = 0; b < cfg.blocks; ++b) {
      auto& off = blocks_[b];
      for (auto* a : {&off.self_attn}) {
        fill(a->wq, d, d);
        fill(a->wk, d, d);
        fill(a->wv, d, d);
        fill(a->wo, d, d);
      }
      // Fused attention starts as a copy of the per-view self-attention;
      // camera encoder and fused projector start at zero.
      auto copy = [&](std::size_t dst, std::size_t src, std::size_t sz) {
        for (std::size_t i = 0; i < sz; ++i) params.data[dst + i] = params.data[src + i];
      };
      copy(off.fused_attn.wq, off.self_attn.wq, d * d);
      copy(off.fused_attn.wk, off.self_attn.wk, d * d);
      copy(off.fused_attn.wv, off.self_attn.wv, d * d);
      copy(off.fused_attn.wo, off.self_attn.wo, d * d);
      fill(off.w_ff1, hid, d);
      fill(off.w_ff2, d, hid);
    }
    fill(w_head_, raw, d);
  }

  std::vector<Real> tau_features(Real tau) const {
    std::vector<Real> f(cfg.tau_dim);
    const int half = cfg.tau_dim / 2;
    for (int i = 0; i < half; ++i) {
      const Real freq = std::pow(Real(10000), -static_cast<Real>(i) / half);
      f[2 * i] = std::sin(tau * freq * Real(1000));
      f[2 * i + 1] = std::cos(tau * freq * Real(1000));
    }
    return f;
  }

  void build_positional() {
    const std::size_t n = cfg.n_tokens();
    const int d = cfg.d;
    positional_.assign(n * d, Real(0));
    const int third = d / 3;
    auto encode = [&](Real value, int base, int len, std::size_t tok) {
      for (int i = 0; i < len / 2; ++i) {
        const Real freq = std::pow(Real(10000), -Real(2 * i) / len);
        positional_[tok * d + base + 2 * i] = std::sin(value * freq);
        positional_[tok * d + base + 2 * i + 1] = std::cos(value * freq);
      }
    };
    for (int v = 0; v < cfg.n_views; ++v)
      for (int t = 0; t < cfg.n_time(); ++t)
        for (int py = 0; py < cfg.grid_h(); ++py)
          for (int px = 0; px < cfg.grid_w(); ++px) {
            const std::size_t tok =
                (static_cast<std::size_t>(v) * cfg.n_time() + t) * cfg.s() +
                py * cfg.grid_w() + px;
            const CollapsedPosition cp =
                collapse_position(v, t, py, px, cfg.n_time());
            encode(static_cast<Real>(cp.t_prime), 0, third, tok);
            encode(static_cast<Real>(cp.p), third, third, tok);
            encode(static_cast<Real>(cp.q), 2 * third, d - 2 * third, tok);
          }
  }

  std::size_t w_embed_ = 0, b_embed_ = 0, w_tau_ = 0, b_tau_ = 0;
  std::size_t w_head_ = 0, b_head_ = 0;
  std::vector<BlockOffsets> blocks_;
  TVMask mask_;
  PairRouting routing_self_, routing_fused_;
  std::vector<Real> positional_;
  Cache cache_;
};

}  // namespace fourd
