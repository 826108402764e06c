#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fourd/attention.hpp"

using namespace fourd;

TEST_CASE("flatten basics and inverse bijection") {
  GridIndex g{2, 4, 3};
  CHECK(g.flatten(0, 0, 0) == 0);
  CHECK(g.flatten(1, 0, 0) == 12);  // 1*4*3
  CHECK(g.flatten(1, 3, 2) == g.total() - 1);
  CHECK_THROWS_AS(g.flatten(2, 0, 0), InputError);
  CHECK_THROWS_AS(g.flatten(0, 4, 0), InputError);

  for (std::size_t i = 0; i < g.total(); ++i) {
    auto [v, t, p] = g.unflatten(i);
    CHECK(g.flatten(v, t, p) == i);
  }
}

TEST_CASE("flatten/unflatten inverse over larger grids") {
  for (const GridIndex g : {GridIndex{4, 8, 16}, GridIndex{8, 6, 25}, GridIndex{1, 2, 1}}) {
    REQUIRE(g.total() <= 10000);
    for (std::size_t i = 0; i < g.total(); ++i) {
      auto [v, t, p] = g.unflatten(i);
      CHECK(g.flatten(v, t, p) == i);
    }
  }
}

TEST_CASE("collapse_position formula and bounds") {
  CHECK(collapse_position(0, 3, 5, 6, 10).t_prime == 3);
  const CollapsedPosition c = collapse_position(2, 1, 5, 6, 10);
  CHECK(c.t_prime == 21);
  CHECK(c.p == 5);
  CHECK(c.q == 6);
  CHECK_THROWS_AS(collapse_position(0, 10, 0, 0, 10), InputError);
}

TEST_CASE("collapse_position is injective over a 3x4 grid") {
  std::vector<int> seen;
  for (int v = 0; v < 3; ++v)
    for (int t = 0; t < 4; ++t) {
      const int tp = collapse_position(v, t, 0, 0, 4).t_prime;
      for (int s : seen) CHECK(s != tp);
      seen.push_back(tp);
    }
}

TEST_CASE("build_mask realizes the three propagation clauses") {
  const TVMask m = build_mask(4, 2);  // n_time = 4
  // Same view, different time.
  CHECK(m.allowed_pair(1, 0, 1, 3));
  // Same time, different views.
  CHECK(m.allowed_pair(2, 1, 3, 1));
  // Cross-half: target-half query to reference-view condition key.
  CHECK(m.allowed_pair(2, 0, 0, 2));
  // Cross-half is directional and reference-view only.
  CHECK(!m.allowed_pair(0, 2, 2, 0));
  CHECK(!m.allowed_pair(2, 0, 1, 2));
  // No clause fires.
  CHECK(!m.allowed_pair(2, 0, 3, 1));
  // Diagonal always allowed.
  for (int v = 0; v < 4; ++v)
    for (int t = 0; t < 4; ++t) CHECK(m.allowed_pair(v, t, v, t));
}

TEST_CASE("build_mask input validation") {
  CHECK_THROWS_AS(build_mask(0, 1), InputError);
  CHECK_THROWS_AS(build_mask(1, 0), InputError);
}

TEST_CASE("mask_density matches the closed form") {
  CHECK(mask_density(6, 2) == Catch::Approx(0.375).margin(1e-15));  // 9/24
  for (int f = 1; f <= 4; ++f) CHECK(mask_density(1, f) == Catch::Approx(1.0));
}

TEST_CASE("symmetric pair count equals rows * (2f + Nv - 1) for all small grids") {
  for (int nv = 1; nv <= 8; ++nv)
    for (int f = 1; f <= 4; ++f) {
      const TVMask m = build_mask(nv, f);
      const std::size_t rows = static_cast<std::size_t>(nv) * 2 * f;
      CHECK(symmetric_pair_count(m) == rows * (2 * f + nv - 1));
    }
}

TEST_CASE("brute-force density for Nv=3 f=2 matches the formula exactly") {
  const TVMask m = build_mask(3, 2);
  const std::size_t rows = 3 * 4;
  const real measured =
      static_cast<real>(symmetric_pair_count(m)) / static_cast<real>(rows * rows);
  CHECK(measured == Catch::Approx(mask_density(3, 2)).margin(1e-15));
}

TEST_CASE("cross-half edges exist once per non-reference target slot") {
  const TVMask m = build_mask(3, 2);
  // Target slots t<f of views 1,2 each gain one cross-half edge; view 0's own
  // target slots also connect to its condition half via the same clause.
  CHECK(cross_half_edge_count(m) == 2 * 2);  // views 1,2 with t in {0,1}
}

namespace {

GridIndex grid_for(const TVMask& m, int s) { return GridIndex{m.n_views, 2 * m.f, s}; }

std::vector<real> random_matrix(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<real> x(n * d);
  for (auto& e : x) e = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("masked attention with a fully-true mask equals standard attention") {
  const int nv = 1, f = 2, s = 3, d = 4;
  TVMask m = build_mask(nv, f);
  for (auto&& b : m.pair_mask) b = true;
  const GridIndex g = grid_for(m, s);
  const std::size_t n = g.total();
  Rng rng(7);
  const auto q = random_matrix(rng, n, d), k = random_matrix(rng, n, d),
             v = random_matrix(rng, n, d);
  const auto sparse = masked_attention(q, k, v, n, d, m, g);
  // Standard softmax attention, no mask at all.
  const real scale = 1.0 / std::sqrt(static_cast<real>(d));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<real> sc(n);
    real mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      real acc = 0;
      for (int c = 0; c < d; ++c) acc += q[i * d + c] * k[j * d + c];
      sc[j] = acc * scale;
      mx = std::max(mx, sc[j]);
    }
    real den = 0;
    for (auto e : sc) den += std::exp(e - mx);
    for (int c = 0; c < d; ++c) {
      real out = 0;
      for (std::size_t j = 0; j < n; ++j)
        out += std::exp(sc[j] - mx) / den * v[j * d + c];
      CHECK(std::abs(out - sparse[i * d + c]) < 1e-12);
    }
  }
}

TEST_CASE("identity-only mask returns V rows") {
  const int nv = 2, f = 1, s = 1, d = 5;
  TVMask m = build_mask(nv, f);
  // Hypothetical diagonal-only mask.
  const int np = m.n_pairs();
  for (int i = 0; i < np; ++i)
    for (int j = 0; j < np; ++j)
      m.pair_mask[static_cast<std::size_t>(i) * np + j] = (i == j);
  const GridIndex g = grid_for(m, s);
  const std::size_t n = g.total();
  Rng rng(9);
  const auto q = random_matrix(rng, n, d), k = random_matrix(rng, n, d),
             v = random_matrix(rng, n, d);
  const auto out = masked_attention(q, k, v, n, d, m, g);
  for (std::size_t i = 0; i < n * d; ++i) CHECK(std::abs(out[i] - v[i]) < 1e-12);
}

TEST_CASE("masked attention agrees with the dense oracle") {
  struct Case { int nv, f, s; };
  for (const Case c : {Case{2, 2, 4}, Case{3, 2, 9}, Case{4, 3, 4}}) {
    const TVMask m = build_mask(c.nv, c.f);
    const GridIndex g = grid_for(m, c.s);
    const std::size_t n = g.total();
    const int d = 8;
    Rng rng(100 + c.nv);
    for (int trial = 0; trial < 10; ++trial) {
      const auto q = random_matrix(rng, n, d), k = random_matrix(rng, n, d),
                 v = random_matrix(rng, n, d);
      const auto a = masked_attention(q, k, v, n, d, m, g);
      const auto b = dense_oracle_attention(q, k, v, n, d, m, g);
      real max_diff = 0;
      for (std::size_t i = 0; i < a.size(); ++i)
        max_diff = std::max(max_diff, std::abs(a[i] - b[i]));
      CHECK(max_diff < 1e-6);
    }
  }
}

TEST_CASE("softmax rows sum to one and disallowed keys get no weight") {
  const TVMask m = build_mask(3, 2);
  const GridIndex g = grid_for(m, 2);
  const std::size_t n = g.total();
  const int d = 6;
  Rng rng(42);
  const auto q = random_matrix(rng, n, d), k = random_matrix(rng, n, d),
             v = random_matrix(rng, n, d);
  const auto res = masked_attention_full(q, k, v, n, d, m, g);
  for (std::size_t i = 0; i < n; ++i) {
    real sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      sum += res.weights[i * n + j];
      if (!m.allowed_token(i, j, g)) CHECK(res.weights[i * n + j] == 0.0);
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("mask decision is invariant to spatial coordinates") {
  const TVMask m = build_mask(3, 2);
  const GridIndex g = grid_for(m, 5);
  for (std::size_t i = 0; i < g.total(); ++i)
    for (std::size_t j = 0; j < g.total(); ++j) {
      auto [vi, ti, pi] = g.unflatten(i);
      auto [vj, tj, pj] = g.unflatten(j);
      (void)pi;
      (void)pj;
      CHECK(m.allowed_token(i, j, g) == m.allowed_pair(vi, ti, vj, tj));
    }
}

TEST_CASE("single-token oracle returns V unchanged") {
  const TVMask m = build_mask(1, 1);
  GridIndex g{1, 2, 1};
  const std::size_t n = 2;
  const int d = 3;
  Rng rng(1);
  const auto q = random_matrix(rng, n, d), k = random_matrix(rng, n, d);
  std::vector<real> v = random_matrix(rng, n, d);
  // With Nv=1 all pairs share the view, so every row softmaxes over both
  // tokens; restrict to a 1-token grid for the single-token case.
  GridIndex g1{1, 1, 1};
  TVMask m1 = build_mask(1, 1);
  m1.f = 1;
  // 1x1 pair mask over a single (v,t) pair:
  m1.pair_mask = {true};
  const auto out = dense_oracle_attention(std::vector<real>(q.begin(), q.begin() + d),
                                          std::vector<real>(k.begin(), k.begin() + d),
                                          std::vector<real>(v.begin(), v.begin() + d),
                                          1, d, m1, g1);
  for (int c = 0; c < d; ++c) CHECK(std::abs(out[c] - v[c]) < 1e-12);
  (void)g;
  (void)m;
}
