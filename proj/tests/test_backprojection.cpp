#include "doctest.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "invmat/backprojection.hpp"
#include "invmat/errors.hpp"
#include "invmat/grid.hpp"
#include "invmat/materials.hpp"
#include "invmat/microstructure.hpp"
#include "invmat/rng.hpp"

using namespace invmat;

namespace {

// Quadratic-time distance transform used as the oracle for squared_edt.
std::vector<double> brute_edt2(const std::vector<uint8_t>& fg, int nx, int ny, int nz) {
  std::vector<double> d(fg.size(), 1e20);
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const size_t i = (size_t(z) * ny + y) * nx + x;
        if (!fg[i]) {
          d[i] = 0.0;
          continue;
        }
        for (int bz = 0; bz < nz; ++bz)
          for (int by = 0; by < ny; ++by)
            for (int bx = 0; bx < nx; ++bx) {
              if (fg[(size_t(bz) * ny + by) * nx + bx]) continue;
              const double dd = double(x - bx) * (x - bx) + double(y - by) * (y - by) +
                                double(z - bz) * (z - bz);
              if (dd < d[i]) d[i] = dd;
            }
      }
  return d;
}

// Flood-fill component count. Foreground uses the full neighborhood
// (8 in 2D, 26 in 3D), background the face neighborhood (4 / 6).
int component_count(const std::vector<uint8_t>& occ, int nx, int ny, int nz, uint8_t want,
                    bool full_adjacency) {
  std::vector<uint8_t> seen(occ.size(), 0);
  std::vector<size_t> stack;
  int comps = 0;
  for (size_t s = 0; s < occ.size(); ++s) {
    if ((occ[s] != 0) != (want != 0) || seen[s]) continue;
    ++comps;
    seen[s] = 1;
    stack.assign(1, s);
    while (!stack.empty()) {
      const size_t i = stack.back();
      stack.pop_back();
      const int x = int(i % nx), y = int((i / nx) % ny), z = int(i / (size_t(nx) * ny));
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0 && dz == 0) continue;
            if (!full_adjacency && std::abs(dx) + std::abs(dy) + std::abs(dz) != 1) continue;
            const int tx = x + dx, ty = y + dy, tz = z + dz;
            if (tx < 0 || tx >= nx || ty < 0 || ty >= ny || tz < 0 || tz >= nz) continue;
            const size_t t = (size_t(tz) * ny + ty) * nx + tx;
            if ((occ[t] != 0) != (want != 0) || seen[t]) continue;
            seen[t] = 1;
            stack.push_back(t);
          }
    }
  }
  return comps;
}

std::vector<uint8_t> disc_mask(int side, double cx, double cy, double r) {
  std::vector<uint8_t> fg(size_t(side) * side, 0);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (dx * dx + dy * dy < r * r) fg[size_t(y) * side + x] = 1;
    }
  return fg;
}

Grid two_valued_grid(const std::vector<uint8_t>& fg, int nx, int ny, int nz, const Vec3& a,
                     const Vec3& b) {
  Grid g(nz == 1 ? 2 : 3, nx, ny, nz);
  for (size_t e = 0; e < g.elements(); ++e) g.set_element(e, fg[e] ? b : a);
  return g;
}

bool same_vec(const Vec3& u, const Vec3& v) {
  return u[0] == v[0] && u[1] == v[1] && u[2] == v[2];
}

}  // namespace

TEST_CASE("squared distance transform matches brute force") {
  Rng rng(404);

  const int nx = 13, ny = 9;
  std::vector<uint8_t> fg(size_t(nx) * ny);
  for (auto& v : fg) v = rng.uniform() < 0.6 ? 1 : 0;
  fg[0] = 0;  // keep at least one background cell
  auto fast = squared_edt(fg, nx, ny, 1);
  auto slow = brute_edt2(fg, nx, ny, 1);
  for (size_t i = 0; i < fg.size(); ++i) CHECK(fast[i] == slow[i]);

  const int mx = 7, my = 6, mz = 5;
  std::vector<uint8_t> vol(size_t(mx) * my * mz);
  for (auto& v : vol) v = rng.uniform() < 0.55 ? 1 : 0;
  vol[10] = 0;
  auto fast3 = squared_edt(vol, mx, my, mz);
  auto slow3 = brute_edt2(vol, mx, my, mz);
  for (size_t i = 0; i < vol.size(); ++i) CHECK(fast3[i] == slow3[i]);

  std::vector<uint8_t> empty(size_t(nx) * ny, 0);
  for (double v : squared_edt(empty, nx, ny, 1)) CHECK(v == 0.0);

  std::vector<uint8_t> solid(size_t(nx) * ny, 1);
  for (double v : squared_edt(solid, nx, ny, 1)) CHECK(v >= 1e19);

  CHECK_THROWS_AS(squared_edt(fg, nx, ny, 2), ValidationError);
}

TEST_CASE("2d simple point test matches exhaustive component counting") {
  // All 256 neighbor patterns around a foreground center, embedded in a 5x5
  // grid with a background border. Deleting the center is topology-preserving
  // exactly when the 8-adjacent foreground and 4-adjacent background
  // component counts are both unchanged.
  const int off[8][2] = {{-1, -1}, {0, -1}, {1, -1}, {-1, 0},
                         {1, 0},   {-1, 1}, {0, 1},  {1, 1}};
  for (int bits = 0; bits < 256; ++bits) {
    std::vector<uint8_t> fg(25, 0);
    fg[2 * 5 + 2] = 1;
    for (int k = 0; k < 8; ++k)
      if (bits & (1 << k)) fg[size_t(2 + off[k][1]) * 5 + (2 + off[k][0])] = 1;

    const int fg_before = component_count(fg, 5, 5, 1, 1, true);
    const int bg_before = component_count(fg, 5, 5, 1, 0, false);
    std::vector<uint8_t> del = fg;
    del[2 * 5 + 2] = 0;
    const int fg_after = component_count(del, 5, 5, 1, 1, true);
    const int bg_after = component_count(del, 5, 5, 1, 0, false);
    const bool oracle = fg_before == fg_after && bg_before == bg_after;

    CAPTURE(bits);
    CHECK(simple_point_2d(fg, 5, 5, 2, 2) == oracle);
  }
}

TEST_CASE("3d simple point test matches known neighborhoods") {
  const int n = 5;
  auto at = [&](std::vector<uint8_t>& m, int x, int y, int z) -> uint8_t& {
    return m[(size_t(z) * n + y) * n + x];
  };

  // Interior voxel of a solid cube: deletion would open a cavity.
  std::vector<uint8_t> cube(size_t(n) * n * n, 0);
  for (int z = 1; z <= 3; ++z)
    for (int y = 1; y <= 3; ++y)
      for (int x = 1; x <= 3; ++x) at(cube, x, y, z) = 1;
  CHECK_FALSE(simple_point_3d(cube, n, n, n, 2, 2, 2));
  CHECK(simple_point_3d(cube, n, n, n, 1, 1, 1));  // corner peels off

  // Isolated voxel: deletion removes a component.
  std::vector<uint8_t> lone(size_t(n) * n * n, 0);
  at(lone, 2, 2, 2) = 1;
  CHECK_FALSE(simple_point_3d(lone, n, n, n, 2, 2, 2));

  // Bridge voxel between two otherwise disconnected voxels.
  std::vector<uint8_t> bridge(size_t(n) * n * n, 0);
  at(bridge, 1, 2, 2) = at(bridge, 2, 2, 2) = at(bridge, 3, 2, 2) = 1;
  CHECK_FALSE(simple_point_3d(bridge, n, n, n, 2, 2, 2));

  // Center of a one-voxel-thick plate: deletion punches a tunnel.
  std::vector<uint8_t> plate(size_t(n) * n * n, 0);
  for (int y = 1; y <= 3; ++y)
    for (int x = 1; x <= 3; ++x) at(plate, x, y, 2) = 1;
  CHECK_FALSE(simple_point_3d(plate, n, n, n, 2, 2, 2));

  // Bump sitting on a plate: removable.
  std::vector<uint8_t> bump(size_t(n) * n * n, 0);
  for (int y = 1; y <= 3; ++y)
    for (int x = 1; x <= 3; ++x) at(bump, x, y, 1) = 1;
  at(bump, 2, 2, 2) = 1;
  CHECK(simple_point_3d(bump, n, n, n, 2, 2, 2));

  // Edge of a square ring: deletion breaks the loop.
  std::vector<uint8_t> ring(size_t(n) * n * n, 0);
  for (int y = 1; y <= 3; ++y)
    for (int x = 1; x <= 3; ++x)
      if (x != 2 || y != 2) at(ring, x, y, 2) = 1;
  CHECK_FALSE(simple_point_3d(ring, n, n, n, 2, 1, 2));

  // Fuzz: whenever the test reports simple, deleting the voxel must leave
  // both component counts unchanged.
  Rng rng(71);
  int simple_seen = 0;
  for (int trial = 0; trial < 400; ++trial) {
    std::vector<uint8_t> m(size_t(n) * n * n);
    for (auto& v : m) v = rng.uniform() < 0.45 ? 1 : 0;
    at(m, 2, 2, 2) = 1;
    if (!simple_point_3d(m, n, n, n, 2, 2, 2)) continue;
    ++simple_seen;
    const int fgc = component_count(m, n, n, n, 1, true);
    const int bgc = component_count(m, n, n, n, 0, false);
    std::vector<uint8_t> del = m;
    at(del, 2, 2, 2) = 0;
    CHECK(component_count(del, n, n, n, 1, true) == fgc);
    CHECK(component_count(del, n, n, n, 0, false) == bgc);
  }
  CHECK(simple_seen > 50);
}

TEST_CASE("thinning preserves component structure") {
  auto check_2d = [](const std::vector<uint8_t>& fg, int side) {
    auto d2 = squared_edt(fg, side, side, 1);
    auto thin = homotopic_thin(fg, d2, side, side, 1);
    size_t kept = 0;
    for (size_t i = 0; i < fg.size(); ++i) {
      if (thin[i]) {
        ++kept;
        CHECK(fg[i] == 1);  // skeleton stays inside the foreground
      }
    }
    CHECK(kept > 0);
    CHECK(kept < fg.size());
    CHECK(component_count(thin, side, side, 1, 1, true) ==
          component_count(fg, side, side, 1, 1, true));
    CHECK(component_count(thin, side, side, 1, 0, false) ==
          component_count(fg, side, side, 1, 0, false));
    return thin;
  };

  check_2d(disc_mask(32, 16.0, 16.0, 9.0), 32);

  // Two discs: both survive as separate skeleton components.
  std::vector<uint8_t> pair = disc_mask(48, 14.0, 14.0, 7.0);
  auto second = disc_mask(48, 34.0, 33.0, 6.0);
  for (size_t i = 0; i < pair.size(); ++i) pair[i] |= second[i];
  CHECK(component_count(pair, 48, 48, 1, 1, true) == 2);
  check_2d(pair, 48);

  // Annulus: the central hole must survive thinning (two background
  // components before and after).
  std::vector<uint8_t> ring(size_t(32) * 32, 0);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const double dx = x + 0.5 - 16.0, dy = y + 0.5 - 16.0;
      const double d = std::sqrt(dx * dx + dy * dy);
      if (d >= 4.0 && d <= 9.0) ring[size_t(y) * 32 + x] = 1;
    }
  CHECK(component_count(ring, 32, 32, 1, 0, false) == 2);
  check_2d(ring, 32);

  // 3D ball.
  const int s = 12;
  std::vector<uint8_t> ball(size_t(s) * s * s, 0);
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const double dx = x + 0.5 - 6.0, dy = y + 0.5 - 6.0, dz = z + 0.5 - 6.0;
        if (dx * dx + dy * dy + dz * dz < 16.0) ball[(size_t(z) * s + y) * s + x] = 1;
      }
  auto d2 = squared_edt(ball, s, s, s);
  auto thin = homotopic_thin(ball, d2, s, s, s);
  size_t kept = 0;
  for (size_t i = 0; i < ball.size(); ++i) {
    if (thin[i]) {
      ++kept;
      CHECK(ball[i] == 1);
    }
  }
  CHECK(kept > 0);
  CHECK(component_count(thin, s, s, s, 1, true) == 1);
  CHECK(component_count(thin, s, s, s, 0, false) ==
        component_count(ball, s, s, s, 0, false));

  CHECK_THROWS_AS(homotopic_thin(ball, std::vector<double>(3, 0.0), s, s, s),
                  ValidationError);
}

TEST_CASE("material fit is exact on a two-valued grid") {
  const Vec3 a{0.123456789, -0.3141592653589793, 0.577215664901532};
  const Vec3 b{-0.71828182845, 0.41421356237, -0.2360679774997896};
  std::vector<uint8_t> fg(size_t(9) * 9, 0);
  for (size_t i = 0; i < fg.size(); ++i) fg[i] = (i % 7 == 0 || i > 60) ? 1 : 0;
  Grid g = two_valued_grid(fg, 9, 9, 1, a, b);

  MaterialFit fit = fit_material_gmm(g);
  CHECK_FALSE(fit.single);
  CHECK(fit.V_m == 0.0);
  CHECK(fit.var0 == 0.0);
  CHECK(fit.var1 == 0.0);
  const bool order_ab = same_vec(fit.mean0, a);
  if (order_ab) {
    CHECK(same_vec(fit.mean1, b));
  } else {
    CHECK(same_vec(fit.mean0, b));
    CHECK(same_vec(fit.mean1, a));
  }

  // Assignment labels point at the nearer mean.
  for (size_t e = 0; e < g.elements(); ++e) {
    const bool is_b = fg[e] != 0;
    const int expect = (is_b == same_vec(fit.mean1, b)) ? 1 : 0;
    CHECK(fit.assign[e] == expect);
  }
}

TEST_CASE("constant grid collapses to a single material") {
  Catalog cat = generate_synthetic_catalog(17, 40);
  const MaterialRecord& m = cat.by_index(12);
  const Vec3 v = normalize_material({m.E, m.nu, m.rho});
  Grid g(2, 12, 12, 1);
  for (size_t e = 0; e < g.elements(); ++e) g.set_element(e, v);

  MaterialFit fit = fit_material_gmm(g);
  CHECK(fit.single);
  CHECK(fit.V_m == 0.0);

  BackprojectionResult res = backproject(g, cat);
  CHECK(res.single_material);
  CHECK(res.theta.matrix.id == m.id);
  CHECK(res.theta.particle.id == m.id);
  CHECK(res.theta.f_p == 0.0);
  CHECK(res.theta.r_p == 0.0);
  CHECK(res.d_m == 0.0);
  CHECK(res.particles == 0);
}

TEST_CASE("noisy two-cluster grids recover the generating means") {
  const Vec3 mu_a{0.3, -0.2, 0.5};
  const Vec3 mu_b{-0.4, 0.1, -0.6};
  const double sigma = 0.01;

  Rng rng(2024);
  Grid g(2, 64, 64, 1);
  for (size_t e = 0; e < g.elements(); ++e) {
    const Vec3& mu = e < g.elements() / 2 ? mu_a : mu_b;
    Vec3 v;
    for (int c = 0; c < 3; ++c) v[c] = mu[c] + sigma * rng.normal();
    g.set_element(e, v);
  }

  MaterialFit fit = fit_material_gmm(g);
  CHECK_FALSE(fit.single);
  auto err = [](const Vec3& u, const Vec3& v) {
    return std::sqrt((u[0] - v[0]) * (u[0] - v[0]) + (u[1] - v[1]) * (u[1] - v[1]) +
                     (u[2] - v[2]) * (u[2] - v[2]));
  };
  const double e0 = std::min(err(fit.mean0, mu_a), err(fit.mean0, mu_b));
  const double e1 = std::min(err(fit.mean1, mu_a), err(fit.mean1, mu_b));
  CHECK(e0 < 1e-3);
  CHECK(e1 < 1e-3);

  // Each spherical variance estimates sigma^2, so V_m sits near 2 sigma^2.
  CHECK(fit.V_m == doctest::Approx(2.0 * sigma * sigma).epsilon(0.2));
}

TEST_CASE("a radius-eight disc yields one center at the distance maximum") {
  const int side = 64;
  DesignParams theta;
  theta.matrix = {1, 50.0, 0.3, 2.0};
  theta.particle = {2, 200.0, 0.2, 7.0};
  theta.r_p = 0.125;  // 8 elements
  theta.f_p = 0.05;
  ParticleLayout layout;
  layout.radius = theta.r_p;
  layout.centers = {{0.5, 0.5, 0.0}};
  Grid g = rasterize(theta, layout, 2, side, side);

  const Vec3 vp = normalize_material({theta.particle.E, theta.particle.nu, theta.particle.rho});
  std::vector<uint8_t> fg(g.elements(), 0);
  size_t n_fg = 0;
  for (size_t e = 0; e < g.elements(); ++e) {
    fg[e] = same_vec(g.element(e), vp) ? 1 : 0;
    n_fg += fg[e];
  }

  ParticleDetection det = detect_particles(fg, side, side, 1, 2);
  CHECK_FALSE(det.rejected);
  REQUIRE(det.centers.size() == 1);
  CHECK(det.radii[0] > 7.5);
  CHECK(det.radii[0] < 8.5);
  CHECK(det.r_p_hat == det.radii[0] / side);
  CHECK(det.f_p_hat == double(n_fg) / (double(side) * side));
  CHECK(det.foreground == n_fg);

  // The detected radius is the distance-transform maximum of the mask.
  auto d2 = brute_edt2(fg, side, side, 1);
  double dmax = 0.0;
  for (size_t i = 0; i < fg.size(); ++i) dmax = std::max(dmax, d2[i]);
  CHECK(det.radii[0] == std::sqrt(dmax));
  const auto& c = det.centers[0];
  CHECK(d2[size_t(c[1]) * side + c[0]] == dmax);
}

TEST_CASE("degenerate foregrounds are rejected with reasons") {
  const int side = 16;
  std::vector<uint8_t> solid(size_t(side) * side, 1);
  ParticleDetection all = detect_particles(solid, side, side, 1, 2);
  CHECK(all.rejected);
  CHECK(all.reason.find("boundary") != std::string::npos);

  std::vector<uint8_t> dot(size_t(side) * side, 0);
  dot[size_t(8) * side + 8] = 1;
  ParticleDetection tiny = detect_particles(dot, side, side, 1, 2);
  CHECK(tiny.rejected);
  CHECK(tiny.reason.find("no ball cores") != std::string::npos);

  std::vector<uint8_t> blank(size_t(side) * side, 0);
  ParticleDetection none = detect_particles(blank, side, side, 1, 2);
  CHECK_FALSE(none.rejected);
  CHECK(none.centers.empty());
  CHECK(none.f_p_hat == 0.0);

  // A ball spanning most of the domain is really the matrix.
  std::vector<uint8_t> wide = disc_mask(32, 16.0, 16.0, 15.4);
  ParticleDetection big = detect_particles(wide, 32, 32, 1, 2);
  CHECK(big.rejected);
  CHECK(big.reason.find("spans") != std::string::npos);
}

TEST_CASE("pruning keeps the farthest skeleton point") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    const int side = 48;
    std::vector<uint8_t> fg(size_t(side) * side, 0);
    for (int k = 0; k < 3; ++k) {
      const double r = rng.uniform(4.0, 8.0);
      const double cx = rng.uniform(12.0, 36.0);
      const double cy = rng.uniform(12.0, 36.0);
      auto d = disc_mask(side, cx, cy, r);
      for (size_t i = 0; i < fg.size(); ++i) fg[i] |= d[i];
    }

    const auto d2 = squared_edt(fg, side, side, 1);
    const auto thin = homotopic_thin(fg, d2, side, side, 1);
    double best = -1.0;
    size_t best_idx = 0;
    for (size_t i = 0; i < thin.size(); ++i)
      if (thin[i] && d2[i] > best) {
        best = d2[i];
        best_idx = i;
      }
    REQUIRE(best >= 4.0);  // largest core is a real ball

    ParticleDetection det = detect_particles(fg, side, side, 1, 2);
    CAPTURE(seed);
    REQUIRE_FALSE(det.rejected);
    const double dmax = std::sqrt(best);
    bool found = false;
    for (size_t k = 0; k < det.centers.size(); ++k) {
      if (det.centers[k][0] == int(best_idx % side) &&
          det.centers[k][1] == int(best_idx / side) && det.radii[k] == dmax)
        found = true;
      CHECK(det.radii[k] >= 2.0);
      CHECK(det.radii[k] <= dmax);
    }
    CHECK(found);
  }
}

TEST_CASE("complementary hypotheses split the volume exactly") {
  const int side = 24;
  std::vector<uint8_t> fg = disc_mask(side, 12.0, 11.0, 5.0);
  std::vector<uint8_t> inv(fg.size());
  for (size_t i = 0; i < fg.size(); ++i) inv[i] = fg[i] ? 0 : 1;

  ParticleDetection det_p = detect_particles(fg, side, side, 1, 2);
  ParticleDetection det_m = detect_particles(inv, side, side, 1, 2);
  CHECK(det_p.foreground + det_m.foreground == size_t(side) * side);
  CHECK(det_p.f_p_hat + det_m.f_p_hat == 1.0);
  CHECK_FALSE(det_p.rejected);
  CHECK(det_m.rejected);  // the matrix hypothesis owns the boundary
}

TEST_CASE("roundtrip recovers catalog materials and particle counts") {
  Catalog cat = generate_synthetic_catalog(7, 120);
  const int side = 64, n = 50;
  int material_hits = 0, count_hits = 0, dm_hits = 0;
  double radius_abs_err = 0.0;
  int radius_n = 0;

  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::stream(100, uint64_t(i));
    DatasetSample s;
    for (int attempt = 0;; ++attempt) {
      REQUIRE(attempt < 100);
      s.theta = sample_design_params(cat, 2, rng);
      s.particles = particle_count(s.theta.f_p, s.theta.r_p, 2).rounded;
      try {
        s.layout = pack_particles(s.particles, s.theta.r_p, 2, rng);
        break;
      } catch (const NumericalError&) {
        continue;
      }
    }
    Grid g = rasterize(s.theta, s.layout, 2, side, side);
    BackprojectionResult res = backproject(g, cat);

    const bool mat_ok =
        res.theta.matrix.id == s.theta.matrix.id &&
        (s.particles == 0 || res.theta.particle.id == s.theta.particle.id);
    material_hits += mat_ok;
    count_hits += res.particles == s.particles;
    dm_hits += res.d_m <= 1e-5;
    if (s.particles > 0 && !res.single_material && !res.no_particles) {
      radius_abs_err += std::abs(res.theta.r_p - s.theta.r_p);
      ++radius_n;
    }
  }

  // Clean grids: at most one miss tolerated across the sweep.
  CHECK(material_hits >= n - 1);
  CHECK(count_hits >= n - 1);
  CHECK(dm_hits >= n - 1);
  REQUIRE(radius_n > 0);
  CHECK(radius_abs_err / radius_n <= 1e-2);
}

TEST_CASE("roundtrip recovers a single ball in three dimensions") {
  Catalog cat = generate_synthetic_catalog(7, 120);
  DesignParams theta;
  theta.matrix = cat.by_index(3);
  theta.particle = cat.by_index(90);
  theta.r_p = 0.15;
  theta.f_p = (4.0 / 3.0) * 3.14159265358979323846 * 0.15 * 0.15 * 0.15;
  ParticleLayout layout;
  layout.radius = theta.r_p;
  layout.centers = {{0.5, 0.5, 0.5}};
  const int side = 24;
  Grid g = rasterize(theta, layout, 3, side, side, side);

  BackprojectionResult res = backproject(g, cat);
  CHECK_FALSE(res.single_material);
  CHECK_FALSE(res.no_particles);
  CHECK(res.theta.matrix.id == theta.matrix.id);
  CHECK(res.theta.particle.id == theta.particle.id);
  CHECK(res.particles == 1);
  CHECK(res.d_m == 0.0);
  CHECK(res.V_m == 0.0);

  // One ball: the reported radius is the mask's distance-transform maximum.
  const Vec3 vp = normalize_material({theta.particle.E, theta.particle.nu, theta.particle.rho});
  std::vector<uint8_t> fg(g.elements(), 0);
  for (size_t e = 0; e < g.elements(); ++e) fg[e] = same_vec(g.element(e), vp) ? 1 : 0;
  auto d2 = brute_edt2(fg, side, side, side);
  double dmax = 0.0;
  for (size_t i = 0; i < fg.size(); ++i) dmax = std::max(dmax, d2[i]);
  CHECK(res.theta.r_p == std::sqrt(dmax) / side);
  CHECK(std::abs(res.theta.r_p - theta.r_p) < 0.06);
}

TEST_CASE("grids without detectable particles fall back cleanly") {
  Catalog cat = generate_synthetic_catalog(7, 120);
  const MaterialRecord& ma = cat.by_index(5);
  const MaterialRecord& mb = cat.by_index(60);
  const Vec3 va = normalize_material({ma.E, ma.nu, ma.rho});
  const Vec3 vb = normalize_material({mb.E, mb.nu, mb.rho});

  // Checkerboard: both hypotheses thin away entirely (every distance is 1).
  Grid g(2, 16, 16, 1);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      g.set_element(g.element_index(x, y, 0), (x + y) % 2 ? va : vb);

  BackprojectionResult res = backproject(g, cat);
  CHECK(res.no_particles);
  CHECK_FALSE(res.single_material);
  CHECK(res.theta.f_p == 0.0);
  CHECK(res.theta.matrix.id == res.theta.particle.id);
  CHECK(res.particles == 0);
  CHECK(res.V_m == 0.0);
  CHECK(res.d_m == 0.0);
}

TEST_CASE("backprojection is deterministic in the seed") {
  Catalog cat = generate_synthetic_catalog(7, 120);
  Rng rng = Rng::stream(808, 4);
  DatasetSample s;
  for (;;) {
    s.theta = sample_design_params(cat, 2, rng);
    s.particles = particle_count(s.theta.f_p, s.theta.r_p, 2).rounded;
    if (s.particles < 1) continue;
    try {
      s.layout = pack_particles(s.particles, s.theta.r_p, 2, rng);
      break;
    } catch (const NumericalError&) {
      continue;
    }
  }
  Grid g = rasterize(s.theta, s.layout, 2, 32, 32);

  BackprojectionResult r1 = backproject(g, cat, 9001);
  BackprojectionResult r2 = backproject(g, cat, 9001);
  CHECK(r1.theta.matrix.id == r2.theta.matrix.id);
  CHECK(r1.theta.particle.id == r2.theta.particle.id);
  CHECK(r1.theta.r_p == r2.theta.r_p);
  CHECK(r1.theta.f_p == r2.theta.f_p);
  CHECK(r1.V_m == r2.V_m);
  CHECK(r1.d_m == r2.d_m);
  CHECK(r1.particles == r2.particles);

  // A clean grid is insensitive to the restart seed.
  BackprojectionResult r3 = backproject(g, cat, 123);
  CHECK(r3.theta.matrix.id == r1.theta.matrix.id);
  CHECK(r3.theta.particle.id == r1.theta.particle.id);
}

TEST_CASE("particle detection validates its inputs") {
  std::vector<uint8_t> fg(size_t(8) * 8, 0);
  CHECK_THROWS_AS(detect_particles(fg, 8, 8, 1, 4), ValidationError);
  CHECK_THROWS_AS(detect_particles(fg, 8, 8, 2, 3), ValidationError);
  std::vector<uint8_t> rect(size_t(8) * 4, 0);
  CHECK_THROWS_AS(detect_particles(rect, 8, 4, 1, 2), ValidationError);
}
