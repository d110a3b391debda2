#include "invmat/backprojection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "invmat/errors.hpp"
#include "invmat/rng.hpp"

namespace invmat {

namespace {

constexpr double kInf = 1e20;

double dist2(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

// Lower envelope of parabolas; d(q) = min_p (q - p)^2 + f(p).
void dt1d(const double* f, double* d, int n, int* v, double* z) {
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    double s;
    for (;;) {
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) /
          (2.0 * q - 2.0 * v[k]);
      if (k > 0 && s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = (double(q) - v[k]) * (double(q) - v[k]) + f[v[k]];
  }
}

struct GmmState {
  double pi[2] = {0.5, 0.5};
  Vec3 mu[2]{};
  double var[2] = {0.0, 0.0};
};

double log_density(const Vec3& y, const Vec3& mu, double var) {
  const double v = std::max(var, 1e-30);
  constexpr double log_two_pi = 1.83787706640934548356;
  return -1.5 * (log_two_pi + std::log(v)) - dist2(y, mu) / (2.0 * v);
}

}  // namespace

std::vector<double> squared_edt(const std::vector<uint8_t>& fg, int nx, int ny, int nz) {
  if (fg.size() != size_t(nx) * ny * nz) throw ValidationError("mask size mismatch");
  std::vector<double> d(fg.size());
  for (size_t i = 0; i < fg.size(); ++i) d[i] = fg[i] ? kInf : 0.0;

  const int nmax = std::max({nx, ny, nz});
  std::vector<double> f(nmax), out(nmax), z(nmax + 1);
  std::vector<int> v(nmax);
  auto idx = [&](int x, int y, int zc) { return (size_t(zc) * ny + y) * nx + x; };

  for (int zc = 0; zc < nz; ++zc)
    for (int y = 0; y < ny; ++y) {
      for (int x = 0; x < nx; ++x) f[x] = d[idx(x, y, zc)];
      dt1d(f.data(), out.data(), nx, v.data(), z.data());
      for (int x = 0; x < nx; ++x) d[idx(x, y, zc)] = out[x];
    }
  for (int zc = 0; zc < nz; ++zc)
    for (int x = 0; x < nx; ++x) {
      for (int y = 0; y < ny; ++y) f[y] = d[idx(x, y, zc)];
      dt1d(f.data(), out.data(), ny, v.data(), z.data());
      for (int y = 0; y < ny; ++y) d[idx(x, y, zc)] = out[y];
    }
  if (nz > 1)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        for (int zc = 0; zc < nz; ++zc) f[zc] = d[idx(x, y, zc)];
        dt1d(f.data(), out.data(), nz, v.data(), z.data());
        for (int zc = 0; zc < nz; ++zc) d[idx(x, y, zc)] = out[zc];
      }
  return d;
}

bool simple_point_2d(const std::vector<uint8_t>& fg, int nx, int ny, int x, int y) {
  // Neighborhood occupancy; out-of-grid counts as background.
  bool occ[3][3];
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const int xx = x + dx, yy = y + dy;
      occ[dy + 1][dx + 1] =
          xx >= 0 && xx < nx && yy >= 0 && yy < ny && fg[size_t(yy) * nx + xx] != 0;
    }

  // Components of the 8 neighbors: foreground under 8-adjacency must form
  // exactly one component, background under 4-adjacency must form exactly
  // one component touching a face neighbor.
  int label[3][3];
  for (auto& row : label) row[0] = row[1] = row[2] = -1;

  auto bfs = [&](bool want_fg, bool four_adj) {
    int comps = 0;
    bool face_hit[9] = {false};
    for (int sy = 0; sy < 3; ++sy)
      for (int sx = 0; sx < 3; ++sx) {
        if (sx == 1 && sy == 1) continue;
        if (occ[sy][sx] != want_fg || label[sy][sx] >= 0) continue;
        const int comp = comps++;
        int stack[8][2];
        int top = 0;
        stack[top][0] = sx;
        stack[top][1] = sy;
        ++top;
        label[sy][sx] = comp;
        while (top) {
          --top;
          const int cx = stack[top][0], cy = stack[top][1];
          if ((std::abs(cx - 1) + std::abs(cy - 1)) == 1) face_hit[comp] = true;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              if (dx == 0 && dy == 0) continue;
              if (four_adj && std::abs(dx) + std::abs(dy) != 1) continue;
              const int tx = cx + dx, ty = cy + dy;
              if (tx < 0 || tx > 2 || ty < 0 || ty > 2) continue;
              if (tx == 1 && ty == 1) continue;
              if (occ[ty][tx] != want_fg || label[ty][tx] >= 0) continue;
              label[ty][tx] = comp;
              stack[top][0] = tx;
              stack[top][1] = ty;
              ++top;
            }
        }
      }
    int touching = 0;
    for (int c = 0; c < comps; ++c)
      if (face_hit[c]) ++touching;
    return std::pair<int, int>(comps, touching);
  };

  auto [fg_comps, fg_touch] = bfs(true, false);
  (void)fg_touch;
  for (auto& row : label) row[0] = row[1] = row[2] = -1;
  auto [bg_comps, bg_touch] = bfs(false, true);
  (void)bg_comps;
  return fg_comps == 1 && bg_touch == 1;
}

bool simple_point_3d(const std::vector<uint8_t>& fg, int nx, int ny, int nz, int x, int y,
                     int z) {
  bool occ[3][3][3];
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int xx = x + dx, yy = y + dy, zz = z + dz;
        occ[dz + 1][dy + 1][dx + 1] = xx >= 0 && xx < nx && yy >= 0 && yy < ny && zz >= 0 &&
                                      zz < nz && fg[(size_t(zz) * ny + yy) * nx + xx] != 0;
      }

  int label[3][3][3];
  auto reset = [&] {
    for (auto& pl : label)
      for (auto& row : pl) row[0] = row[1] = row[2] = -1;
  };

  // C*: 26-components of the foreground among the 26 neighbors.
  reset();
  int fg_comps = 0;
  {
    int stack[26][3];
    for (int sz = 0; sz < 3; ++sz)
      for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx) {
          if (sx == 1 && sy == 1 && sz == 1) continue;
          if (!occ[sz][sy][sx] || label[sz][sy][sx] >= 0) continue;
          ++fg_comps;
          int top = 0;
          stack[top][0] = sx;
          stack[top][1] = sy;
          stack[top][2] = sz;
          ++top;
          label[sz][sy][sx] = fg_comps;
          while (top) {
            --top;
            const int cx = stack[top][0], cy = stack[top][1], cz = stack[top][2];
            for (int dz = -1; dz <= 1; ++dz)
              for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                  if (dx == 0 && dy == 0 && dz == 0) continue;
                  const int tx = cx + dx, ty = cy + dy, tz = cz + dz;
                  if (tx < 0 || tx > 2 || ty < 0 || ty > 2 || tz < 0 || tz > 2) continue;
                  if (tx == 1 && ty == 1 && tz == 1) continue;
                  if (!occ[tz][ty][tx] || label[tz][ty][tx] >= 0) continue;
                  label[tz][ty][tx] = fg_comps;
                  stack[top][0] = tx;
                  stack[top][1] = ty;
                  stack[top][2] = tz;
                  ++top;
                }
          }
        }
  }
  if (fg_comps != 1) return false;

  // C-bar: 6-components of the background restricted to the 18-neighborhood,
  // counting only components holding a face neighbor.
  reset();
  int bg_touch = 0;
  {
    int stack[18][3];
    for (int sz = 0; sz < 3; ++sz)
      for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx) {
          const int man = std::abs(sx - 1) + std::abs(sy - 1) + std::abs(sz - 1);
          if (man == 0 || man == 3) continue;  // center and corners excluded
          if (occ[sz][sy][sx] || label[sz][sy][sx] >= 0) continue;
          bool face_hit = false;
          int top = 0;
          stack[top][0] = sx;
          stack[top][1] = sy;
          stack[top][2] = sz;
          ++top;
          label[sz][sy][sx] = 1;
          while (top) {
            --top;
            const int cx = stack[top][0], cy = stack[top][1], cz = stack[top][2];
            if (std::abs(cx - 1) + std::abs(cy - 1) + std::abs(cz - 1) == 1) face_hit = true;
            static const int step[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                           {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
            for (const auto& s : step) {
              const int tx = cx + s[0], ty = cy + s[1], tz = cz + s[2];
              if (tx < 0 || tx > 2 || ty < 0 || ty > 2 || tz < 0 || tz > 2) continue;
              const int man2 = std::abs(tx - 1) + std::abs(ty - 1) + std::abs(tz - 1);
              if (man2 == 0 || man2 == 3) continue;
              if (occ[tz][ty][tx] || label[tz][ty][tx] >= 0) continue;
              label[tz][ty][tx] = 1;
              stack[top][0] = tx;
              stack[top][1] = ty;
              stack[top][2] = tz;
              ++top;
            }
          }
          if (face_hit) ++bg_touch;
        }
  }
  return bg_touch == 1;
}

std::vector<uint8_t> homotopic_thin(const std::vector<uint8_t>& fg,
                                    const std::vector<double>& d2, int nx, int ny, int nz) {
  if (fg.size() != d2.size()) throw ValidationError("mask and distance size mismatch");
  std::vector<size_t> order;
  order.reserve(fg.size());
  for (size_t i = 0; i < fg.size(); ++i)
    if (fg[i]) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (d2[a] != d2[b]) return d2[a] < d2[b];
    return a < b;
  });
  std::vector<uint8_t> mask = fg;
  for (size_t i : order) {
    const int x = int(i % nx);
    const int y = int((i / nx) % ny);
    const int z = int(i / (size_t(nx) * ny));
    const bool simple = nz == 1 ? simple_point_2d(mask, nx, ny, x, y)
                                : simple_point_3d(mask, nx, ny, nz, x, y, z);
    if (simple) mask[i] = 0;
  }
  return mask;
}

ParticleDetection detect_particles(const std::vector<uint8_t>& fg, int nx, int ny, int nz,
                                   int dims) {
  if (dims != 2 && dims != 3) throw ValidationError("dims must be 2 or 3");
  if (ny != nx || (dims == 2 ? nz != 1 : nz != nx))
    throw ValidationError("particle detection expects a square or cubic grid");
  ParticleDetection det;
  const size_t total = size_t(nx) * ny * nz;
  size_t boundary = 0, fg_boundary = 0;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const bool edge = x == 0 || x == nx - 1 || y == 0 || y == ny - 1 ||
                          (dims == 3 && (z == 0 || z == nz - 1));
        const size_t i = (size_t(z) * ny + y) * nx + x;
        if (fg[i]) ++det.foreground;
        if (edge) {
          ++boundary;
          if (fg[i]) ++fg_boundary;
        }
      }
  det.f_p_hat = double(det.foreground) / double(total);
  if (2 * fg_boundary > boundary) {
    det.rejected = true;
    det.reason = "foreground covers the domain boundary";
    return det;
  }
  if (det.foreground == 0) return det;

  const std::vector<double> d2 = squared_edt(fg, nx, ny, nz);
  const std::vector<uint8_t> thin = homotopic_thin(fg, d2, nx, ny, nz);

  struct Cand {
    size_t idx;
    double d;
  };
  std::vector<Cand> cands;
  for (size_t i = 0; i < thin.size(); ++i)
    if (thin[i]) {
      const double d = std::sqrt(d2[i]);
      if (d >= 2.0) cands.push_back({i, d});
    }
  if (cands.empty()) {
    det.rejected = true;
    det.reason = "no ball cores found";
    return det;
  }
  for (const auto& c : cands)
    if (c.d > 0.45 * nx) {
      det.rejected = true;
      det.reason = "foreground ball spans the domain";
      return det;
    }

  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.d != b.d) return a.d > b.d;
    return a.idx < b.idx;
  });
  auto coords = [&](size_t i) {
    return std::array<int, 3>{int(i % nx), int((i / nx) % ny), int(i / (size_t(nx) * ny))};
  };
  // A point inside an earlier (larger or equal, earlier-indexed) ball is the
  // same ball seen again. Digitization splits one continuous maximum into
  // equal-distance twins a couple of cells apart, so ties prune too.
  std::vector<Cand> accepted;
  for (const auto& c : cands) {
    const auto pc = coords(c.idx);
    bool removed = false;
    for (const auto& a : accepted) {
      const auto pa = coords(a.idx);
      const double dx = pc[0] - pa[0], dy = pc[1] - pa[1], dz = pc[2] - pa[2];
      if (std::sqrt(dx * dx + dy * dy + dz * dz) <= a.d) {
        removed = true;
        break;
      }
    }
    if (!removed) accepted.push_back(c);
  }

  // Nearly tangent balls fuse once the background wedge between them drops
  // below a cell, leaving a bridge core that survives pruning. A design uses
  // one particle radius, so cores far below the largest radius are bridges.
  if (accepted.size() > 1) {
    double dmax = 0.0;
    for (const auto& a : accepted) dmax = std::max(dmax, a.d);
    std::vector<Cand> kept;
    for (const auto& a : accepted)
      if (a.d >= 0.5 * dmax) kept.push_back(a);
    accepted = std::move(kept);
  }

  double sum = 0.0;
  for (const auto& a : accepted) {
    det.centers.push_back(coords(a.idx));
    det.radii.push_back(a.d);
    sum += a.d;
  }
  const double mean = sum / double(accepted.size());
  double var = 0.0;
  for (double r : det.radii) var += (r - mean) * (r - mean);
  det.radius_var = var / double(accepted.size());
  det.r_p_hat = mean / double(nx);
  return det;
}

MaterialFit fit_material_gmm(const Grid& grid, uint64_t seed) {
  const size_t n = grid.elements();
  std::vector<Vec3> y(n);
  for (size_t e = 0; e < n; ++e) y[e] = grid.element(e);

  GmmState best{};
  double best_ll = -std::numeric_limits<double>::infinity();

  for (int restart = 0; restart < 5; ++restart) {
    Rng rng = Rng::stream(seed, uint64_t(restart));
    GmmState st;
    st.mu[0] = y[rng.uniform_int(n)];
    size_t far = 0;
    double far_d = -1.0;
    for (size_t e = 0; e < n; ++e) {
      const double d = dist2(y[e], st.mu[0]);
      if (d > far_d) {
        far_d = d;
        far = e;
      }
    }
    st.mu[1] = y[far];

    // Hard assignment seeds the mixture parameters.
    {
      double cnt[2] = {0, 0};
      Vec3 acc[2] = {{0, 0, 0}, {0, 0, 0}};
      std::vector<int> a(n);
      for (size_t e = 0; e < n; ++e) {
        const int k = dist2(y[e], st.mu[1]) < dist2(y[e], st.mu[0]) ? 1 : 0;
        a[e] = k;
        cnt[k] += 1.0;
        for (int c = 0; c < 3; ++c) acc[k][c] += y[e][c];
      }
      for (int k = 0; k < 2; ++k) {
        if (cnt[k] > 0)
          for (int c = 0; c < 3; ++c) st.mu[k][c] = acc[k][c] / cnt[k];
        st.pi[k] = cnt[k] / double(n);
      }
      double sq[2] = {0, 0};
      for (size_t e = 0; e < n; ++e) sq[a[e]] += dist2(y[e], st.mu[a[e]]);
      for (int k = 0; k < 2; ++k) st.var[k] = cnt[k] > 0 ? sq[k] / (3.0 * cnt[k]) : 0.0;
    }

    double prev_ll = -std::numeric_limits<double>::infinity();
    double ll = 0.0;
    for (int iter = 0; iter < 200; ++iter) {
      double nk[2] = {0, 0};
      Vec3 mu_acc[2] = {{0, 0, 0}, {0, 0, 0}};
      std::vector<double> resp(n);
      ll = 0.0;
      for (size_t e = 0; e < n; ++e) {
        const double l0 = std::log(std::max(st.pi[0], 1e-300)) + log_density(y[e], st.mu[0], st.var[0]);
        const double l1 = std::log(std::max(st.pi[1], 1e-300)) + log_density(y[e], st.mu[1], st.var[1]);
        const double mx = std::max(l0, l1);
        const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
        ll += lse;
        const double r1 = std::exp(l1 - lse);
        resp[e] = r1;
        nk[0] += 1.0 - r1;
        nk[1] += r1;
        for (int c = 0; c < 3; ++c) {
          mu_acc[0][c] += (1.0 - r1) * y[e][c];
          mu_acc[1][c] += r1 * y[e][c];
        }
      }
      ll /= double(n);
      GmmState nxt = st;
      for (int k = 0; k < 2; ++k) {
        nxt.pi[k] = nk[k] / double(n);
        if (nk[k] > 0)
          for (int c = 0; c < 3; ++c) nxt.mu[k][c] = mu_acc[k][c] / nk[k];
      }
      double sq[2] = {0, 0};
      for (size_t e = 0; e < n; ++e) {
        sq[0] += (1.0 - resp[e]) * dist2(y[e], nxt.mu[0]);
        sq[1] += resp[e] * dist2(y[e], nxt.mu[1]);
      }
      for (int k = 0; k < 2; ++k) nxt.var[k] = nk[k] > 0 ? sq[k] / (3.0 * nk[k]) : 0.0;
      st = nxt;
      if (std::abs(ll - prev_ll) <= 1e-6) break;
      prev_ll = ll;
    }
    if (ll > best_ll) {
      best_ll = ll;
      best = st;
    }
  }

  MaterialFit fit;
  fit.mean0 = best.mu[0];
  fit.mean1 = best.mu[1];
  fit.var0 = best.var[0];
  fit.var1 = best.var[1];
  fit.log_likelihood = best_ll;
  fit.assign.resize(n);
  for (size_t e = 0; e < n; ++e)
    fit.assign[e] = dist2(y[e], best.mu[1]) < dist2(y[e], best.mu[0]) ? 1 : 0;

  // A cluster whose members are all one exact value gets that value as its
  // mean, not the value plus summation roundoff; a memberless cluster
  // carries no variance. Keeps V_m == 0 on grids holding at most two values.
  for (int k = 0; k < 2; ++k) {
    const Vec3* rep = nullptr;
    bool uniform = true;
    for (size_t e = 0; e < n; ++e) {
      if (fit.assign[e] != k) continue;
      if (!rep) {
        rep = &y[e];
      } else if (y[e] != *rep) {
        uniform = false;
        break;
      }
    }
    if (uniform) {
      if (rep) (k == 0 ? fit.mean0 : fit.mean1) = *rep;
      (k == 0 ? fit.var0 : fit.var1) = 0.0;
    }
  }
  fit.V_m = fit.var0 + fit.var1;
  fit.single = std::sqrt(dist2(fit.mean0, fit.mean1)) < 0.02;
  return fit;
}

BackprojectionResult backproject(const Grid& grid, const Catalog& catalog, uint64_t seed) {
  MaterialFit fit = fit_material_gmm(grid, seed);
  BackprojectionResult res;
  res.V_m = fit.V_m;

  const size_t n = grid.elements();
  if (fit.single) {
    Vec3 pooled{0, 0, 0};
    bool uniform = true;
    const Vec3 first = grid.element(0);
    for (size_t e = 0; e < n; ++e) {
      const Vec3 v = grid.element(e);
      uniform = uniform && v == first;
      for (int c = 0; c < 3; ++c) pooled[c] += v[c];
    }
    for (int c = 0; c < 3; ++c) pooled[c] /= double(n);
    if (uniform) pooled = first;  // constant grid looks up its exact value
    const auto nm = nearest_material(catalog, pooled);
    res.theta.matrix = *nm.record;
    res.theta.particle = *nm.record;
    res.theta.f_p = 0.0;
    res.theta.r_p = 0.0;
    res.d_m = nm.distance;
    res.single_material = true;
    return res;
  }

  ParticleDetection det[2];
  for (int h = 0; h < 2; ++h) {
    std::vector<uint8_t> fg(n, 0);
    for (size_t e = 0; e < n; ++e) fg[e] = fit.assign[e] == h ? 1 : 0;
    det[h] = detect_particles(fg, grid.nx, grid.ny, grid.nz, grid.dims);
  }

  const bool ok0 = !det[0].rejected && !det[0].centers.empty();
  const bool ok1 = !det[1].rejected && !det[1].centers.empty();
  if (!ok0 && !ok1) {
    size_t c1 = 0;
    for (int a : fit.assign) c1 += size_t(a);
    const int mat = 2 * c1 > n ? 1 : 0;
    const Vec3 mean = mat == 0 ? fit.mean0 : fit.mean1;
    const auto nm = nearest_material(catalog, mean);
    res.theta.matrix = *nm.record;
    res.theta.particle = *nm.record;
    res.theta.f_p = 0.0;
    res.theta.r_p = 0.0;
    res.d_m = nm.distance;
    res.no_particles = true;
    return res;
  }

  int h;
  if (ok0 && ok1) {
    h = det[1].radius_var < det[0].radius_var ? 1 : 0;
  } else {
    h = ok0 ? 0 : 1;
  }

  const Vec3 pmean = h == 0 ? fit.mean0 : fit.mean1;
  const Vec3 mmean = h == 0 ? fit.mean1 : fit.mean0;
  const auto nm_p = nearest_material(catalog, pmean);
  const auto nm_m = nearest_material(catalog, mmean);
  res.theta.matrix = *nm_m.record;
  res.theta.particle = *nm_p.record;
  res.theta.r_p = det[h].r_p_hat;
  res.theta.f_p = det[h].f_p_hat;
  res.d_m = nm_p.distance + nm_m.distance;
  res.particles = int(det[h].centers.size());
  return res;
}

}  // namespace invmat
