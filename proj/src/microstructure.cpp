#include "invmat/microstructure.hpp"

#include <algorithm>
#include <cmath>

#include "invmat/errors.hpp"
#include "invmat/io.hpp"
#include "invmat/parallel.hpp"

namespace invmat {

namespace {

constexpr double kPi = 3.14159265358979323846;

Json theta_to_json(const DesignParams& t) {
  return Json{{"matrix", {{"id", t.matrix.id}, {"E", t.matrix.E}, {"nu", t.matrix.nu}, {"rho", t.matrix.rho}}},
              {"particle", {{"id", t.particle.id}, {"E", t.particle.E}, {"nu", t.particle.nu}, {"rho", t.particle.rho}}},
              {"r_p", t.r_p},
              {"f_p", t.f_p}};
}

MaterialRecord material_from_json(const Json& j) {
  return {j.at("id").get<int>(), j.at("E").get<double>(), j.at("nu").get<double>(),
          j.at("rho").get<double>()};
}

DesignParams theta_from_json(const Json& j) {
  DesignParams t;
  t.matrix = material_from_json(j.at("matrix"));
  t.particle = material_from_json(j.at("particle"));
  t.r_p = j.at("r_p").get<double>();
  t.f_p = j.at("f_p").get<double>();
  return t;
}

}  // namespace

ParamRanges design_ranges(int dims) {
  if (dims == 2) return {0.05, 0.5, 0.15, 0.4};
  if (dims == 3) return {0.05, 0.45, 0.15, 0.35};
  throw ValidationError("dims must be 2 or 3");
}

DesignParams sample_design_params(const Catalog& catalog, int dims, Rng& rng) {
  const ParamRanges r = design_ranges(dims);
  DesignParams t;
  t.matrix = sample_material(catalog, rng);
  t.particle = sample_material(catalog, rng);
  t.f_p = rng.uniform(r.fp_min, r.fp_max);
  t.r_p = rng.uniform(r.diam_min, r.diam_max) / 2.0;
  return t;
}

ParticleCount particle_count(double f_p, double r_p, int dims) {
  if (f_p < 0.0) throw ValidationError("negative volume fraction");
  if (f_p == 0.0) return {0.0, 0};
  if (r_p <= 0.0) throw ValidationError("particle radius must be positive");
  const double unit = dims == 2 ? kPi * r_p * r_p : (4.0 / 3.0) * kPi * r_p * r_p * r_p;
  const double real = f_p / unit;
  return {real, round_half_even(real)};
}

int round_half_even(double v) {
  const double fl = std::floor(v);
  const double frac = v - fl;
  if (frac > 0.5) return int(fl) + 1;
  if (frac < 0.5) return int(fl);
  const int lo = int(fl);
  return lo % 2 == 0 ? lo : lo + 1;
}

int stochastic_round(double v, Rng& rng) {
  if (v < 0.0) throw ValidationError("negative input to stochastic rounding");
  const double fl = std::floor(v);
  const double frac = v - fl;
  return int(fl) + (rng.uniform() < frac ? 1 : 0);
}

ParticleLayout pack_particles(int n, double r, int dims, Rng& rng, int max_restarts) {
  if (n < 0) throw ValidationError("negative particle count");
  if (n > 0 && (r <= 0.0 || r >= 0.5)) throw ValidationError("radius must fit in the unit domain");
  ParticleLayout layout;
  layout.radius = r;
  if (n == 0) return layout;
  const int D = dims;
  const double lo = r, hi = 1.0 - r;

  auto fresh = [&](std::vector<Vec3>& c) {
    c.assign(n, {0.0, 0.0, 0.0});
    for (auto& p : c)
      for (int d = 0; d < D; ++d) p[d] = rng.uniform(lo, hi);
  };

  std::vector<Vec3> centers;
  std::vector<Vec3> delta(n);
  for (int restart = 0; restart < max_restarts; ++restart) {
    fresh(centers);
    for (int update = 0; update < 10000; ++update) {
      bool overlap = false;
      for (auto& d : delta) d = {0.0, 0.0, 0.0};
      // Jitter breaks symmetric deadlocks where separation deltas cancel.
      for (auto& d : delta)
        for (int k = 0; k < D; ++k) d[k] += rng.uniform(-0.01 * r, 0.01 * r);
      for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
          double diff[3] = {0, 0, 0}, dist2 = 0;
          for (int k = 0; k < D; ++k) {
            diff[k] = centers[i][k] - centers[j][k];
            dist2 += diff[k] * diff[k];
          }
          if (dist2 >= 4.0 * r * r) continue;
          overlap = true;
          double dist = std::sqrt(dist2);
          double dir[3];
          if (dist < 1e-12) {
            // Coincident centers: push along a random direction.
            double norm2 = 0;
            for (int k = 0; k < D; ++k) {
              dir[k] = rng.normal();
              norm2 += dir[k] * dir[k];
            }
            const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-300));
            for (int k = 0; k < D; ++k) dir[k] *= inv;
            dist = 0.0;
          } else {
            for (int k = 0; k < D; ++k) dir[k] = diff[k] / dist;
          }
          const double push = 1.5 * (2.0 * r - dist) / 2.0;
          for (int k = 0; k < D; ++k) {
            delta[i][k] += dir[k] * push;
            delta[j][k] -= dir[k] * push;
          }
        }
      }
      if (!overlap) {
        layout.centers = centers;
        return layout;
      }
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < D; ++k)
          centers[i][k] = std::clamp(centers[i][k] + delta[i][k], lo, hi);
    }
  }
  throw NumericalError("packing infeasible: " + std::to_string(n) + " particles of radius " +
                       std::to_string(r) + " after " + std::to_string(max_restarts) +
                       " restarts");
}

Grid rasterize(const DesignParams& theta, const ParticleLayout& layout, int dims,
               int nx, int ny, int nz) {
  Grid g(dims, nx, ny, nz);
  const Vec3 vm = normalize_material({theta.matrix.E, theta.matrix.nu, theta.matrix.rho});
  const Vec3 vp = normalize_material({theta.particle.E, theta.particle.nu, theta.particle.rho});
  const double r2 = layout.radius * layout.radius;
  for (int iz = 0; iz < g.nz; ++iz) {
    for (int iy = 0; iy < g.ny; ++iy) {
      for (int ix = 0; ix < g.nx; ++ix) {
        const double cx = (ix + 0.5) / g.nx;
        const double cy = (iy + 0.5) / g.ny;
        const double cz = dims == 3 ? (iz + 0.5) / g.nz : 0.0;
        bool inside = false;
        for (const auto& c : layout.centers) {
          const double dx = cx - c[0], dy = cy - c[1];
          const double dz = dims == 3 ? cz - c[2] : 0.0;
          if (dx * dx + dy * dy + dz * dz < r2) {
            inside = true;
            break;
          }
        }
        g.set_element(g.element_index(ix, iy, iz), inside ? vp : vm);
      }
    }
  }
  return g;
}

void generate_dataset(const Catalog& catalog, int n_samples, int dims, int side,
                      uint64_t seed, const std::string& path, int workers) {
  if (n_samples <= 0) throw ValidationError("dataset needs at least one sample");
  if (side < 2) throw ValidationError("grid side must be at least 2");
  const int nx = side, ny = side, nz = dims == 3 ? side : 1;
  const size_t per_grid = size_t(3) * nx * ny * nz;

  std::vector<DatasetSample> samples(n_samples);
  std::vector<float> blob(per_grid * n_samples);
  parallel_for(size_t(n_samples), [&](size_t i) {
    Rng rng = Rng::stream(seed, i);
    DatasetSample s;
    // A theta whose particles cannot be packed is resampled; each attempt
    // consumes this sample's own stream so the result is order-independent.
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 100)
        throw NumericalError("sample " + std::to_string(i) + ": no packable theta found");
      s.theta = sample_design_params(catalog, dims, rng);
      s.particles = particle_count(s.theta.f_p, s.theta.r_p, dims).rounded;
      try {
        s.layout = pack_particles(s.particles, s.theta.r_p, dims, rng);
        break;
      } catch (const NumericalError&) {
        continue;
      }
    }
    const Grid g = rasterize(s.theta, s.layout, dims, nx, ny, nz);
    float* dst = blob.data() + per_grid * i;
    for (size_t k = 0; k < per_grid; ++k) dst[k] = float(g.data[k]);
    samples[i] = std::move(s);
  }, workers);

  Json manifest{{"kind", "dataset"}, {"dims", dims}, {"nx", nx}, {"ny", ny},
                {"nz", nz},          {"count", n_samples}, {"seed", seed}};
  Json list = Json::array();
  for (const auto& s : samples) {
    Json centers = Json::array();
    for (const auto& c : s.layout.centers) centers.push_back({c[0], c[1], c[2]});
    list.push_back({{"theta", theta_to_json(s.theta)},
                    {"particles", s.particles},
                    {"centers", std::move(centers)}});
  }
  manifest["samples"] = std::move(list);
  write_container(path, kDatasetMagic, manifest, blob);
}

Dataset load_dataset(const std::string& path) {
  Container c = read_container(path, kDatasetMagic);
  Dataset d;
  d.dims = c.manifest.at("dims").get<int>();
  d.nx = c.manifest.at("nx").get<int>();
  d.ny = c.manifest.at("ny").get<int>();
  d.nz = c.manifest.at("nz").get<int>();
  d.seed = c.manifest.at("seed").get<uint64_t>();
  const size_t count = c.manifest.at("count").get<size_t>();
  for (const auto& j : c.manifest.at("samples")) {
    DatasetSample s;
    s.theta = theta_from_json(j.at("theta"));
    s.particles = j.at("particles").get<int>();
    s.layout.radius = s.theta.r_p;
    for (const auto& cc : j.at("centers"))
      s.layout.centers.push_back({cc[0].get<double>(), cc[1].get<double>(), cc[2].get<double>()});
    d.samples.push_back(std::move(s));
  }
  if (d.samples.size() != count) throw IoError("dataset manifest count mismatch in " + path);
  d.blob = std::move(c.blob);
  if (d.blob.size() != d.grid_floats() * count)
    throw IoError("dataset blob size mismatch in " + path);
  return d;
}

Grid Dataset::grid(size_t i) const {
  Grid g(dims, nx, ny, nz);
  const float* src = blob.data() + grid_floats() * i;
  for (size_t k = 0; k < g.data.size(); ++k) g.data[k] = double(src[k]);
  return g;
}

}  // namespace invmat
