#pragma once

#include <array>
#include <string>
#include <vector>

#include "invmat/grid.hpp"
#include "invmat/materials.hpp"
#include "invmat/rng.hpp"

namespace invmat {

struct DesignParams {
  MaterialRecord matrix;
  MaterialRecord particle;
  double r_p = 0.0;  // particle radius as fraction of the unit domain side
  double f_p = 0.0;  // particle volume fraction
};

// Sampling ranges for (f_p, particle diameter 2 r_p) depend on dimension.
struct ParamRanges {
  double fp_min, fp_max;
  double diam_min, diam_max;
};
ParamRanges design_ranges(int dims);

// Centers live in the unit square/cube; 2D layouts keep the z component at 0.
struct ParticleLayout {
  std::vector<Vec3> centers;
  double radius = 0.0;
};

DesignParams sample_design_params(const Catalog& catalog, int dims, Rng& rng);

struct ParticleCount {
  double real;
  int rounded;  // round half to even
};
ParticleCount particle_count(double f_p, double r_p, int dims);

int round_half_even(double v);
int stochastic_round(double v, Rng& rng);

ParticleLayout pack_particles(int n, double r, int dims, Rng& rng, int max_restarts = 50);

Grid rasterize(const DesignParams& theta, const ParticleLayout& layout, int dims,
               int nx, int ny, int nz = 1);

struct DatasetSample {
  DesignParams theta;
  ParticleLayout layout;
  int particles = 0;
};

struct Dataset {
  int dims = 2;
  int nx = 0, ny = 0, nz = 1;
  uint64_t seed = 0;
  std::vector<DatasetSample> samples;
  std::vector<float> blob;  // count grids, channel-minor, row-major

  size_t grid_floats() const { return size_t(3) * nx * ny * nz; }
  Grid grid(size_t i) const;
};

void generate_dataset(const Catalog& catalog, int n_samples, int dims, int side,
                      uint64_t seed, const std::string& path, int workers = 0);
Dataset load_dataset(const std::string& path);

}  // namespace invmat
