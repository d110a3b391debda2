#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "invmat/grid.hpp"
#include "invmat/materials.hpp"
#include "invmat/microstructure.hpp"

namespace invmat {

// Two-component spherical Gaussian mixture over per-element normalized
// material triples. Variances are reported unfloored, so a grid holding
// exactly two values fits with V_m == 0.
struct MaterialFit {
  Vec3 mean0{}, mean1{};
  double var0 = 0.0, var1 = 0.0;
  double V_m = 0.0;             // var0 + var1
  bool single = false;          // means closer than the separation threshold
  std::vector<int> assign;      // per element, nearest mean (0 or 1)
  double log_likelihood = 0.0;  // mean per-element log likelihood of the kept fit
};

MaterialFit fit_material_gmm(const Grid& grid, uint64_t seed = 9001);

// Exact squared Euclidean distance transform: for each cell, the squared
// distance (element units) to the nearest background cell center. Nonzero
// mask entries are foreground. An all-foreground input yields a large
// sentinel everywhere.
std::vector<double> squared_edt(const std::vector<uint8_t>& fg, int nx, int ny, int nz);

bool simple_point_2d(const std::vector<uint8_t>& fg, int nx, int ny, int x, int y);
bool simple_point_3d(const std::vector<uint8_t>& fg, int nx, int ny, int nz, int x, int y,
                     int z);

// One pass of distance-ordered simple-point deletion. Cells are visited in
// increasing (squared distance, index) order and deleted when their removal
// preserves local topology. The surviving cells sit on the ridge of the
// distance transform.
std::vector<uint8_t> homotopic_thin(const std::vector<uint8_t>& fg,
                                    const std::vector<double>& d2, int nx, int ny, int nz);

struct ParticleDetection {
  bool rejected = false;
  std::string reason;
  std::vector<std::array<int, 3>> centers;  // element indices
  std::vector<double> radii;                // element units, the EDT value at the center
  double r_p_hat = 0.0;                     // mean radius over the domain side
  double f_p_hat = 0.0;                     // foreground volume fraction
  double radius_var = 0.0;                  // population variance of the radii
  size_t foreground = 0;
};

// Treats the mask as a union of balls and recovers one center per ball.
// Rejects masks that cover most of the boundary or contain a ball comparable
// to the domain itself; those indicate the foreground is really the matrix.
ParticleDetection detect_particles(const std::vector<uint8_t>& fg, int nx, int ny, int nz,
                                   int dims);

struct BackprojectionResult {
  DesignParams theta;
  int particles = 0;        // accepted ball count
  double V_m = 0.0;         // residual material variance
  double d_m = 0.0;         // summed catalog lookup distances
  bool single_material = false;
  bool no_particles = false;  // both foreground hypotheses rejected
};

BackprojectionResult backproject(const Grid& grid, const Catalog& catalog,
                                 uint64_t seed = 9001);

}  // namespace invmat
