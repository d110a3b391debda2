#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "invmat/denoiser.hpp"
#include "invmat/diffusion.hpp"
#include "invmat/grid.hpp"
#include "invmat/io.hpp"
#include "invmat/materials.hpp"
#include "invmat/sensitivity.hpp"

namespace invmat {

enum class GuidanceMode { full_vjp, direct };

struct GuidanceConfig {
  double rho_D = 1.0;       // guidance strength; 0 disables the gradient path
  double scale_E = 0.5;     // per-channel gradient scales
  double scale_nu = 0.02;
  double scale_rho = 1.0;
  int N = 100;              // reverse steps
  double eta = 1.0;         // DDIM stochasticity
  ObjectiveSpec objective;
  GuidanceMode mode = GuidanceMode::full_vjp;
  bool project_materials = false;
  const Catalog* catalog = nullptr;  // required when project_materials is set
  double eps0 = 1e-3;
};

struct ChainResult {
  uint64_t chain = 0;
  Grid x;                          // final grid, clipped to [-1, 1]
  double K = 0.0;                  // homogenized modulus of the final grid
  double J = 0.0;                  // objective at the final grid
  std::vector<double> loss_trace;  // objective at each step's x0 estimate; empty unguided
  bool failed = false;
  std::string error;
};

// Objective gradient in normalized space at a clipped x0 estimate. Nearly
// degenerate elements are lifted off the channel floor for the solve only.
// Channel scales are applied. J and K at the estimate come back through the
// out-params.
Grid loss_gradient_at_xhat(const Grid& x0_hat, const GuidanceConfig& cfg,
                           double* J_out = nullptr, double* K_out = nullptr);

// One reverse chain from pure noise. The guidance update is subtracted after
// the DDIM step; the gradient path consumes no randomness, so rho_D == 0
// reproduces the unguided chain bitwise.
Grid guided_sample(Denoiser& den, const Schedule& sched, const GuidanceConfig& cfg, int nx,
                   int ny, int nz, Rng& rng, std::vector<double>* loss_trace = nullptr);

// Independent chains; chain i draws from Rng::stream(seed, i) regardless of
// worker count. Per-chain failures are recorded, not fatal, unless every
// chain fails.
std::vector<ChainResult> run_batch(Denoiser& den, const Schedule& sched,
                                   const GuidanceConfig& cfg, int nx, int ny, int nz,
                                   uint64_t seed, int count, int workers = 0);

struct SamplesFile {
  int dims = 2;
  int nx = 0, ny = 0, nz = 1;
  uint64_t seed = 0;
  Json config;  // resolved guidance settings for provenance
  std::vector<ChainResult> chains;
};

void save_samples(const std::string& path, const SamplesFile& s);
SamplesFile load_samples(const std::string& path);

}  // namespace invmat
