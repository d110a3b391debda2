#pragma once

#include <string>
#include <vector>

#include "invmat/fem.hpp"
#include "invmat/grid.hpp"
#include "invmat/io.hpp"
#include "invmat/materials.hpp"
#include "invmat/microstructure.hpp"
#include "invmat/rng.hpp"

namespace invmat {

// Linear-interpolation percentile at rank h = (n - 1) * p, p in [0, 1].
double percentile(std::vector<double> values, double p);

// Evenly spaced moduli between the 1st and 99th percentile, endpoints included.
std::vector<double> select_targets(const std::vector<double>& K_values, int count = 5);

struct EvalResult {
  double K_theta = 0.0;  // mean modulus over successful re-simulations
  double K_star = 0.0;
  double eps_r = 0.0;  // |K_theta - K_star| / |K_star|
  double eps_abs = 0.0;
  int attempts = 0;
  int successes = 0;
  bool unreliable = false;  // fewer than half the re-simulations succeeded
  std::vector<double> K_samples;
};

// Re-simulates a discrete design: stochastic particle count, fresh packing,
// rasterization, and a homogenization solve per repeat. Packing failures are
// skipped; every repeat failing is an error.
EvalResult evaluate_design(const DesignParams& theta, double K_star, int n, int dims,
                           int side, Rng& rng, double eps0 = 1e-3);

// Fraction of errors strictly below each margin.
std::vector<double> frac_below(const std::vector<double>& errors,
                               const std::vector<double>& margins);

// Unique property-space chunks touched by the matrix and particle materials
// of the qualifying designs, over the catalog's nonempty chunks.
double chunk_coverage(const Catalog& catalog, const std::vector<DesignParams>& qualifying);

struct BoundsReport {
  int total = 0;
  int outside = 0;
  double fraction_outside = 0.0;
  double max_rel_violation = 0.0;
};

// Checks each modulus against its design's Voigt-Reuss interval.
BoundsReport bounds_check(const std::vector<double>& K,
                          const std::vector<VoigtReuss>& bounds, double tol = 1e-9);

// Homogenized modulus of every dataset sample.
std::vector<double> dataset_moduli(const Dataset& data, double eps0 = 1e-3, int workers = 0);

struct DesignRow {
  uint64_t chain = 0;
  DesignParams theta;
  int particles = 0;
  double K_s = 0.0;  // modulus of the generated grid
  double K_theta = 0.0;
  double eps_r = 0.0;
  double eps_abs = 0.0;
  double V_m = 0.0;
  double d_m = 0.0;
  bool unreliable = false;
};

void write_design_csv(const std::string& path, const std::vector<DesignRow>& rows);
void write_summary_json(const std::string& path, const Json& summary);
void write_histogram_svg(const std::string& path, const std::vector<double>& values,
                         int bins, const std::string& title);

}  // namespace invmat
