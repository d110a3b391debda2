#pragma once

#include "invmat/fem.hpp"
#include "invmat/grid.hpp"

namespace invmat {

enum class ObjectiveKind { J1, J2 };

struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::J1;
  double K_star = 1.0;
  double lambda = 0.0;  // density weight, used by J2 only
};

// Mean of the denormalized rho channel; the density term of J2.
double mean_density(const Grid& grid);

double objective_value(const ObjectiveSpec& spec, double K, const Grid& grid);

struct AdjointResult {
  Grid gradient;  // channels hold dJ/dE, dJ/dnu, dJ/drho per element
  double J = 0.0;
  double K = 0.0;
};

// Forward solve, adjoint solve, and per-element assembly of dJ/dx.
// normalized_space applies the chain rule of the fixed affine normalization
// so the gradient matches the space guidance operates in.
AdjointResult adjoint_gradient(const Grid& grid, const ObjectiveSpec& spec,
                               bool normalized_space, Solver method,
                               double eps0 = 1e-3);

}  // namespace invmat
