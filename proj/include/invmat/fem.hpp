#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <memory>
#include <string>
#include <vector>

#include "invmat/grid.hpp"
#include "invmat/microstructure.hpp"

namespace invmat {

enum class Solver { cg, direct };

using SpMat = Eigen::SparseMatrix<double>;

// The mesh is uniform, so the element stiffness splits into two constant
// matrices weighted by the Lame parameters: Ke = lambda*K_lambda + mu*K_mu.
// Bbar is the Gauss-point mean of the strain-displacement matrix, rows in
// Voigt order (xx, yy, zz, yz, xz, xy) with engineering shear.
struct ElementMatrices {
  Eigen::Matrix<double, 24, 24> K_lambda, K_mu;
  Eigen::Matrix<double, 6, 24> Bbar;
  double volume = 0.0;
};
ElementMatrices element_matrices(double hx, double hy, double hz);

void lame_constants(double E, double nu, double& lambda, double& mu);
double isotropic_bulk_modulus(double E, double nu);  // E / (3(1-2nu))

Eigen::Matrix<double, 24, 24> element_stiffness(double E, double nu, double hx = 1.0,
                                                double hy = 1.0, double hz = 1.0);

// Per-element physical materials recovered from a normalized grid.
struct ElementMaterials {
  std::vector<double> E, nu, rho, lambda, mu;
};
ElementMaterials denormalize_grid(const Grid& grid);

struct FemSystem {
  int dims = 3;
  int nx = 0, ny = 0, nz = 0;  // element counts; node grid is one larger per axis
  double eps0 = 0.0;
  double hx = 0.0, hy = 0.0, hz = 0.0;
  int n_nodes = 0, n_dofs = 0, n_free = 0;
  std::vector<int> free_index;        // dof -> compressed free index, -1 if prescribed
  std::vector<double> u_prescribed;   // full dof vector, zero at free dofs
  SpMat A;                            // free-free block
  Eigen::VectorXd b;                  // load from eliminated Dirichlet dofs
  ElementMatrices em;
  ElementMaterials mats;

  int node_id(int ix, int iy, int iz) const {
    return (iz * (ny + 1) + iy) * (nx + 1) + ix;
  }
  void element_dofs(int e, int dofs[24]) const;
};

FemSystem assemble(const Grid& grid, double eps0 = 1e-3);

struct SolveStats {
  int iterations = 0;
  double rel_residual = 0.0;
};

// Reusable solver so the adjoint pass shares one factorization with the
// forward pass. cg is the default policy; direct is permitted for small grids.
class LinearSolver {
 public:
  LinearSolver(const FemSystem& sys, Solver method);
  ~LinearSolver();
  Eigen::VectorXd solve(const Eigen::VectorXd& rhs, SolveStats* stats = nullptr) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

Solver pick_solver(const Grid& grid);  // direct for grids of at most 4096 elements

// Full displacement vector with prescribed values reinstated.
std::vector<double> solve(const FemSystem& sys, Solver method = Solver::cg,
                          SolveStats* stats = nullptr);

double bulk_modulus(const Grid& grid, const std::vector<double>& u, double eps0);

struct FemResult {
  std::vector<double> u;
  Eigen::Matrix3d avg_stress;
  double K = 0.0;
  double eps0 = 0.0;
};
FemResult solve_grid(const Grid& grid, double eps0 = 1e-3, Solver method = Solver::cg,
                     SolveStats* stats = nullptr);

struct VoigtReuss {
  double lower = 0.0, upper = 0.0;
};
VoigtReuss voigt_reuss_bounds(const DesignParams& theta);

void dump_matrix_market(const FemSystem& sys, const std::string& path);

}  // namespace invmat
