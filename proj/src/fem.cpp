#include "invmat/fem.hpp"

#include <cmath>
#include <fstream>

#include "invmat/errors.hpp"
#include "invmat/io.hpp"

namespace invmat {

namespace {

// Hex corner offsets; shape function a has sign pattern (2*off-1) per axis.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};

Eigen::Matrix<double, 6, 24> strain_matrix(double xi, double eta, double zeta,
                                           double hx, double hy, double hz) {
  Eigen::Matrix<double, 6, 24> B = Eigen::Matrix<double, 6, 24>::Zero();
  for (int a = 0; a < 8; ++a) {
    const double sx = 2.0 * kCorner[a][0] - 1.0;
    const double sy = 2.0 * kCorner[a][1] - 1.0;
    const double sz = 2.0 * kCorner[a][2] - 1.0;
    // dN/dx = dN/dxi * 2/h for the box element mapping.
    const double dx = 0.125 * sx * (1 + sy * eta) * (1 + sz * zeta) * 2.0 / hx;
    const double dy = 0.125 * (1 + sx * xi) * sy * (1 + sz * zeta) * 2.0 / hy;
    const double dz = 0.125 * (1 + sx * xi) * (1 + sy * eta) * sz * 2.0 / hz;
    B(0, 3 * a + 0) = dx;
    B(1, 3 * a + 1) = dy;
    B(2, 3 * a + 2) = dz;
    B(3, 3 * a + 1) = dz;
    B(3, 3 * a + 2) = dy;
    B(4, 3 * a + 0) = dz;
    B(4, 3 * a + 2) = dx;
    B(5, 3 * a + 0) = dy;
    B(5, 3 * a + 1) = dx;
  }
  return B;
}

}  // namespace

ElementMatrices element_matrices(double hx, double hy, double hz) {
  ElementMatrices em;
  em.volume = hx * hy * hz;
  em.K_lambda.setZero();
  em.K_mu.setZero();
  em.Bbar.setZero();
  Eigen::Matrix<double, 6, 6> M_lambda = Eigen::Matrix<double, 6, 6>::Zero();
  M_lambda.topLeftCorner<3, 3>().setOnes();
  Eigen::Matrix<double, 6, 6> M_mu = Eigen::Matrix<double, 6, 6>::Zero();
  M_mu.diagonal() << 2, 2, 2, 1, 1, 1;
  const double g = 1.0 / std::sqrt(3.0);
  const double detJ = em.volume / 8.0;
  for (int i = 0; i < 8; ++i) {
    const double xi = (2 * kCorner[i][0] - 1) * g;
    const double eta = (2 * kCorner[i][1] - 1) * g;
    const double zeta = (2 * kCorner[i][2] - 1) * g;
    const auto B = strain_matrix(xi, eta, zeta, hx, hy, hz);
    em.K_lambda += B.transpose() * M_lambda * B * detJ;
    em.K_mu += B.transpose() * M_mu * B * detJ;
    em.Bbar += B / 8.0;
  }
  return em;
}

void lame_constants(double E, double nu, double& lambda, double& mu) {
  lambda = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
  mu = E / (2.0 * (1.0 + nu));
}

double isotropic_bulk_modulus(double E, double nu) {
  if (nu >= 0.5) throw ValidationError("bulk modulus undefined at nu >= 0.5");
  return E / (3.0 * (1.0 - 2.0 * nu));
}

Eigen::Matrix<double, 24, 24> element_stiffness(double E, double nu, double hx,
                                                double hy, double hz) {
  if (E <= 0.0) throw ValidationError("element stiffness needs E > 0");
  if (nu >= 0.5 || nu < 0.0) throw ValidationError("element stiffness needs 0 <= nu < 0.5");
  const ElementMatrices em = element_matrices(hx, hy, hz);
  double lambda, mu;
  lame_constants(E, nu, lambda, mu);
  return lambda * em.K_lambda + mu * em.K_mu;
}

ElementMaterials denormalize_grid(const Grid& grid) {
  const size_t n = grid.elements();
  ElementMaterials m;
  m.E.resize(n);
  m.nu.resize(n);
  m.rho.resize(n);
  m.lambda.resize(n);
  m.mu.resize(n);
  for (size_t e = 0; e < n; ++e) {
    const Vec3 p = denormalize_material(grid.element(e));
    if (!(p[0] > 0.0))
      throw ValidationError("degenerate material (E <= 0) at element " + std::to_string(e));
    if (!(p[1] >= 0.0 && p[1] < 0.5))
      throw ValidationError("invalid Poisson ratio at element " + std::to_string(e));
    m.E[e] = p[0];
    m.nu[e] = p[1];
    m.rho[e] = p[2];
    lame_constants(p[0], p[1], m.lambda[e], m.mu[e]);
  }
  return m;
}

void FemSystem::element_dofs(int e, int dofs[24]) const {
  const int ex = e % nx;
  const int ey = (e / nx) % ny;
  const int ez = e / (nx * ny);
  for (int a = 0; a < 8; ++a) {
    const int nid = node_id(ex + kCorner[a][0], ey + kCorner[a][1], ez + kCorner[a][2]);
    for (int c = 0; c < 3; ++c) dofs[3 * a + c] = 3 * nid + c;
  }
}

FemSystem assemble(const Grid& grid, double eps0) {
  FemSystem sys;
  sys.dims = grid.dims;
  sys.nx = grid.nx;
  sys.ny = grid.ny;
  sys.nz = grid.nz;
  sys.eps0 = eps0;
  sys.hx = 1.0 / grid.nx;
  sys.hy = 1.0 / grid.ny;
  // 2D is a one-element-thick slab; its thickness matches the in-plane element size.
  sys.hz = grid.dims == 3 ? 1.0 / grid.nz : sys.hx;
  sys.n_nodes = (sys.nx + 1) * (sys.ny + 1) * (sys.nz + 1);
  sys.n_dofs = 3 * sys.n_nodes;
  sys.em = element_matrices(sys.hx, sys.hy, sys.hz);
  sys.mats = denormalize_grid(grid);

  sys.free_index.assign(sys.n_dofs, 0);
  sys.u_prescribed.assign(sys.n_dofs, 0.0);
  std::vector<uint8_t> prescribed(sys.n_dofs, 0);
  for (int iz = 0; iz <= sys.nz; ++iz) {
    for (int iy = 0; iy <= sys.ny; ++iy) {
      for (int ix = 0; ix <= sys.nx; ++ix) {
        const int nid = sys.node_id(ix, iy, iz);
        const double qx = ix * sys.hx, qy = iy * sys.hy, qz = iz * sys.hz;
        if (sys.dims == 3) {
          const bool surface = ix == 0 || ix == sys.nx || iy == 0 || iy == sys.ny ||
                               iz == 0 || iz == sys.nz;
          if (surface) {
            prescribed[3 * nid + 0] = 1;
            prescribed[3 * nid + 1] = 1;
            prescribed[3 * nid + 2] = 1;
            sys.u_prescribed[3 * nid + 0] = eps0 * qx;
            sys.u_prescribed[3 * nid + 1] = eps0 * qy;
            sys.u_prescribed[3 * nid + 2] = eps0 * qz;
          }
        } else {
          // Plane stress: in-plane displacement on the perimeter only; the
          // thickness direction stays free so out-of-plane stress relaxes to 0.
          const bool perimeter = ix == 0 || ix == sys.nx || iy == 0 || iy == sys.ny;
          if (perimeter) {
            prescribed[3 * nid + 0] = 1;
            prescribed[3 * nid + 1] = 1;
            sys.u_prescribed[3 * nid + 0] = eps0 * qx;
            sys.u_prescribed[3 * nid + 1] = eps0 * qy;
          }
        }
      }
    }
  }
  if (sys.dims == 2) {
    // Pin one thickness DOF to remove the rigid translation in z.
    prescribed[3 * sys.node_id(0, 0, 0) + 2] = 1;
    sys.u_prescribed[3 * sys.node_id(0, 0, 0) + 2] = 0.0;
  }

  sys.n_free = 0;
  for (int d = 0; d < sys.n_dofs; ++d)
    sys.free_index[d] = prescribed[d] ? -1 : sys.n_free++;

  const int n_elements = sys.nx * sys.ny * sys.nz;
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(size_t(n_elements) * 24 * 24);
  sys.b = Eigen::VectorXd::Zero(sys.n_free);
  Eigen::Matrix<double, 24, 24> Ke;
  int dofs[24];
  for (int e = 0; e < n_elements; ++e) {
    Ke = sys.mats.lambda[e] * sys.em.K_lambda + sys.mats.mu[e] * sys.em.K_mu;
    sys.element_dofs(e, dofs);
    for (int p = 0; p < 24; ++p) {
      const int fp = sys.free_index[dofs[p]];
      if (fp < 0) continue;
      for (int q = 0; q < 24; ++q) {
        const int gq = dofs[q];
        const int fq = sys.free_index[gq];
        if (fq >= 0)
          triplets.emplace_back(fp, fq, Ke(p, q));
        else
          sys.b[fp] -= Ke(p, q) * sys.u_prescribed[gq];
      }
    }
  }
  sys.A.resize(sys.n_free, sys.n_free);
  sys.A.setFromTriplets(triplets.begin(), triplets.end());
  return sys;
}

struct LinearSolver::Impl {
  const FemSystem* sys;
  Solver method;
  Eigen::SimplicialLDLT<SpMat> ldlt;
  Eigen::VectorXd inv_diag;
};

LinearSolver::LinearSolver(const FemSystem& sys, Solver method) : impl_(new Impl) {
  impl_->sys = &sys;
  impl_->method = method;
  if (method == Solver::direct) {
    impl_->ldlt.compute(sys.A);
    if (impl_->ldlt.info() != Eigen::Success)
      throw NumericalError("sparse factorization failed (system not SPD?)");
  } else {
    impl_->inv_diag = sys.A.diagonal().cwiseInverse();
    if (!impl_->inv_diag.allFinite())
      throw NumericalError("zero diagonal entry; Jacobi preconditioner undefined");
  }
}

LinearSolver::~LinearSolver() = default;

Eigen::VectorXd LinearSolver::solve(const Eigen::VectorXd& rhs, SolveStats* stats) const {
  const FemSystem& sys = *impl_->sys;
  if (impl_->method == Solver::direct) {
    Eigen::VectorXd x = impl_->ldlt.solve(rhs);
    if (stats) {
      stats->iterations = 0;
      const double bn = rhs.norm();
      stats->rel_residual = bn > 0 ? (sys.A * x - rhs).norm() / bn : 0.0;
    }
    return x;
  }
  const double bnorm = rhs.norm();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(rhs.size());
  if (bnorm == 0.0) {
    if (stats) *stats = {0, 0.0};
    return x;
  }
  const double tol = 1e-10;
  const int max_iters = 20 * int(rhs.size());
  Eigen::VectorXd r = rhs;
  Eigen::VectorXd z = impl_->inv_diag.cwiseProduct(r);
  Eigen::VectorXd p = z;
  Eigen::VectorXd Ap(rhs.size());
  double rz = r.dot(z);
  double rel = r.norm() / bnorm;
  int it = 0;
  while (rel > tol && it < max_iters) {
    Ap.noalias() = sys.A * p;
    const double alpha = rz / p.dot(Ap);
    x += alpha * p;
    r -= alpha * Ap;
    z = impl_->inv_diag.cwiseProduct(r);
    const double rz_new = r.dot(z);
    p = z + (rz_new / rz) * p;
    rz = rz_new;
    rel = r.norm() / bnorm;
    ++it;
  }
  if (stats) *stats = {it, rel};
  if (rel > tol)
    throw NumericalError("CG did not converge: rel residual " + fmt_g17(rel) + " after " +
                         std::to_string(it) + " iterations");
  return x;
}

Solver pick_solver(const Grid& grid) {
  return grid.elements() <= 4096 ? Solver::direct : Solver::cg;
}

namespace {

std::vector<double> reinstate(const FemSystem& sys, const Eigen::VectorXd& u_free) {
  std::vector<double> u(sys.u_prescribed);
  for (int d = 0; d < sys.n_dofs; ++d)
    if (sys.free_index[d] >= 0) u[d] = u_free[sys.free_index[d]];
  return u;
}

// Volume-average stress in Voigt order from a full displacement vector.
Eigen::Matrix<double, 6, 1> average_stress(const FemSystem& sys,
                                           const std::vector<double>& u) {
  const int n_elements = sys.nx * sys.ny * sys.nz;
  Eigen::Matrix<double, 6, 1> acc = Eigen::Matrix<double, 6, 1>::Zero();
  Eigen::Matrix<double, 24, 1> ue;
  int dofs[24];
  for (int e = 0; e < n_elements; ++e) {
    sys.element_dofs(e, dofs);
    for (int p = 0; p < 24; ++p) ue[p] = u[dofs[p]];
    Eigen::Matrix<double, 6, 1> strain = sys.em.Bbar * ue;
    const double tr = strain[0] + strain[1] + strain[2];
    Eigen::Matrix<double, 6, 1> stress;
    stress.head<3>().setConstant(sys.mats.lambda[e] * tr);
    stress.tail<3>().setZero();
    stress.head<3>() += 2.0 * sys.mats.mu[e] * strain.head<3>();
    stress.tail<3>() += sys.mats.mu[e] * strain.tail<3>();
    acc += stress;
  }
  return acc / n_elements;
}

double bulk_from_stress(const FemSystem& sys, const Eigen::Matrix<double, 6, 1>& s) {
  if (sys.eps0 == 0.0) throw ValidationError("bulk modulus undefined for zero strain");
  if (sys.dims == 3) return (s[0] + s[1] + s[2]) / (9.0 * sys.eps0);
  return (s[0] + s[1]) / (4.0 * sys.eps0);
}

}  // namespace

std::vector<double> solve(const FemSystem& sys, Solver method, SolveStats* stats) {
  LinearSolver solver(sys, method);
  return reinstate(sys, solver.solve(sys.b, stats));
}

double bulk_modulus(const Grid& grid, const std::vector<double>& u, double eps0) {
  FemSystem sys = assemble(grid, eps0);
  return bulk_from_stress(sys, average_stress(sys, u));
}

FemResult solve_grid(const Grid& grid, double eps0, Solver method, SolveStats* stats) {
  FemSystem sys = assemble(grid, eps0);
  FemResult res;
  res.eps0 = eps0;
  res.u = reinstate(sys, LinearSolver(sys, method).solve(sys.b, stats));
  const auto s = average_stress(sys, res.u);
  res.avg_stress << s[0], s[5], s[4], s[5], s[1], s[3], s[4], s[3], s[2];
  res.K = bulk_from_stress(sys, s);
  return res;
}

VoigtReuss voigt_reuss_bounds(const DesignParams& theta) {
  const double Km = isotropic_bulk_modulus(theta.matrix.E, theta.matrix.nu);
  const double Kp = isotropic_bulk_modulus(theta.particle.E, theta.particle.nu);
  const double f = theta.f_p;
  VoigtReuss vr;
  vr.upper = (1.0 - f) * Km + f * Kp;
  vr.lower = 1.0 / ((1.0 - f) / Km + f / Kp);
  return vr;
}

void dump_matrix_market(const FemSystem& sys, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "%%MatrixMarket matrix coordinate real symmetric\n";
  // Lower triangle only, 1-based indices.
  size_t nnz = 0;
  for (int k = 0; k < sys.A.outerSize(); ++k)
    for (SpMat::InnerIterator it(sys.A, k); it; ++it)
      if (it.row() >= it.col()) ++nnz;
  out << sys.A.rows() << " " << sys.A.cols() << " " << nnz << "\n";
  for (int k = 0; k < sys.A.outerSize(); ++k)
    for (SpMat::InnerIterator it(sys.A, k); it; ++it)
      if (it.row() >= it.col())
        out << (it.row() + 1) << " " << (it.col() + 1) << " " << fmt_g17(it.value()) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace invmat
