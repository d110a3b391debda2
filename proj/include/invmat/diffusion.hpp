#pragma once

#include <vector>

#include "invmat/grid.hpp"
#include "invmat/rng.hpp"

namespace invmat {

struct Schedule {
  int T = 1000;
  std::vector<double> beta;       // beta[i] is the variance at step t = i+1
  std::vector<double> alpha_bar;  // post-rescale cumulative products
  std::vector<int> timesteps;     // sampling subset, strictly decreasing
};

// Linear beta schedule; rescale shifts sqrt(alpha_bar) affinely so the
// terminal value is exactly zero while the first step is unchanged.
Schedule build_schedule(int T = 1000, double beta0 = 1e-5, double betaT = 1e-2,
                        bool rescale = true);

std::vector<int> trailing_timesteps(int T, int N);

Grid random_normal_grid(int dims, int nx, int ny, int nz, Rng& rng);

Grid q_sample(const Grid& x0, int t, const Grid& eps, const Schedule& sched);

// v-parameterization conversions; either output may be null.
void convert_v(const Grid& v, const Grid& x_t, int t, const Schedule& sched,
               Grid* eps_out, Grid* x0_out);
Grid v_target(const Grid& x0, const Grid& eps, int t, const Schedule& sched);

// One reverse step; k indexes into sched.timesteps. The step past the last
// timestep treats alpha_bar as 1, collapsing the update onto x0_hat.
// z supplies the stochastic term and may be null when eta == 0 or at the
// final step.
Grid ddim_step(const Grid& x_i, const Grid& x0_hat, int k, double eta, const Grid* z,
               const Schedule& sched);

void clip_unit(Grid& g);

}  // namespace invmat
