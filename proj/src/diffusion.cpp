#include "invmat/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "invmat/errors.hpp"

namespace invmat {

Schedule build_schedule(int T, double beta0, double betaT, bool rescale) {
  if (T < 1) throw ValidationError("schedule needs T >= 1");
  if (!(0.0 < beta0 && beta0 <= betaT && betaT < 1.0))
    throw ValidationError("invalid beta range");
  Schedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    s.beta[i] = T == 1 ? beta0 : beta0 + (double(i) / (T - 1)) * (betaT - beta0);
    prod *= 1.0 - s.beta[i];
    s.alpha_bar[i] = prod;
  }
  if (rescale) {
    const double s1 = std::sqrt(s.alpha_bar.front());
    const double sT = std::sqrt(s.alpha_bar.back());
    for (int i = 0; i < T; ++i) {
      const double si = (std::sqrt(s.alpha_bar[i]) - sT) * s1 / (s1 - sT);
      s.alpha_bar[i] = si * si;
    }
    s.alpha_bar.back() = 0.0;  // exact, not just within rounding
  }
  return s;
}

std::vector<int> trailing_timesteps(int T, int N) {
  if (N < 1 || N > T) throw ValidationError("need 1 <= N <= T");
  std::vector<int> ts;
  for (int k = 0; k < N; ++k) {
    const double x = double(T) - double(k) * T / N;
    int t = int(std::floor(x + 0.5)) - 1;  // round half up
    t = std::clamp(t, 0, T - 1);
    if (ts.empty() || t < ts.back()) ts.push_back(t);
  }
  return ts;
}

Grid random_normal_grid(int dims, int nx, int ny, int nz, Rng& rng) {
  Grid g(dims, nx, ny, nz);
  for (auto& v : g.data) v = rng.normal();
  return g;
}

namespace {

void check_t(int t, const Schedule& s) {
  if (t < 0 || t >= s.T) throw ValidationError("timestep out of range");
}

}  // namespace

Grid q_sample(const Grid& x0, int t, const Grid& eps, const Schedule& sched) {
  check_t(t, sched);
  const double a = std::sqrt(sched.alpha_bar[t]);
  const double b = std::sqrt(1.0 - sched.alpha_bar[t]);
  Grid out = x0;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
  return out;
}

void convert_v(const Grid& v, const Grid& x_t, int t, const Schedule& sched,
               Grid* eps_out, Grid* x0_out) {
  check_t(t, sched);
  const double a = std::sqrt(sched.alpha_bar[t]);
  const double b = std::sqrt(1.0 - sched.alpha_bar[t]);
  if (x0_out) {
    *x0_out = x_t;
    for (size_t i = 0; i < v.data.size(); ++i)
      x0_out->data[i] = a * x_t.data[i] - b * v.data[i];
  }
  if (eps_out) {
    *eps_out = x_t;
    for (size_t i = 0; i < v.data.size(); ++i)
      eps_out->data[i] = b * x_t.data[i] + a * v.data[i];
  }
}

Grid v_target(const Grid& x0, const Grid& eps, int t, const Schedule& sched) {
  check_t(t, sched);
  const double a = std::sqrt(sched.alpha_bar[t]);
  const double b = std::sqrt(1.0 - sched.alpha_bar[t]);
  Grid out = x0;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * eps.data[i] - b * x0.data[i];
  return out;
}

Grid ddim_step(const Grid& x_i, const Grid& x0_hat, int k, double eta, const Grid* z,
               const Schedule& sched) {
  if (k < 0 || k >= int(sched.timesteps.size()))
    throw ValidationError("sampling index out of range");
  const double ab = sched.alpha_bar[sched.timesteps[k]];
  const double ab_prev =
      k + 1 < int(sched.timesteps.size()) ? sched.alpha_bar[sched.timesteps[k + 1]] : 1.0;
  const double alpha_tilde = ab / ab_prev;
  const double beta_tilde = 1.0 - alpha_tilde;
  const double cx = std::sqrt(alpha_tilde) * (1.0 - ab_prev) / (1.0 - ab);
  const double cx0 = std::sqrt(ab_prev) * beta_tilde / (1.0 - ab);
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta_tilde);
  Grid out = x_i;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = cx * x_i.data[i] + cx0 * x0_hat.data[i];
  if (sigma != 0.0) {
    if (!z) throw ValidationError("stochastic DDIM step needs a noise draw");
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += sigma * z->data[i];
  }
  return out;
}

void clip_unit(Grid& g) {
  for (auto& v : g.data) v = std::clamp(v, -1.0, 1.0);
}

}  // namespace invmat
