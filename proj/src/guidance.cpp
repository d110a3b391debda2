#include "invmat/guidance.hpp"

#include <algorithm>
#include <cmath>

#include "invmat/errors.hpp"
#include "invmat/fem.hpp"
#include "invmat/parallel.hpp"

namespace invmat {

namespace {

// Lifts degenerate channel values so the elasticity solve stays definite:
// E at the floor becomes a tiny positive modulus, nu at the ceiling stays
// strictly below the incompressible limit. Only the solver sees this copy.
Grid fem_ready(const Grid& g) {
  Grid out = g;
  const size_t n = out.elements();
  for (size_t e = 0; e < n; ++e) {
    double* p = out.data.data() + e * 3;
    p[0] = std::max(p[0], -1.0 + 1e-6);
    p[1] = std::min(p[1], 1.0 - 1e-6);
  }
  return out;
}

void check_finite(const Grid& g, int step) {
  for (double v : g.data)
    if (!std::isfinite(v))
      throw NumericalError("chain diverged at step " + std::to_string(step));
}

void project_to_catalog(Grid& g, const Catalog& catalog) {
  const size_t n = g.elements();
  for (size_t e = 0; e < n; ++e) {
    const auto nm = nearest_material(catalog, g.element(e));
    g.set_element(e, normalize_material({nm.record->E, nm.record->nu, nm.record->rho}));
  }
}

}  // namespace

Grid loss_gradient_at_xhat(const Grid& x0_hat, const GuidanceConfig& cfg, double* J_out,
                           double* K_out) {
  Grid fg = fem_ready(x0_hat);
  AdjointResult adj =
      adjoint_gradient(fg, cfg.objective, /*normalized_space=*/true, pick_solver(fg), cfg.eps0);
  if (J_out) *J_out = adj.J;
  if (K_out) *K_out = adj.K;
  Grid g = std::move(adj.gradient);
  const size_t n = g.elements();
  for (size_t e = 0; e < n; ++e) {
    double* p = g.data.data() + e * 3;
    p[0] *= cfg.scale_E;
    p[1] *= cfg.scale_nu;
    p[2] *= cfg.scale_rho;
  }
  return g;
}

Grid guided_sample(Denoiser& den, const Schedule& sched, const GuidanceConfig& cfg, int nx,
                   int ny, int nz, Rng& rng, std::vector<double>* loss_trace) {
  if (den.dims() == 2 && nz != 1) throw ValidationError("2D sampling requires nz == 1");
  if (cfg.project_materials && cfg.catalog == nullptr)
    throw ValidationError("material projection requires a catalog");
  Schedule s = sched;
  s.timesteps = trailing_timesteps(s.T, cfg.N);
  const int N = int(s.timesteps.size());

  Grid x = random_normal_grid(den.dims(), nx, ny, nz, rng);
  for (int k = 0; k < N; ++k) {
    const int t = s.timesteps[k];
    Grid v = den.forward(x, t);
    Grid x0_hat(x.dims, x.nx, x.ny, x.nz);
    convert_v(v, x, t, s, nullptr, &x0_hat);
    clip_unit(x0_hat);

    Grid g_i;
    bool guided = cfg.rho_D != 0.0;
    if (guided) {
      double J = 0.0;
      Grid g_x = loss_gradient_at_xhat(x0_hat, cfg, &J);
      if (loss_trace) loss_trace->push_back(J);
      if (cfg.mode == GuidanceMode::full_vjp) {
        const double ab = s.alpha_bar[t];
        const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
        Grid back = den.vjp(x, t, g_x);
        g_i = g_x;
        for (size_t i = 0; i < g_i.data.size(); ++i)
          g_i.data[i] = a * g_x.data[i] - b * back.data[i];
      } else {
        const double a = std::sqrt(s.alpha_bar[t]);
        const double denom = std::max(a, 1e-3);
        g_i = g_x;
        for (auto& gv : g_i.data) gv /= denom;
      }
    }

    if (cfg.project_materials) project_to_catalog(x0_hat, *cfg.catalog);

    Grid z;
    const Grid* zp = nullptr;
    if (cfg.eta > 0.0 && k < N - 1) {
      z = random_normal_grid(x.dims, x.nx, x.ny, x.nz, rng);
      zp = &z;
    }
    x = ddim_step(x, x0_hat, k, cfg.eta, zp, s);
    if (guided)
      for (size_t i = 0; i < x.data.size(); ++i) x.data[i] -= cfg.rho_D * g_i.data[i];
    check_finite(x, k);
  }
  clip_unit(x);
  return x;
}

std::vector<ChainResult> run_batch(Denoiser& den, const Schedule& sched,
                                   const GuidanceConfig& cfg, int nx, int ny, int nz,
                                   uint64_t seed, int count, int workers) {
  if (count < 1) throw UsageError("chain count must be positive");
  const int W = workers > 0 ? workers : worker_count();
  const int nw = std::max(1, std::min(W, count));
  std::vector<std::unique_ptr<Denoiser>> clones;
  for (int i = 1; i < nw; ++i) clones.push_back(den.clone());

  std::vector<ChainResult> out(count);
  parallel_for_worker(
      size_t(count),
      [&](size_t i, int worker) {
        Denoiser& d = worker == 0 ? den : *clones[worker - 1];
        ChainResult& r = out[i];
        r.chain = i;
        try {
          Rng rng = Rng::stream(seed, i);
          r.x = guided_sample(d, sched, cfg, nx, ny, nz, rng,
                              cfg.rho_D != 0.0 ? &r.loss_trace : nullptr);
          FemResult fr = solve_grid(fem_ready(r.x), cfg.eps0, pick_solver(r.x));
          r.K = fr.K;
          r.J = objective_value(cfg.objective, r.K, r.x);
        } catch (const std::exception& e) {
          r.failed = true;
          r.error = e.what();
          r.x = Grid(den.dims(), nx, ny, nz);
          r.loss_trace.clear();
        }
      },
      nw);

  bool any_ok = false;
  for (const auto& r : out) any_ok |= !r.failed;
  if (!any_ok) throw NumericalError("all chains failed: " + out.front().error);
  return out;
}

void save_samples(const std::string& path, const SamplesFile& s) {
  Json chains = Json::array();
  std::vector<float> blob;
  const size_t gf = size_t(3) * s.nx * s.ny * s.nz;
  blob.reserve(gf * s.chains.size());
  for (const auto& c : s.chains) {
    chains.push_back({{"chain", c.chain},
                      {"K", c.K},
                      {"J", c.J},
                      {"failed", c.failed},
                      {"error", c.error},
                      {"loss_trace", c.loss_trace}});
    if (c.x.data.size() != gf) throw ValidationError("sample grid shape mismatch");
    for (double v : c.x.data) blob.push_back(float(v));
  }
  Json manifest = {{"kind", "samples"}, {"dims", s.dims},   {"nx", s.nx},
                   {"ny", s.ny},        {"nz", s.nz},       {"seed", s.seed},
                   {"config", s.config}, {"chains", chains}};
  write_container(path, kSamplesMagic, manifest, blob);
}

SamplesFile load_samples(const std::string& path) {
  Container c = read_container(path, kSamplesMagic);
  const auto& man = c.manifest;
  SamplesFile s;
  s.dims = man.value("dims", 0);
  s.nx = man.value("nx", 0);
  s.ny = man.value("ny", 0);
  s.nz = man.value("nz", 1);
  s.seed = man.value("seed", uint64_t(0));
  if (man.contains("config")) s.config = man["config"];
  if (s.dims != 2 && s.dims != 3)
    throw ValidationError("samples file has invalid dims in " + path);
  const auto& chains = man["chains"];
  const size_t gf = size_t(3) * s.nx * s.ny * s.nz;
  if (c.blob.size() != gf * chains.size())
    throw ValidationError("samples blob size mismatch in " + path);
  size_t off = 0;
  for (const auto& cj : chains) {
    ChainResult r;
    r.chain = cj.value("chain", uint64_t(0));
    r.K = cj.value("K", 0.0);
    r.J = cj.value("J", 0.0);
    r.failed = cj.value("failed", false);
    r.error = cj.value("error", "");
    if (cj.contains("loss_trace")) r.loss_trace = cj["loss_trace"].get<std::vector<double>>();
    r.x = Grid(s.dims, s.nx, s.ny, s.nz);
    for (size_t i = 0; i < gf; ++i) r.x.data[i] = double(c.blob[off + i]);
    off += gf;
    s.chains.push_back(std::move(r));
  }
  return s;
}

}  // namespace invmat
