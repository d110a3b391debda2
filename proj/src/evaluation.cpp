#include "invmat/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "invmat/errors.hpp"
#include "invmat/parallel.hpp"

namespace invmat {

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  if (p < 0.0 || p > 1.0) throw ValidationError("percentile level must be in [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = double(values.size() - 1) * p;
  const size_t i = size_t(h);
  if (i + 1 >= values.size()) return values.back();
  const double frac = h - double(i);
  return values[i] + frac * (values[i + 1] - values[i]);
}

std::vector<double> select_targets(const std::vector<double>& K_values, int count) {
  if (count < 1) throw ValidationError("target count must be positive");
  if (K_values.size() < 100)
    std::fprintf(stderr, "warning: selecting targets from %zu samples, percentiles may be unstable\n",
                 K_values.size());
  // Targets are evenly spaced in modulus, not in percentile level, so skewed
  // K distributions still get an arithmetic ladder between the two endpoints.
  const double lo = percentile(K_values, 0.01);
  const double hi = percentile(K_values, 0.99);
  std::vector<double> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i)
    out.push_back(count == 1 ? 0.5 * (lo + hi)
                             : lo + double(i) * (hi - lo) / double(count - 1));
  return out;
}

EvalResult evaluate_design(const DesignParams& theta, double K_star, int n, int dims,
                           int side, Rng& rng, double eps0) {
  if (n < 1) throw ValidationError("evaluation repeats must be positive");
  if (K_star <= 0.0) throw ValidationError("target modulus must be positive");
  EvalResult res;
  res.K_star = K_star;
  const double real = particle_count(theta.f_p, theta.r_p, dims).real;
  for (int j = 0; j < n; ++j) {
    ++res.attempts;
    const int cnt = stochastic_round(real, rng);
    try {
      ParticleLayout layout;
      layout.radius = theta.r_p;
      if (cnt > 0) layout = pack_particles(cnt, theta.r_p, dims, rng);
      Grid g = rasterize(theta, layout, dims, side, side, dims == 3 ? side : 1);
      FemResult fr = solve_grid(g, eps0, pick_solver(g));
      res.K_samples.push_back(fr.K);
      ++res.successes;
    } catch (const std::exception&) {
      // Infeasible packing or a failed solve; the repeat is dropped.
    }
  }
  if (res.successes == 0)
    throw NumericalError("design evaluation failed for every re-simulation");
  double sum = 0.0;
  for (double k : res.K_samples) sum += k;
  res.K_theta = sum / double(res.successes);
  res.unreliable = 2 * res.successes < n;
  res.eps_abs = std::abs(res.K_theta - K_star);
  res.eps_r = res.eps_abs / std::abs(K_star);
  return res;
}

std::vector<double> frac_below(const std::vector<double>& errors,
                               const std::vector<double>& margins) {
  if (errors.empty()) throw ValidationError("frac metric over an empty result list");
  std::vector<double> out;
  out.reserve(margins.size());
  for (double m : margins) {
    size_t cnt = 0;
    for (double e : errors)
      if (e < m) ++cnt;
    out.push_back(double(cnt) / double(errors.size()));
  }
  return out;
}

double chunk_coverage(const Catalog& catalog, const std::vector<DesignParams>& qualifying) {
  std::set<int> ids;
  for (const auto& t : qualifying) {
    ids.insert(chunk_index(t.matrix).flat());
    ids.insert(chunk_index(t.particle).flat());
  }
  const size_t nonempty = catalog.nonempty_chunks().size();
  if (nonempty == 0) return 0.0;
  return double(ids.size()) / double(nonempty);
}

BoundsReport bounds_check(const std::vector<double>& K,
                          const std::vector<VoigtReuss>& bounds, double tol) {
  if (K.size() != bounds.size()) throw ValidationError("bounds list size mismatch");
  BoundsReport rep;
  rep.total = int(K.size());
  for (size_t i = 0; i < K.size(); ++i) {
    double viol = 0.0;
    if (K[i] < bounds[i].lower) viol = (bounds[i].lower - K[i]) / bounds[i].lower;
    if (K[i] > bounds[i].upper) viol = (K[i] - bounds[i].upper) / bounds[i].upper;
    rep.max_rel_violation = std::max(rep.max_rel_violation, viol);
    if (viol > tol) ++rep.outside;
  }
  rep.fraction_outside = rep.total ? double(rep.outside) / double(rep.total) : 0.0;
  return rep;
}

std::vector<double> dataset_moduli(const Dataset& data, double eps0, int workers) {
  std::vector<double> K(data.samples.size());
  parallel_for(
      data.samples.size(),
      [&](size_t i) {
        Grid g = data.grid(i);
        K[i] = solve_grid(g, eps0, pick_solver(g)).K;
      },
      workers);
  return K;
}

void write_design_csv(const std::string& path, const std::vector<DesignRow>& rows) {
  std::string text =
      "chain,matrix_id,matrix_E,matrix_nu,matrix_rho,particle_id,particle_E,"
      "particle_nu,particle_rho,r_p,f_p,particles,K_s,K_theta,eps_r,eps_abs,V_m,d_m,"
      "unreliable\n";
  for (const auto& r : rows) {
    text += std::to_string(r.chain) + ",";
    text += std::to_string(r.theta.matrix.id) + "," + fmt_g17(r.theta.matrix.E) + "," +
            fmt_g17(r.theta.matrix.nu) + "," + fmt_g17(r.theta.matrix.rho) + ",";
    text += std::to_string(r.theta.particle.id) + "," + fmt_g17(r.theta.particle.E) + "," +
            fmt_g17(r.theta.particle.nu) + "," + fmt_g17(r.theta.particle.rho) + ",";
    text += fmt_g17(r.theta.r_p) + "," + fmt_g17(r.theta.f_p) + ",";
    text += std::to_string(r.particles) + ",";
    text += fmt_g17(r.K_s) + "," + fmt_g17(r.K_theta) + "," + fmt_g17(r.eps_r) + "," +
            fmt_g17(r.eps_abs) + "," + fmt_g17(r.V_m) + "," + fmt_g17(r.d_m) + ",";
    text += r.unreliable ? "1" : "0";
    text += "\n";
  }
  write_text_file(path, text);
}

void write_summary_json(const std::string& path, const Json& summary) {
  write_text_file(path, summary.dump(2) + "\n");
}

void write_histogram_svg(const std::string& path, const std::vector<double>& values,
                         int bins, const std::string& title) {
  if (bins < 1) throw ValidationError("histogram needs at least one bin");
  double lo = 0.0, hi = 1.0;
  if (!values.empty()) {
    lo = *std::min_element(values.begin(), values.end());
    hi = *std::max_element(values.begin(), values.end());
  }
  if (hi <= lo) hi = lo + 1.0;
  std::vector<int> counts(bins, 0);
  for (double v : values) {
    int b = int(double(bins) * (v - lo) / (hi - lo));
    b = std::max(0, std::min(bins - 1, b));
    ++counts[b];
  }
  const int peak = values.empty() ? 1 : std::max(1, *std::max_element(counts.begin(), counts.end()));

  const int W = 640, H = 400, ml = 50, mr = 20, mt = 40, mb = 40;
  const double pw = W - ml - mr, ph = H - mt - mb;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                    std::to_string(W) + "\" height=\"" + std::to_string(H) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + std::to_string(W / 2) + "\" y=\"24\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"16\">" + title + "</text>\n";
  for (int b = 0; b < bins; ++b) {
    const double x = ml + pw * double(b) / bins;
    const double w = pw / bins;
    const double h = ph * double(counts[b]) / peak;
    svg += "<rect x=\"" + fmt_g17(x) + "\" y=\"" + fmt_g17(mt + ph - h) + "\" width=\"" +
           fmt_g17(w * 0.9) + "\" height=\"" + fmt_g17(h) + "\" fill=\"#4477aa\"/>\n";
  }
  svg += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + fmt_g17(mt + ph) + "\" x2=\"" +
         std::to_string(W - mr) + "\" y2=\"" + fmt_g17(mt + ph) +
         "\" stroke=\"black\"/>\n";
  svg += "<text x=\"" + std::to_string(ml) + "\" y=\"" + std::to_string(H - 12) +
         "\" font-family=\"sans-serif\" font-size=\"12\">" + fmt_g17(lo) + "</text>\n";
  svg += "<text x=\"" + std::to_string(W - mr) + "\" y=\"" + std::to_string(H - 12) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" +
         fmt_g17(hi) + "</text>\n";
  svg += "<text x=\"" + std::to_string(ml - 6) + "\" y=\"" + std::to_string(mt + 12) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" +
         std::to_string(peak) + "</text>\n";
  svg += "</svg>\n";
  write_text_file(path, svg);
}

}  // namespace invmat
