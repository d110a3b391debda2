#include "invmat/cli.hpp"

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "invmat/backprojection.hpp"
#include "invmat/denoiser.hpp"
#include "invmat/diffusion.hpp"
#include "invmat/errors.hpp"
#include "invmat/evaluation.hpp"
#include "invmat/fem.hpp"
#include "invmat/guidance.hpp"
#include "invmat/io.hpp"
#include "invmat/materials.hpp"
#include "invmat/microstructure.hpp"
#include "invmat/parallel.hpp"
#include "invmat/sensitivity.hpp"

namespace invmat {
namespace {

Json parse_json(const std::string& text, const std::string& what) {
  Json j = Json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ValidationError("invalid JSON in " + what);
  return j;
}

// The config file is located before CLI parsing so its values can act as
// defaults; explicit flags override them afterwards.
Json load_config(const std::vector<std::string>& args) {
  for (size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    std::string path;
    if (a == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config requires a path");
      path = args[i + 1];
    } else if (a.rfind("--config=", 0) == 0) {
      path = a.substr(9);
    } else {
      continue;
    }
    Json j = parse_json(read_text_file(path), path);
    if (!j.is_object()) throw ValidationError("config must be a JSON object: " + path);
    return j;
  }
  return Json::object();
}

// Applies a config value when the flag was not given on the command line.
template <typename T>
void apply_cfg(CLI::App* sub, const Json& cfg, const std::string& flag, T& var) {
  const std::string key = flag.substr(2);
  if (sub->count(flag) > 0 || !cfg.contains(key)) return;
  try {
    var = cfg.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ValidationError("config field '" + key + "' has the wrong type");
  }
}

void emit_config(const std::string& out, const Json& resolved) {
  if (out.empty()) return;
  write_text_file(out + ".config.json", resolved.dump(2) + "\n");
}

ObjectiveKind parse_objective(const std::string& s) {
  if (s == "j1" || s == "J1") return ObjectiveKind::J1;
  if (s == "j2" || s == "J2") return ObjectiveKind::J2;
  throw UsageError("unknown objective '" + s + "' (expected j1 or j2)");
}

GuidanceMode parse_mode(const std::string& s) {
  if (s == "full_vjp") return GuidanceMode::full_vjp;
  if (s == "direct") return GuidanceMode::direct;
  throw UsageError("unknown guidance mode '" + s + "' (expected full_vjp or direct)");
}

Json material_to_json(const MaterialRecord& m) {
  return {{"id", m.id}, {"E", m.E}, {"nu", m.nu}, {"rho", m.rho}};
}

MaterialRecord material_from_json(const Json& j) {
  MaterialRecord m;
  m.id = j.at("id").get<int>();
  m.E = j.at("E").get<double>();
  m.nu = j.at("nu").get<double>();
  m.rho = j.at("rho").get<double>();
  return m;
}

int run(const std::vector<std::string>& args) {
  const Json cfg = load_config(args);

  CLI::App app{"inverse composite material design by loss-guided diffusion"};
  app.require_subcommand(1);

  // ---- gen-catalog ----
  struct {
    int n = 500;
    uint64_t seed = 1;
    std::string out, config;
  } gc;
  auto* gc_cmd = app.add_subcommand("gen-catalog", "generate a synthetic material catalog");
  gc_cmd->add_option("--n", gc.n, "record count");
  gc_cmd->add_option("--seed", gc.seed, "rng seed");
  gc_cmd->add_option("--out", gc.out, "output csv path");
  gc_cmd->add_option("--config", gc.config, "json config file");
  gc_cmd->callback([&] {
    apply_cfg(gc_cmd, cfg, "--n", gc.n);
    apply_cfg(gc_cmd, cfg, "--seed", gc.seed);
    apply_cfg(gc_cmd, cfg, "--out", gc.out);
    if (gc.out.empty()) throw UsageError("--out is required");
    Catalog c = generate_synthetic_catalog(gc.seed, gc.n);
    save_catalog(c, gc.out);
    emit_config(gc.out, {{"command", "gen-catalog"},
                         {"n", gc.n},
                         {"seed", gc.seed},
                         {"out", gc.out}});
    std::printf("wrote %zu materials to %s\n", c.size(), gc.out.c_str());
  });

  // ---- gen-dataset ----
  struct {
    std::string catalog, out, config;
    int count = 512, dims = 2, side = 32, workers = 0;
    uint64_t seed = 1;
  } gd;
  auto* gd_cmd = app.add_subcommand("gen-dataset", "generate a microstructure dataset");
  gd_cmd->add_option("--catalog", gd.catalog, "catalog csv path");
  gd_cmd->add_option("--count", gd.count, "sample count");
  gd_cmd->add_option("--dims", gd.dims, "2 or 3");
  gd_cmd->add_option("--side", gd.side, "grid side length");
  gd_cmd->add_option("--seed", gd.seed, "rng seed");
  gd_cmd->add_option("--workers", gd.workers, "worker threads (0 = auto)");
  gd_cmd->add_option("--out", gd.out, "output dataset path");
  gd_cmd->add_option("--config", gd.config, "json config file");
  gd_cmd->callback([&] {
    apply_cfg(gd_cmd, cfg, "--catalog", gd.catalog);
    apply_cfg(gd_cmd, cfg, "--count", gd.count);
    apply_cfg(gd_cmd, cfg, "--dims", gd.dims);
    apply_cfg(gd_cmd, cfg, "--side", gd.side);
    apply_cfg(gd_cmd, cfg, "--seed", gd.seed);
    apply_cfg(gd_cmd, cfg, "--workers", gd.workers);
    apply_cfg(gd_cmd, cfg, "--out", gd.out);
    if (gd.catalog.empty()) throw UsageError("--catalog is required");
    if (gd.out.empty()) throw UsageError("--out is required");
    Catalog c = load_catalog(gd.catalog);
    generate_dataset(c, gd.count, gd.dims, gd.side, gd.seed, gd.out, gd.workers);
    emit_config(gd.out, {{"command", "gen-dataset"},
                         {"catalog", gd.catalog},
                         {"count", gd.count},
                         {"dims", gd.dims},
                         {"side", gd.side},
                         {"seed", gd.seed},
                         {"out", gd.out}});
    std::printf("wrote %d samples to %s\n", gd.count, gd.out.c_str());
  });

  // ---- train ----
  struct {
    std::string dataset, out, config;
    TrainConfig tc;
    bool attention = false;
    uint64_t init_seed = 1;
  } tr;
  auto* tr_cmd = app.add_subcommand("train", "train the denoising network");
  tr_cmd->add_option("--dataset", tr.dataset, "dataset path");
  tr_cmd->add_option("--steps", tr.tc.steps, "optimizer steps");
  tr_cmd->add_option("--batch", tr.tc.batch, "batch size");
  tr_cmd->add_option("--peak-lr", tr.tc.peak_lr, "peak learning rate");
  tr_cmd->add_option("--warmup", tr.tc.warmup, "warmup steps");
  tr_cmd->add_option("--weight-decay", tr.tc.weight_decay, "decoupled weight decay");
  tr_cmd->add_option("--clip", tr.tc.clip_norm, "global gradient norm clip");
  tr_cmd->add_option("--seed", tr.tc.seed, "training rng seed");
  tr_cmd->add_option("--init-seed", tr.init_seed, "weight init seed");
  tr_cmd->add_flag("--attention", tr.attention, "enable bottleneck attention");
  tr_cmd->add_option("--out", tr.out, "output weights path");
  tr_cmd->add_option("--config", tr.config, "json config file");
  tr_cmd->callback([&] {
    apply_cfg(tr_cmd, cfg, "--dataset", tr.dataset);
    apply_cfg(tr_cmd, cfg, "--steps", tr.tc.steps);
    apply_cfg(tr_cmd, cfg, "--batch", tr.tc.batch);
    apply_cfg(tr_cmd, cfg, "--peak-lr", tr.tc.peak_lr);
    apply_cfg(tr_cmd, cfg, "--warmup", tr.tc.warmup);
    apply_cfg(tr_cmd, cfg, "--weight-decay", tr.tc.weight_decay);
    apply_cfg(tr_cmd, cfg, "--clip", tr.tc.clip_norm);
    apply_cfg(tr_cmd, cfg, "--seed", tr.tc.seed);
    apply_cfg(tr_cmd, cfg, "--init-seed", tr.init_seed);
    apply_cfg(tr_cmd, cfg, "--attention", tr.attention);
    apply_cfg(tr_cmd, cfg, "--out", tr.out);
    if (tr.dataset.empty()) throw UsageError("--dataset is required");
    if (tr.out.empty()) throw UsageError("--out is required");
    Dataset data = load_dataset(tr.dataset);
    DenoiserConfig dc{data.dims, tr.attention, tr.init_seed};
    UNetDenoiser den(dc);
    Schedule sched = build_schedule();
    TrainResult res = train(den, data, sched, tr.tc);
    save_weights(tr.out, den);
    Json loss = {{"kind", "loss"},
                 {"steps", tr.tc.steps},
                 {"loss", res.loss_history}};
    write_text_file(tr.out + ".loss.json", loss.dump() + "\n");
    emit_config(tr.out, {{"command", "train"},
                         {"dataset", tr.dataset},
                         {"steps", tr.tc.steps},
                         {"batch", tr.tc.batch},
                         {"peak-lr", tr.tc.peak_lr},
                         {"warmup", tr.tc.warmup},
                         {"weight-decay", tr.tc.weight_decay},
                         {"clip", tr.tc.clip_norm},
                         {"seed", tr.tc.seed},
                         {"init-seed", tr.init_seed},
                         {"attention", tr.attention},
                         {"out", tr.out}});
    std::printf("trained %d steps, final loss %.6f, weights at %s\n", tr.tc.steps,
                res.loss_history.empty() ? 0.0 : res.loss_history.back(), tr.out.c_str());
  });

  // ---- sample ----
  struct {
    std::string weights, catalog, out, config;
    std::string objective = "j1", mode = "full_vjp";
    double target_k = 0.0, lambda = 0.0, rho_d = 1.0, eta = 1.0;
    double scale_e = 0.5, scale_nu = 0.02, scale_rho = 1.0;
    int steps = 100, count = 16, side = 32, workers = 0;
    bool project = false;
    uint64_t seed = 1;
  } sp;
  auto* sp_cmd = app.add_subcommand("sample", "draw guided samples from the prior");
  sp_cmd->add_option("--weights", sp.weights, "weights path");
  sp_cmd->add_option("--target-k", sp.target_k, "target bulk modulus");
  sp_cmd->add_option("--objective", sp.objective, "j1 or j2");
  sp_cmd->add_option("--lambda", sp.lambda, "density weight for j2");
  sp_cmd->add_option("--rho-d", sp.rho_d, "guidance strength");
  sp_cmd->add_option("--steps", sp.steps, "reverse diffusion steps");
  sp_cmd->add_option("--eta", sp.eta, "ddim stochasticity");
  sp_cmd->add_option("--mode", sp.mode, "full_vjp or direct");
  sp_cmd->add_option("--scale-e", sp.scale_e, "gradient scale, E channel");
  sp_cmd->add_option("--scale-nu", sp.scale_nu, "gradient scale, nu channel");
  sp_cmd->add_option("--scale-rho", sp.scale_rho, "gradient scale, rho channel");
  sp_cmd->add_flag("--project-materials", sp.project, "project x0 onto catalog materials");
  sp_cmd->add_option("--catalog", sp.catalog, "catalog csv (needed for projection)");
  sp_cmd->add_option("--count", sp.count, "chain count");
  sp_cmd->add_option("--side", sp.side, "grid side length");
  sp_cmd->add_option("--seed", sp.seed, "rng seed");
  sp_cmd->add_option("--workers", sp.workers, "worker threads (0 = auto)");
  sp_cmd->add_option("--out", sp.out, "output samples path");
  sp_cmd->add_option("--config", sp.config, "json config file");
  sp_cmd->callback([&] {
    apply_cfg(sp_cmd, cfg, "--weights", sp.weights);
    apply_cfg(sp_cmd, cfg, "--target-k", sp.target_k);
    apply_cfg(sp_cmd, cfg, "--objective", sp.objective);
    apply_cfg(sp_cmd, cfg, "--lambda", sp.lambda);
    apply_cfg(sp_cmd, cfg, "--rho-d", sp.rho_d);
    apply_cfg(sp_cmd, cfg, "--steps", sp.steps);
    apply_cfg(sp_cmd, cfg, "--eta", sp.eta);
    apply_cfg(sp_cmd, cfg, "--mode", sp.mode);
    apply_cfg(sp_cmd, cfg, "--scale-e", sp.scale_e);
    apply_cfg(sp_cmd, cfg, "--scale-nu", sp.scale_nu);
    apply_cfg(sp_cmd, cfg, "--scale-rho", sp.scale_rho);
    apply_cfg(sp_cmd, cfg, "--project-materials", sp.project);
    apply_cfg(sp_cmd, cfg, "--catalog", sp.catalog);
    apply_cfg(sp_cmd, cfg, "--count", sp.count);
    apply_cfg(sp_cmd, cfg, "--side", sp.side);
    apply_cfg(sp_cmd, cfg, "--seed", sp.seed);
    apply_cfg(sp_cmd, cfg, "--workers", sp.workers);
    apply_cfg(sp_cmd, cfg, "--out", sp.out);
    if (sp.weights.empty()) throw UsageError("--weights is required");
    if (sp.out.empty()) throw UsageError("--out is required");
    if (sp.count < 1) throw UsageError("--count must be positive");
    if (sp.target_k <= 0.0) throw ValidationError("--target-k must be positive");
    auto den = load_weights(sp.weights);
    GuidanceConfig g;
    g.rho_D = sp.rho_d;
    g.scale_E = sp.scale_e;
    g.scale_nu = sp.scale_nu;
    g.scale_rho = sp.scale_rho;
    g.N = sp.steps;
    g.eta = sp.eta;
    g.objective.kind = parse_objective(sp.objective);
    g.objective.K_star = sp.target_k;
    g.objective.lambda = sp.lambda;
    g.mode = parse_mode(sp.mode);
    g.project_materials = sp.project;
    std::unique_ptr<Catalog> cat;
    if (!sp.catalog.empty()) {
      cat = std::make_unique<Catalog>(load_catalog(sp.catalog));
      g.catalog = cat.get();
    }
    Schedule sched = build_schedule();
    const int nz = den->dims() == 3 ? sp.side : 1;
    auto chains = run_batch(*den, sched, g, sp.side, sp.side, nz, sp.seed, sp.count,
                            sp.workers);
    Json rcfg = {{"command", "sample"},     {"weights", sp.weights},
                 {"target-k", sp.target_k}, {"objective", sp.objective},
                 {"lambda", sp.lambda},     {"rho-d", sp.rho_d},
                 {"steps", sp.steps},       {"eta", sp.eta},
                 {"mode", sp.mode},         {"scale-e", sp.scale_e},
                 {"scale-nu", sp.scale_nu}, {"scale-rho", sp.scale_rho},
                 {"project-materials", sp.project},
                 {"catalog", sp.catalog},   {"count", sp.count},
                 {"side", sp.side},         {"seed", sp.seed},
                 {"out", sp.out}};
    SamplesFile sf;
    sf.dims = den->dims();
    sf.nx = sp.side;
    sf.ny = sp.side;
    sf.nz = nz;
    sf.seed = sp.seed;
    sf.config = rcfg;
    sf.chains = std::move(chains);
    save_samples(sp.out, sf);
    emit_config(sp.out, rcfg);
    int failed = 0;
    double mean_k = 0.0;
    int ok = 0;
    for (const auto& c : sf.chains) {
      if (c.failed) {
        ++failed;
      } else {
        mean_k += c.K;
        ++ok;
      }
    }
    std::printf("sampled %d chains (%d failed), mean K %.6g, wrote %s\n", sp.count, failed,
                ok ? mean_k / ok : 0.0, sp.out.c_str());
  });

  // ---- backproject ----
  struct {
    std::string samples, catalog, out, config;
    uint64_t seed = 9001;
  } bp;
  auto* bp_cmd = app.add_subcommand("backproject", "recover design parameters from samples");
  bp_cmd->add_option("--samples", bp.samples, "samples path");
  bp_cmd->add_option("--catalog", bp.catalog, "catalog csv path");
  bp_cmd->add_option("--seed", bp.seed, "mixture fit seed");
  bp_cmd->add_option("--out", bp.out, "output designs json path");
  bp_cmd->add_option("--config", bp.config, "json config file");
  bp_cmd->callback([&] {
    apply_cfg(bp_cmd, cfg, "--samples", bp.samples);
    apply_cfg(bp_cmd, cfg, "--catalog", bp.catalog);
    apply_cfg(bp_cmd, cfg, "--seed", bp.seed);
    apply_cfg(bp_cmd, cfg, "--out", bp.out);
    if (bp.samples.empty()) throw UsageError("--samples is required");
    if (bp.catalog.empty()) throw UsageError("--catalog is required");
    if (bp.out.empty()) throw UsageError("--out is required");
    Catalog cat = load_catalog(bp.catalog);
    SamplesFile sf = load_samples(bp.samples);
    Json designs = Json::array();
    for (const auto& c : sf.chains) {
      if (c.failed) continue;
      BackprojectionResult r = backproject(c.x, cat, bp.seed);
      designs.push_back({{"chain", c.chain},
                         {"matrix", material_to_json(r.theta.matrix)},
                         {"particle", material_to_json(r.theta.particle)},
                         {"r_p", r.theta.r_p},
                         {"f_p", r.theta.f_p},
                         {"particles", r.particles},
                         {"V_m", r.V_m},
                         {"d_m", r.d_m},
                         {"single_material", r.single_material},
                         {"no_particles", r.no_particles},
                         {"K_s", c.K}});
    }
    double target_k = 0.0;
    if (sf.config.contains("target-k")) target_k = sf.config["target-k"].get<double>();
    Json out = {{"kind", "designs"}, {"dims", sf.dims},      {"side", sf.nx},
                {"target_k", target_k}, {"seed", bp.seed},   {"designs", designs}};
    write_text_file(bp.out, out.dump(2) + "\n");
    emit_config(bp.out, {{"command", "backproject"},
                         {"samples", bp.samples},
                         {"catalog", bp.catalog},
                         {"seed", bp.seed},
                         {"out", bp.out}});
    std::printf("backprojected %zu designs to %s\n", designs.size(), bp.out.c_str());
  });

  // ---- evaluate ----
  struct {
    std::string designs, catalog, out, config;
    double target_k = 0.0, eps0 = 1e-3;
    int repeats = 10;
    uint64_t seed = 1;
  } ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "re-simulate recovered designs");
  ev_cmd->add_option("--designs", ev.designs, "designs json path");
  ev_cmd->add_option("--catalog", ev.catalog, "catalog csv path");
  ev_cmd->add_option("--target-k", ev.target_k, "target modulus (default from designs)");
  ev_cmd->add_option("--repeats", ev.repeats, "re-simulations per design");
  ev_cmd->add_option("--eps0", ev.eps0, "applied strain");
  ev_cmd->add_option("--seed", ev.seed, "rng seed");
  ev_cmd->add_option("--out", ev.out, "output prefix");
  ev_cmd->add_option("--config", ev.config, "json config file");
  ev_cmd->callback([&] {
    apply_cfg(ev_cmd, cfg, "--designs", ev.designs);
    apply_cfg(ev_cmd, cfg, "--catalog", ev.catalog);
    apply_cfg(ev_cmd, cfg, "--target-k", ev.target_k);
    apply_cfg(ev_cmd, cfg, "--repeats", ev.repeats);
    apply_cfg(ev_cmd, cfg, "--eps0", ev.eps0);
    apply_cfg(ev_cmd, cfg, "--seed", ev.seed);
    apply_cfg(ev_cmd, cfg, "--out", ev.out);
    if (ev.designs.empty()) throw UsageError("--designs is required");
    if (ev.catalog.empty()) throw UsageError("--catalog is required");
    if (ev.out.empty()) throw UsageError("--out is required");
    Catalog cat = load_catalog(ev.catalog);
    Json dj = parse_json(read_text_file(ev.designs), ev.designs);
    if (dj.value("kind", "") != "designs")
      throw ValidationError("not a designs file: " + ev.designs);
    const int dims = dj.at("dims").get<int>();
    const int side = dj.at("side").get<int>();
    double target = ev.target_k > 0.0 ? ev.target_k : dj.value("target_k", 0.0);
    if (target <= 0.0) throw ValidationError("no positive target modulus available");

    std::vector<DesignRow> rows;
    std::vector<double> eps_r_list, eps_abs_list, k_list;
    std::vector<DesignParams> qualifying;
    int unreliable = 0;
    for (const auto& d : dj.at("designs")) {
      DesignRow row;
      row.chain = d.value("chain", uint64_t(0));
      row.theta.matrix = material_from_json(d.at("matrix"));
      row.theta.particle = material_from_json(d.at("particle"));
      row.theta.r_p = d.value("r_p", 0.0);
      row.theta.f_p = d.value("f_p", 0.0);
      row.particles = d.value("particles", 0);
      row.V_m = d.value("V_m", 0.0);
      row.d_m = d.value("d_m", 0.0);
      row.K_s = d.value("K_s", 0.0);
      Rng rng = Rng::stream(ev.seed, row.chain);
      EvalResult er = evaluate_design(row.theta, target, ev.repeats, dims, side, rng, ev.eps0);
      row.K_theta = er.K_theta;
      row.eps_r = er.eps_r;
      row.eps_abs = er.eps_abs;
      row.unreliable = er.unreliable;
      if (er.unreliable) ++unreliable;
      rows.push_back(row);
      eps_r_list.push_back(er.eps_r);
      eps_abs_list.push_back(er.eps_abs);
      k_list.push_back(er.K_theta);
      if (er.eps_r < 0.05) qualifying.push_back(row.theta);
    }
    const std::vector<double> rel_margins = {0.01, 0.05};
    const std::vector<double> abs_margins = {1.0, 5.0, 10.0};
    Json summary = {{"kind", "evaluation"},
                    {"target_k", target},
                    {"designs", rows.size()},
                    {"unreliable", unreliable},
                    {"frac_rel_margins", rel_margins},
                    {"frac_rel", frac_below(eps_r_list, rel_margins)},
                    {"frac_abs_margins", abs_margins},
                    {"frac_abs", frac_below(eps_abs_list, abs_margins)},
                    {"coverage", chunk_coverage(cat, qualifying)}};
    write_design_csv(ev.out + ".csv", rows);
    write_summary_json(ev.out + ".summary.json", summary);
    write_histogram_svg(ev.out + ".eps_r.svg", eps_r_list, 20, "relative error");
    write_histogram_svg(ev.out + ".k.svg", k_list, 20, "re-simulated modulus");
    emit_config(ev.out, {{"command", "evaluate"},
                         {"designs", ev.designs},
                         {"catalog", ev.catalog},
                         {"target-k", target},
                         {"repeats", ev.repeats},
                         {"eps0", ev.eps0},
                         {"seed", ev.seed},
                         {"out", ev.out}});
    std::printf("evaluated %zu designs, %d unreliable, wrote %s.csv\n", rows.size(),
                unreliable, ev.out.c_str());
  });

  // ---- targets ----
  struct {
    std::string dataset, out, config;
    int count = 5, workers = 0;
    double eps0 = 1e-3;
  } tg;
  auto* tg_cmd = app.add_subcommand("targets", "select target moduli from a dataset");
  tg_cmd->add_option("--dataset", tg.dataset, "dataset path");
  tg_cmd->add_option("--count", tg.count, "number of targets");
  tg_cmd->add_option("--eps0", tg.eps0, "applied strain");
  tg_cmd->add_option("--workers", tg.workers, "worker threads (0 = auto)");
  tg_cmd->add_option("--out", tg.out, "output json path");
  tg_cmd->add_option("--config", tg.config, "json config file");
  tg_cmd->callback([&] {
    apply_cfg(tg_cmd, cfg, "--dataset", tg.dataset);
    apply_cfg(tg_cmd, cfg, "--count", tg.count);
    apply_cfg(tg_cmd, cfg, "--eps0", tg.eps0);
    apply_cfg(tg_cmd, cfg, "--workers", tg.workers);
    apply_cfg(tg_cmd, cfg, "--out", tg.out);
    if (tg.dataset.empty()) throw UsageError("--dataset is required");
    if (tg.out.empty()) throw UsageError("--out is required");
    Dataset data = load_dataset(tg.dataset);
    std::vector<double> K = dataset_moduli(data, tg.eps0, tg.workers);
    std::vector<double> targets = select_targets(K, tg.count);
    Json out = {{"kind", "targets"}, {"dataset", tg.dataset}, {"targets", targets}};
    write_text_file(tg.out, out.dump(2) + "\n");
    emit_config(tg.out, {{"command", "targets"},
                         {"dataset", tg.dataset},
                         {"count", tg.count},
                         {"eps0", tg.eps0},
                         {"out", tg.out}});
    std::string list;
    for (double t : targets) list += (list.empty() ? "" : ", ") + fmt_g17(t);
    std::printf("targets: %s\n", list.c_str());
  });

  // ---- gradcheck ----
  struct {
    std::string objective = "j1", out, config;
    int dims = 2, side = 4;
    double target_k = 10.0, lambda = 0.0, step = 1e-4, tol = 1e-4, eps0 = 1e-3;
    uint64_t seed = 1;
  } gk;
  auto* gk_cmd = app.add_subcommand("gradcheck", "compare adjoint and finite differences");
  gk_cmd->add_option("--dims", gk.dims, "2 or 3");
  gk_cmd->add_option("--side", gk.side, "grid side length");
  gk_cmd->add_option("--objective", gk.objective, "j1 or j2");
  gk_cmd->add_option("--target-k", gk.target_k, "target modulus");
  gk_cmd->add_option("--lambda", gk.lambda, "density weight for j2");
  gk_cmd->add_option("--step", gk.step, "finite difference step");
  gk_cmd->add_option("--tol", gk.tol, "max relative error allowed");
  gk_cmd->add_option("--eps0", gk.eps0, "applied strain");
  gk_cmd->add_option("--seed", gk.seed, "rng seed");
  gk_cmd->add_option("--out", gk.out, "optional report json path");
  gk_cmd->add_option("--config", gk.config, "json config file");
  gk_cmd->callback([&] {
    apply_cfg(gk_cmd, cfg, "--dims", gk.dims);
    apply_cfg(gk_cmd, cfg, "--side", gk.side);
    apply_cfg(gk_cmd, cfg, "--objective", gk.objective);
    apply_cfg(gk_cmd, cfg, "--target-k", gk.target_k);
    apply_cfg(gk_cmd, cfg, "--lambda", gk.lambda);
    apply_cfg(gk_cmd, cfg, "--step", gk.step);
    apply_cfg(gk_cmd, cfg, "--tol", gk.tol);
    apply_cfg(gk_cmd, cfg, "--eps0", gk.eps0);
    apply_cfg(gk_cmd, cfg, "--seed", gk.seed);
    apply_cfg(gk_cmd, cfg, "--out", gk.out);
    ObjectiveSpec spec;
    spec.kind = parse_objective(gk.objective);
    spec.K_star = gk.target_k;
    spec.lambda = gk.lambda;
    Rng rng = Rng::stream(gk.seed, 0);
    Grid g(gk.dims, gk.side, gk.side, gk.dims == 3 ? gk.side : 1);
    for (auto& v : g.data) v = rng.uniform(-0.9, 0.9);
    AdjointResult adj = adjoint_gradient(g, spec, true, pick_solver(g), gk.eps0);
    auto J_of = [&](const Grid& gg) {
      FemResult fr = solve_grid(gg, gk.eps0, pick_solver(gg));
      return objective_value(spec, fr.K, gg);
    };
    double max_rel = 0.0;
    for (size_t i = 0; i < g.data.size(); ++i) {
      Grid gp = g, gm = g;
      gp.data[i] += gk.step;
      gm.data[i] -= gk.step;
      const double fd = (J_of(gp) - J_of(gm)) / (2.0 * gk.step);
      const double ad = adj.gradient.data[i];
      const double denom = std::max({std::abs(fd), std::abs(ad), 1e-12});
      max_rel = std::max(max_rel, std::abs(fd - ad) / denom);
    }
    if (!gk.out.empty()) {
      Json rep = {{"kind", "gradcheck"},
                  {"dims", gk.dims},
                  {"side", gk.side},
                  {"max_rel_error", max_rel},
                  {"tol", gk.tol}};
      write_text_file(gk.out, rep.dump(2) + "\n");
      emit_config(gk.out, {{"command", "gradcheck"},
                           {"dims", gk.dims},
                           {"side", gk.side},
                           {"objective", gk.objective},
                           {"target-k", gk.target_k},
                           {"step", gk.step},
                           {"tol", gk.tol},
                           {"seed", gk.seed},
                           {"out", gk.out}});
    }
    std::printf("gradcheck max relative error %.3e (tol %.3e)\n", max_rel, gk.tol);
    if (!(max_rel <= gk.tol))
      throw NumericalError("gradient check failed: " + fmt_g17(max_rel) + " > " +
                           fmt_g17(gk.tol));
  });

  // ---- bounds-check ----
  struct {
    std::string catalog, out, config;
    int count = 500, dims = 3, side = 16, workers = 0;
    double tol = 1e-9, eps0 = 1e-3;
    uint64_t seed = 1;
  } bc;
  auto* bc_cmd = app.add_subcommand("bounds-check", "check moduli against mixture bounds");
  bc_cmd->add_option("--catalog", bc.catalog, "catalog csv path");
  bc_cmd->add_option("--count", bc.count, "sample count");
  bc_cmd->add_option("--dims", bc.dims, "2 or 3");
  bc_cmd->add_option("--side", bc.side, "grid side length");
  bc_cmd->add_option("--tol", bc.tol, "relative violation tolerance");
  bc_cmd->add_option("--eps0", bc.eps0, "applied strain");
  bc_cmd->add_option("--seed", bc.seed, "rng seed");
  bc_cmd->add_option("--workers", bc.workers, "worker threads (0 = auto)");
  bc_cmd->add_option("--out", bc.out, "output report json path");
  bc_cmd->add_option("--config", bc.config, "json config file");
  bc_cmd->callback([&] {
    apply_cfg(bc_cmd, cfg, "--catalog", bc.catalog);
    apply_cfg(bc_cmd, cfg, "--count", bc.count);
    apply_cfg(bc_cmd, cfg, "--dims", bc.dims);
    apply_cfg(bc_cmd, cfg, "--side", bc.side);
    apply_cfg(bc_cmd, cfg, "--tol", bc.tol);
    apply_cfg(bc_cmd, cfg, "--eps0", bc.eps0);
    apply_cfg(bc_cmd, cfg, "--seed", bc.seed);
    apply_cfg(bc_cmd, cfg, "--workers", bc.workers);
    apply_cfg(bc_cmd, cfg, "--out", bc.out);
    if (bc.catalog.empty()) throw UsageError("--catalog is required");
    if (bc.out.empty()) throw UsageError("--out is required");
    if (bc.count < 1) throw UsageError("--count must be positive");
    Catalog cat = load_catalog(bc.catalog);
    std::vector<double> K(bc.count);
    std::vector<VoigtReuss> vr(bc.count);
    parallel_for(
        size_t(bc.count),
        [&](size_t i) {
          Rng rng = Rng::stream(bc.seed, i);
          DesignParams theta;
          ParticleLayout layout;
          for (int attempt = 0;; ++attempt) {
            if (attempt >= 100)
              throw NumericalError("sample " + std::to_string(i) + ": no packable theta");
            theta = sample_design_params(cat, bc.dims, rng);
            const int n = particle_count(theta.f_p, theta.r_p, bc.dims).rounded;
            try {
              layout = pack_particles(n, theta.r_p, bc.dims, rng);
              break;
            } catch (const NumericalError&) {
              continue;
            }
          }
          Grid g = rasterize(theta, layout, bc.dims, bc.side, bc.side,
                             bc.dims == 3 ? bc.side : 1);
          K[i] = solve_grid(g, bc.eps0, pick_solver(g)).K;
          vr[i] = voigt_reuss_bounds(theta);
        },
        bc.workers);
    BoundsReport rep = bounds_check(K, vr, bc.tol);
    Json out = {{"kind", "bounds"},
                {"count", rep.total},
                {"outside", rep.outside},
                {"fraction_outside", rep.fraction_outside},
                {"max_rel_violation", rep.max_rel_violation}};
    write_text_file(bc.out, out.dump(2) + "\n");
    emit_config(bc.out, {{"command", "bounds-check"},
                         {"catalog", bc.catalog},
                         {"count", bc.count},
                         {"dims", bc.dims},
                         {"side", bc.side},
                         {"tol", bc.tol},
                         {"seed", bc.seed},
                         {"out", bc.out}});
    std::printf("bounds: %d of %d outside, max relative violation %.3e\n", rep.outside,
                rep.total, rep.max_rel_violation);
  });

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("invmat");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  return 0;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args) {
  try {
    return run(args);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

}  // namespace invmat
