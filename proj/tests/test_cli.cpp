#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "invmat/cli.hpp"
#include "invmat/evaluation.hpp"
#include "invmat/guidance.hpp"
#include "invmat/io.hpp"
#include "invmat/materials.hpp"
#include "invmat/microstructure.hpp"

using namespace invmat;

namespace {

std::string tmp(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

void rm(std::initializer_list<std::string> paths) {
  for (const auto& p : paths) std::filesystem::remove(p);
}

bool same_bytes(const std::string& a, const std::string& b) {
  return read_text_file(a) == read_text_file(b);
}

// Builds the small catalog shared by the pipeline cases.
std::string make_catalog(const std::string& name) {
  const std::string path = tmp(name);
  REQUIRE(cli_dispatch({"gen-catalog", "--n", "60", "--seed", "3", "--out", path}) == 0);
  return path;
}

}  // namespace

TEST_CASE("commands validate their arguments with distinct exit codes") {
  CHECK(cli_dispatch({}) == 1);                    // a subcommand is required
  CHECK(cli_dispatch({"frobnicate"}) == 1);        // unknown subcommand
  CHECK(cli_dispatch({"--help"}) == 0);            // help is not an error
  CHECK(cli_dispatch({"gen-catalog"}) == 1);       // --out missing
  CHECK(cli_dispatch({"gen-dataset", "--out", tmp("cli_x.bin")}) == 1);
  CHECK(cli_dispatch({"train", "--out", tmp("cli_x.w")}) == 1);
  CHECK(cli_dispatch({"sample", "--weights", tmp("cli_missing.w"), "--out",
                      tmp("cli_x.s"), "--count", "0", "--target-k", "5"}) == 1);
  CHECK(cli_dispatch({"sample", "--weights", tmp("cli_missing.w"), "--out",
                      tmp("cli_x.s"), "--target-k", "0"}) == 2);
  CHECK(cli_dispatch({"gradcheck", "--objective", "j3"}) == 1);
  CHECK(cli_dispatch({"evaluate", "--designs", tmp("cli_nope.json"), "--catalog",
                      tmp("cli_nope.csv"), "--out", tmp("cli_x")}) == 2);
  CHECK(cli_dispatch({"bounds-check", "--catalog", tmp("cli_nope.csv"), "--out",
                      tmp("cli_x.json"), "--count", "0"}) == 1);
}

TEST_CASE("gradcheck accepts the adjoint gradient and rejects absurd tolerances") {
  const std::string rep = tmp("cli_gradcheck.json");
  CHECK(cli_dispatch({"gradcheck", "--dims", "2", "--side", "4", "--seed", "2",
                      "--out", rep}) == 0);
  Json j = Json::parse(read_text_file(rep));
  CHECK(j.at("kind") == "gradcheck");
  CHECK(j.at("max_rel_error").get<double>() <= j.at("tol").get<double>());
  CHECK(std::filesystem::exists(rep + ".config.json"));

  CHECK(cli_dispatch({"gradcheck", "--dims", "2", "--side", "4", "--seed", "2",
                      "--tol", "1e-18"}) == 3);
  rm({rep, rep + ".config.json"});
}

TEST_CASE("config file values fill in for absent flags") {
  const std::string cat_flag = tmp("cli_cfg_flag.csv");
  const std::string cat_cfg = tmp("cli_cfg_file.csv");
  const std::string cat_mix = tmp("cli_cfg_mix.csv");
  const std::string cfg = tmp("cli_cfg.json");

  Json c = {{"n", 17}, {"seed", 3}, {"out", cat_cfg}};
  write_text_file(cfg, c.dump());
  REQUIRE(cli_dispatch({"gen-catalog", "--config", cfg}) == 0);
  CHECK(load_catalog(cat_cfg).size() == 17);

  // An explicit flag beats the config value for the same key.
  REQUIRE(cli_dispatch({"gen-catalog", "--config=" + cfg, "--n", "9", "--out",
                        cat_mix}) == 0);
  CHECK(load_catalog(cat_mix).size() == 9);

  // Flags alone and config alone resolve to the same artifact.
  REQUIRE(cli_dispatch({"gen-catalog", "--n", "17", "--seed", "3", "--out",
                        cat_flag}) == 0);
  CHECK(same_bytes(cat_flag, cat_cfg));

  // The config echo records resolved values, wherever they came from.
  Json echo = Json::parse(read_text_file(cat_cfg + ".config.json"));
  CHECK(echo.at("command") == "gen-catalog");
  CHECK(echo.at("n").get<int>() == 17);
  CHECK(echo.at("seed").get<uint64_t>() == 3);

  write_text_file(cfg, "[1, 2]");
  CHECK(cli_dispatch({"gen-catalog", "--config", cfg, "--out", cat_mix}) == 2);
  write_text_file(cfg, "{ not json");
  CHECK(cli_dispatch({"gen-catalog", "--config", cfg, "--out", cat_mix}) == 2);
  write_text_file(cfg, Json({{"n", "lots"}}).dump());
  CHECK(cli_dispatch({"gen-catalog", "--config", cfg, "--out", cat_mix}) == 2);
  CHECK(cli_dispatch({"gen-catalog", "--config"}) == 1);

  rm({cat_flag, cat_cfg, cat_mix, cfg, cat_flag + ".config.json",
      cat_cfg + ".config.json", cat_mix + ".config.json"});
}

TEST_CASE("the pipeline is byte deterministic in its seeds") {
  const std::string cat = make_catalog("cli_pipe.csv");
  const std::string ds1 = tmp("cli_pipe_a.bin"), ds2 = tmp("cli_pipe_b.bin");
  const std::string w1 = tmp("cli_pipe_a.w"), w2 = tmp("cli_pipe_b.w");
  const std::string s1 = tmp("cli_pipe_a.s"), s2 = tmp("cli_pipe_b.s");
  const std::string d1 = tmp("cli_pipe_a.designs.json");
  const std::string d2 = tmp("cli_pipe_b.designs.json");

  for (const auto& [ds, w] : {std::tie(ds1, w1), std::tie(ds2, w2)}) {
    REQUIRE(cli_dispatch({"gen-dataset", "--catalog", cat, "--count", "4", "--dims", "2",
                          "--side", "12", "--seed", "5", "--workers", "2", "--out",
                          ds}) == 0);
    REQUIRE(cli_dispatch({"train", "--dataset", ds, "--steps", "2", "--batch", "2",
                          "--seed", "11", "--init-seed", "7", "--out", w}) == 0);
  }
  CHECK(same_bytes(ds1, ds2));
  CHECK(same_bytes(w1, w2));
  CHECK(same_bytes(w1 + ".loss.json", w2 + ".loss.json"));

  // The samples file embeds its resolved arguments, so a byte comparison needs
  // two runs with identical paths.
  const std::vector<std::string> sample_args = {
      "sample", "--weights", w1, "--target-k", "8",  "--steps", "6",
      "--count", "2",         "--side", "12", "--seed", "9",
      "--workers", "2",       "--out",  s1};
  REQUIRE(cli_dispatch(sample_args) == 0);
  std::filesystem::copy_file(s1, s2);
  REQUIRE(cli_dispatch(sample_args) == 0);
  CHECK(same_bytes(s1, s2));

  const std::vector<std::string> bp_args = {"backproject", "--samples", s1,
                                            "--catalog", cat, "--out", d1};
  REQUIRE(cli_dispatch(bp_args) == 0);
  std::filesystem::copy_file(d1, d2);
  REQUIRE(cli_dispatch(bp_args) == 0);
  CHECK(same_bytes(d1, d2));

  // The samples file reloads with the shape and provenance it was written with.
  SamplesFile sf = load_samples(s1);
  CHECK(sf.dims == 2);
  CHECK(sf.nx == 12);
  CHECK(sf.ny == 12);
  CHECK(sf.nz == 1);
  REQUIRE(sf.chains.size() == 2);
  CHECK(sf.config.at("target-k").get<double>() == 8.0);
  for (const auto& c : sf.chains) {
    REQUIRE(c.x.data.size() == size_t(3) * 12 * 12);
    for (double v : c.x.data) {
      CHECK(std::isfinite(v));
      CHECK(std::abs(v) <= 1.0);
    }
  }

  // Training writes a loss value per step.
  Json loss = Json::parse(read_text_file(w1 + ".loss.json"));
  CHECK(loss.at("loss").size() == 2);
  for (const auto& v : loss.at("loss")) CHECK(std::isfinite(v.get<double>()));

  rm({cat, cat + ".config.json", ds1, ds2, w1, w2, s1, s2, d1, d2});
  for (const auto& p : {ds1, ds2, w1, w2, s1, s2, d1, d2})
    rm({p + ".config.json", p + ".loss.json"});
}

TEST_CASE("evaluate reports designs against a hand built designs file") {
  const std::string cat_path = make_catalog("cli_eval.csv");
  Catalog cat = load_catalog(cat_path);
  const std::string designs = tmp("cli_eval.designs.json");
  const std::string out1 = tmp("cli_eval_run1"), out2 = tmp("cli_eval_run2");

  const MaterialRecord m = cat.by_index(4);
  const MaterialRecord p = cat.by_index(9);
  Json design = {
      {"chain", 0},
      {"matrix", {{"id", m.id}, {"E", m.E}, {"nu", m.nu}, {"rho", m.rho}}},
      {"particle", {{"id", p.id}, {"E", p.E}, {"nu", p.nu}, {"rho", p.rho}}},
      {"r_p", 0.15},
      {"f_p", 0.2},
      {"particles", 3},
      {"V_m", 0.0},
      {"d_m", 0.0},
      {"K_s", 7.5}};
  Json dfile = {{"kind", "designs"},
                {"dims", 2},
                {"side", 12},
                {"target_k", 0.0},
                {"designs", Json::array({design})}};
  write_text_file(designs, dfile.dump(2) + "\n");

  // No target in the file and none on the command line is a validation error.
  CHECK(cli_dispatch({"evaluate", "--designs", designs, "--catalog", cat_path, "--out",
                      out1}) == 2);

  for (const auto& out : {out1, out2})
    REQUIRE(cli_dispatch({"evaluate", "--designs", designs, "--catalog", cat_path,
                          "--target-k", "7.5", "--repeats", "3", "--seed", "4", "--out",
                          out}) == 0);
  CHECK(same_bytes(out1 + ".csv", out2 + ".csv"));
  CHECK(same_bytes(out1 + ".summary.json", out2 + ".summary.json"));

  std::string csv = read_text_file(out1 + ".csv");
  CHECK(csv.rfind("chain,matrix_id,", 0) == 0);
  CHECK(csv.find("\n0," + std::to_string(m.id) + ",") != std::string::npos);

  Json summary = Json::parse(read_text_file(out1 + ".summary.json"));
  CHECK(summary.at("kind") == "evaluation");
  CHECK(summary.at("designs").get<int>() == 1);
  CHECK(summary.at("target_k").get<double>() == 7.5);
  REQUIRE(summary.at("frac_rel").size() == 2);
  for (const auto& v : summary.at("frac_rel")) {
    CHECK(v.get<double>() >= 0.0);
    CHECK(v.get<double>() <= 1.0);
  }
  CHECK(summary.at("coverage").get<double>() >= 0.0);
  CHECK(std::filesystem::exists(out1 + ".eps_r.svg"));
  CHECK(std::filesystem::exists(out1 + ".k.svg"));

  rm({cat_path, cat_path + ".config.json", designs});
  for (const auto& out : {out1, out2})
    rm({out + ".csv", out + ".summary.json", out + ".eps_r.svg", out + ".k.svg",
        out + ".config.json"});
}

TEST_CASE("targets command matches the library computation") {
  const std::string cat = make_catalog("cli_targets.csv");
  const std::string ds = tmp("cli_targets.bin");
  const std::string t1 = tmp("cli_targets1.json"), t2 = tmp("cli_targets2.json");
  REQUIRE(cli_dispatch({"gen-dataset", "--catalog", cat, "--count", "6", "--dims", "2",
                        "--side", "8", "--seed", "13", "--out", ds}) == 0);

  for (const auto& t : {t1, t2})
    REQUIRE(cli_dispatch({"targets", "--dataset", ds, "--count", "3", "--out", t}) == 0);
  CHECK(same_bytes(t1, t2));

  Json tj = Json::parse(read_text_file(t1));
  CHECK(tj.at("kind") == "targets");
  std::vector<double> got = tj.at("targets").get<std::vector<double>>();

  Dataset data = load_dataset(ds);
  std::vector<double> expect = select_targets(dataset_moduli(data), 3);
  REQUIRE(got.size() == expect.size());
  for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == expect[i]);

  CHECK(cli_dispatch({"targets", "--dataset", ds, "--count", "0", "--out", t2}) == 2);

  rm({cat, cat + ".config.json", ds, ds + ".config.json", t1, t2,
      t1 + ".config.json", t2 + ".config.json"});
}

TEST_CASE("bounds-check emits a validity report") {
  const std::string cat = make_catalog("cli_bounds.csv");
  const std::string rep = tmp("cli_bounds.json");
  REQUIRE(cli_dispatch({"bounds-check", "--catalog", cat, "--count", "3", "--dims", "3",
                        "--side", "4", "--seed", "2", "--out", rep}) == 0);
  Json j = Json::parse(read_text_file(rep));
  CHECK(j.at("kind") == "bounds");
  CHECK(j.at("count").get<int>() == 3);
  CHECK(j.at("fraction_outside").get<double>() >= 0.0);
  CHECK(j.at("fraction_outside").get<double>() <= 1.0);
  CHECK(j.at("max_rel_violation").get<double>() >= 0.0);
  rm({cat, cat + ".config.json", rep, rep + ".config.json"});
}
