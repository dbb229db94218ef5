#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <unistd.h>
#include <sys/wait.h>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "mbres/config.hpp"
#include "mbres/csv.hpp"
#include "mbres/rng.hpp"

using namespace mbres;
namespace fs = std::filesystem;

namespace {

#ifndef MBRES_CLI_PATH
#error "MBRES_CLI_PATH must point at the CLI binary"
#endif

struct Scratch {
  fs::path dir;
  Scratch() {
    dir = fs::temp_directory_path() /
          ("mbres_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  ~Scratch() { std::error_code ec; fs::remove_all(dir, ec); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

int run(const std::string& args, const std::string& out_file,
        const std::string& err_file) {
  const std::string cmd = std::string(MBRES_CLI_PATH) + " " + args + " > " +
                          out_file + " 2> " + err_file;
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path);
  f << content;
}

const char* kConfig = R"(# reference configuration
material.Tc_K      = 1.34
material.tau0_ns   = 30
baseline.fres0_GHz = 6.837
baseline.Qi0       = 980
baseline.Qc        = 828
baseline.alpha     = 0.17
run.Tref_mK        = 10
run.seed           = 7
)";

} // namespace

TEST_SUITE("cli") {

TEST_CASE("config: units and values") {
  std::stringstream ss(kConfig);
  const io::RunConfig c = io::RunConfig::from_keyvalues(io::KeyValues::parse(ss));
  CHECK(c.material.Tc_K == doctest::Approx(1.34));
  CHECK(c.material.tau0_s == doctest::Approx(30e-9));
  CHECK(c.baseline.fres0_Hz == doctest::Approx(6.837e9));
  CHECK(c.Tref_K == doctest::Approx(0.010));
  CHECK(c.seed == 7);
  CHECK_FALSE(c.material.N0_per_J_m3.has_value());
}

TEST_CASE("config: N0 unit conversion and validation errors") {
  {
    std::stringstream ss(std::string(kConfig) + "material.N0_per_eV_um3 = 1.72e10\n");
    const io::RunConfig c = io::RunConfig::from_keyvalues(io::KeyValues::parse(ss));
    REQUIRE(c.material.N0_per_J_m3.has_value());
    CHECK(*c.material.N0_per_J_m3 ==
          doctest::Approx(1.72e10 / (constants::e_charge * 1e-18)).epsilon(1e-12));
  }
  {
    std::stringstream ss("material.Tc_K = -1\nmaterial.tau0_ns = 30\n");
    CHECK_THROWS(io::RunConfig::from_keyvalues(io::KeyValues::parse(ss)));
  }
  {
    // both _K and _mK present for the same quantity
    std::stringstream ss(std::string(kConfig) + "material.Tc_mK = 1340\n");
    CHECK_THROWS(io::RunConfig::from_keyvalues(io::KeyValues::parse(ss)));
  }
  {
    std::stringstream ss("material.Tc_K = 1.34\n");
    CHECK_THROWS_WITH_AS(io::RunConfig::from_keyvalues(io::KeyValues::parse(ss)),
                         doctest::Contains("material.tau0"), std::runtime_error);
  }
}

TEST_CASE("csv: write/read roundtrip is value-exact") {
  rng::SeededRng g(404);
  io::Table t;
  t.columns = {"a", "b", "c"};
  t.metadata.emplace_back("seed", "404");
  t.metadata.emplace_back("rng", rng::algorithm_id);
  for (int i = 0; i < 50; ++i) {
    const double x = std::ldexp(g.uniform01() - 0.5, static_cast<int>(40 * g.uniform01()) - 20);
    t.add_row({static_cast<double>(i), x, g.gaussian()});
  }
  std::stringstream ss;
  io::write_csv(ss, t);
  const io::Table back = io::read_csv(ss);
  REQUIRE(back.columns == t.columns);
  REQUIRE(back.rows.size() == t.rows.size());
  for (size_t i = 0; i < t.rows.size(); ++i)
    for (size_t j = 0; j < 3; ++j) CHECK(back.rows[i][j] == t.rows[i][j]);
  REQUIRE(back.meta("seed") != nullptr);
  CHECK(*back.meta("seed") == "404");
}

TEST_CASE("csv: schema and sweep validation") {
  std::stringstream ss("a,b\n1,2\n3,4\n");
  const io::Table t = io::read_csv(ss);
  CHECK_NOTHROW(io::expect_columns(t, {"a", "b"}));
  CHECK_THROWS_AS(io::expect_columns(t, {"a", "c"}), std::runtime_error);
  CHECK_NOTHROW(io::validate_sweep(t));

  std::stringstream bad("a,b\n3,2\n1,4\n");
  const io::Table tb = io::read_csv(bad);
  CHECK_THROWS_AS(io::validate_sweep(tb), std::runtime_error);

  std::stringstream nan("a,b\n1,nan\n2,4\n");
  const io::Table tn = io::read_csv(nan);
  CHECK_THROWS_AS(io::validate_sweep(tn), std::runtime_error);

  std::stringstream ragged("a,b\n1,2,3\n");
  CHECK_THROWS_AS(io::read_csv(ragged), std::runtime_error);
}

TEST_CASE("binary: --version is machine readable") {
  Scratch sc;
  const int rc = run("--version", sc.path("out"), sc.path("err"));
  CHECK(rc == 0);
  CHECK(slurp(sc.path("out")) == "mbres 0.1.0\n");
}

TEST_CASE("binary: malformed config gives exit 2 and a diagnostic") {
  Scratch sc;
  write_file(sc.path("bad.cfg"), "material.Tc_K = -1\nmaterial.tau0_ns = 30\n");
  const int rc = run("response --config " + sc.path("bad.cfg") +
                         " --tmin 0.1 --tmax 0.9",
                     sc.path("out"), sc.path("err"));
  CHECK(rc == 2);
  CHECK(slurp(sc.path("err")).find("error:") != std::string::npos);
  CHECK(slurp(sc.path("out")).empty());
}

TEST_CASE("binary: response -> teff schema roundtrip") {
  Scratch sc;
  write_file(sc.path("run.cfg"), kConfig);
  REQUIRE(run("response --config " + sc.path("run.cfg") +
                  " --tmin 0.1 --tmax 0.9 --n 10 --out " + sc.path("resp.csv"),
              sc.path("o1"), sc.path("e1")) == 0);

  const io::Table resp = io::read_csv_file(sc.path("resp.csv"));
  io::expect_columns(resp, {"T_K", "dff", "dinvQ", "fres_Hz", "Qi"});
  io::validate_sweep(resp);

  REQUIRE(run("teff --config " + sc.path("run.cfg") + " --in " + sc.path("resp.csv") +
                  " --out " + sc.path("teff.csv"),
              sc.path("o2"), sc.path("e2")) == 0);
  const io::Table teff = io::read_csv_file(sc.path("teff.csv"));
  io::expect_columns(teff, {"x", "dinvQ", "Teff_K", "dff_pred"});
  REQUIRE(teff.rows.size() == resp.rows.size());
  for (size_t i = 0; i < teff.rows.size(); ++i) {
    CHECK(std::fabs(teff.rows[i][2] - resp.rows[i][0]) < 1e-5);
    const double dff = resp.rows[i][1];
    if (dff != 0.0)
      CHECK(std::fabs(teff.rows[i][3] - dff) / std::fabs(dff) < 1e-9);
  }
}

TEST_CASE("binary: teff flags out-of-range rows, continues, exits 3") {
  Scratch sc;
  write_file(sc.path("run.cfg"), kConfig);
  write_file(sc.path("meas.csv"), "x,dinvQ\n1,0\n2,1e-4\n3,0.9\n4,2e-4\n");
  const int rc = run("teff --config " + sc.path("run.cfg") + " --in " +
                         sc.path("meas.csv") + " --out " + sc.path("teff.csv"),
                     sc.path("o"), sc.path("e"));
  CHECK(rc == 3);
  const io::Table t = io::read_csv_file(sc.path("teff.csv"));
  CHECK(t.rows.size() == 3); // row x=3 skipped
  CHECK(slurp(sc.path("e")).find("skipped") != std::string::npos);
  for (const auto& row : t.rows) CHECK(row[0] != 3.0);
}

TEST_CASE("binary: gen s21 determinism and truth header") {
  Scratch sc;
  const std::string gen = "gen s21 --units f=GHz --fres 6.837 --qi 980 --qc 828 "
                          "--n 101 --snr-db 40";
  REQUIRE(run(gen + " --seed 5 --out " + sc.path("a.csv"), sc.path("o"), sc.path("e")) == 0);
  REQUIRE(run(gen + " --seed 5 --out " + sc.path("b.csv"), sc.path("o"), sc.path("e")) == 0);
  REQUIRE(run(gen + " --seed 6 --out " + sc.path("c.csv"), sc.path("o"), sc.path("e")) == 0);
  const std::string a = slurp(sc.path("a.csv"));
  const std::string b = slurp(sc.path("b.csv"));
  const std::string c = slurp(sc.path("c.csv"));
  CHECK(a == b);        // byte-identical for equal seeds
  CHECK(a != c);        // different noise for a different seed
  const io::Table ta = io::read_csv_file(sc.path("a.csv"));
  const io::Table tc = io::read_csv_file(sc.path("c.csv"));
  REQUIRE(ta.meta("truth.Qi") != nullptr);
  CHECK(*ta.meta("truth.Qi") == *tc.meta("truth.Qi")); // identical truth header
  CHECK(*ta.meta("rng") == std::string(rng::algorithm_id));
}

TEST_CASE("binary: gen s21 with infinite SNR is the exact model") {
  Scratch sc;
  REQUIRE(run("gen s21 --units f=GHz --fres 6.837 --qi 980 --qc 828 --n 64 --out " +
                  sc.path("clean.csv"),
              sc.path("o"), sc.path("e")) == 0);
  const io::Table t = io::read_csv_file(sc.path("clean.csv"));
  REQUIRE(t.meta("snr_dB") != nullptr);
  CHECK(*t.meta("snr_dB") == "inf");
  // spot check: far-from-resonance transmission is ~1
  CHECK(std::fabs(std::hypot(t.rows.front()[1], t.rows.front()[2]) - 1.0) < 0.1);
}

TEST_CASE("binary: gen response feeds fit mb (identity recovery)") {
  Scratch sc;
  write_file(sc.path("run.cfg"), kConfig);
  REQUIRE(run("gen response --config " + sc.path("run.cfg") +
                  " --tmin 0.1 --tmax 0.9 --n 20 --out " + sc.path("resp.csv"),
              sc.path("o"), sc.path("e")) == 0);
  REQUIRE(run("fit mb --config " + sc.path("run.cfg") + " --in " + sc.path("resp.csv") +
                  " --out " + sc.path("fit.txt"),
              sc.path("o"), sc.path("e")) == 0);
  const std::string rec = slurp(sc.path("fit.txt"));
  double alpha = 0.0, tc = 0.0;
  std::stringstream ss(rec);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.rfind("param.alpha = ", 0) == 0) alpha = std::stod(line.substr(14));
    if (line.rfind("param.Tc_K = ", 0) == 0) tc = std::stod(line.substr(13));
  }
  CHECK(alpha == doctest::Approx(0.17).epsilon(1e-4));
  CHECK(tc == doctest::Approx(1.34).epsilon(1e-4));
}

TEST_CASE("binary: fit circle consumes gen s21 output directly") {
  Scratch sc;
  REQUIRE(run("gen s21 --units f=GHz,t=ns --fres 6.837 --qi 980 --qc 828 --delay 50 "
              "--n 201 --out " + sc.path("s21.csv"),
              sc.path("o"), sc.path("e")) == 0);
  REQUIRE(run("fit circle --in " + sc.path("s21.csv") + " --out " + sc.path("fit.txt") +
                  " --residuals " + sc.path("res.csv"),
              sc.path("o"), sc.path("e")) == 0);
  const std::string rec = slurp(sc.path("fit.txt"));
  double qi = 0.0;
  std::stringstream ss(rec);
  std::string line;
  while (std::getline(ss, line))
    if (line.rfind("param.Qi = ", 0) == 0) qi = std::stod(line.substr(11));
  CHECK(qi == doctest::Approx(980.0).epsilon(1e-6));
  const io::Table res = io::read_csv_file(sc.path("res.csv"));
  io::expect_columns(res, {"freq_Hz", "re", "im", "model_re", "model_im"});
  CHECK(res.rows.size() == 201);
}

TEST_CASE("binary: tauqp generic mode consumes an nqp column") {
  Scratch sc;
  write_file(sc.path("run.cfg"),
             std::string(kConfig) + "material.N0_per_eV_um3 = 1.72e10\n");
  write_file(sc.path("nqp.csv"), "nqp_per_m3\n1e18\n2e18\n");
  REQUIRE(run("tauqp --config " + sc.path("run.cfg") + " --in " + sc.path("nqp.csv") +
                  " --out " + sc.path("tau.csv"),
              sc.path("o"), sc.path("e")) == 0);
  const io::Table t = io::read_csv_file(sc.path("tau.csv"));
  io::expect_columns(t, {"nqp_per_m3", "tauqp_s"});
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0][1] > 0.0);
  // doubling the density halves the recombination time
  CHECK(t.rows[0][1] == doctest::Approx(2.0 * t.rows[1][1]).epsilon(1e-12));
}

TEST_CASE("binary: sidebands report f3dB in the table metadata") {
  Scratch sc;
  write_file(sc.path("run.cfg"),
             "material.Tc_K = 1.34\nmaterial.tau0_ns = 30\n"
             "baseline.fres0_GHz = 6.837\nbaseline.Qi0 = 300\nbaseline.Qc = 300\n"
             "baseline.alpha = 0.17\n");
  REQUIRE(run("sidebands --config " + sc.path("run.cfg") +
                  " --units t=ns --tau-eff 50 --fg-min 1e5 --fg-max 25e6 --n 80 "
                  "--out " + sc.path("sb.csv"),
              sc.path("o"), sc.path("e")) == 0);
  const io::Table t = io::read_csv_file(sc.path("sb.csv"));
  io::expect_columns(t, {"fg_Hz", "amp_rel_dB"});
  REQUIRE(t.meta("f3dB_Hz") != nullptr);
  const double f3 = std::stod(*t.meta("f3dB_Hz"));
  CHECK(f3 > 2.9e6);
  CHECK(f3 < 3.4e6);
}

TEST_CASE("binary: simulate feeds the fitters end to end") {
  Scratch sc;
  write_file(sc.path("sim.cfg"),
             "material.Tc_K = 1.34\nmaterial.tau0_ns = 30\n"
             "baseline.fres0_GHz = 6.811\nbaseline.Qi0 = 860\nbaseline.Qc = 828\n"
             "baseline.alpha = 0.17\n"
             "sequence.trigger_period_us = 5\nsequence.readout_start_us = 0.6\n"
             "sequence.readout_duration_us = 4\nsequence.gate_start_us = 2\n"
             "sequence.gate_duration_ns = 800\nsequence.gate_amplitude_V = 0.25\n"
             "sequence.gate_bias_V = 21\nsequence.dt_ns = 0.5\n"
             "gate.tauR_ns = 100\ngate.tauF_ns = 100\ngate.biastee_fc_kHz = 40\n"
             "gate.dfres_dVg_Hz_per_V = -6e6\ngate.dQi_dVg_per_V = -40\n");
  REQUIRE(run("simulate --config " + sc.path("sim.cfg") +
                  " --fro-center 6.811e9 --fro-span 60e6 --fro-n 15 --out-prefix " +
                  sc.path("run"),
              sc.path("o"), sc.path("e")) == 0);

  // Lorentzian over a pre-gate vertical cut of the map
  REQUIRE(run("fit lorentzian --in " + sc.path("run_map.csv") +
                  " --units t=ns --at 1900 --quantity power --out " + sc.path("lor.txt"),
              sc.path("o"), sc.path("e")) == 0);
  double fstar = 0.0;
  {
    std::stringstream ss(slurp(sc.path("lor.txt")));
    std::string line;
    while (std::getline(ss, line))
      if (line.rfind("param.f_star_Hz = ", 0) == 0) fstar = std::stod(line.substr(18));
  }
  CHECK(fstar == doctest::Approx(6.811e9).epsilon(1e-5));

  // ring-up time constant from the resonant trace (trace 007 = center)
  REQUIRE(run("fit exp --in " + sc.path("run_trace_007.csv") +
                  " --units t=ns --t0 600 --tmax 1100 --out " + sc.path("exp.txt"),
              sc.path("o"), sc.path("e")) == 0);
  double tau = 0.0;
  {
    std::stringstream ss(slurp(sc.path("exp.txt")));
    std::string line;
    while (std::getline(ss, line))
      if (line.rfind("param.tau_s = ", 0) == 0) tau = std::stod(line.substr(14));
  }
  const double QL = 1.0 / (1.0 / 860.0 + 1.0 / 828.0);
  CHECK(tau == doctest::Approx(QL / (mbres::constants::pi * 6.811e9)).epsilon(0.05));

  // gate-edge fit-back: rising edge of the positive pulse
  REQUIRE(run("fit exp --in " + sc.path("run_trace_007.csv") +
                  " --units t=ns --t0 2042 --tmax 2795 --out " + sc.path("edge.txt"),
              sc.path("o"), sc.path("e")) == 0);
  double tau_edge = 0.0;
  {
    std::stringstream ss(slurp(sc.path("edge.txt")));
    std::string line;
    while (std::getline(ss, line))
      if (line.rfind("param.tau_s = ", 0) == 0) tau_edge = std::stod(line.substr(14));
  }
  CHECK(tau_edge == doctest::Approx(100e-9).epsilon(0.10));
}

TEST_CASE("binary: data goes to stdout without --out") {
  Scratch sc;
  write_file(sc.path("run.cfg"), kConfig);
  REQUIRE(run("conductivity --config " + sc.path("run.cfg") +
                  " --tmin 0.2 --tmax 1.0 --n 5",
              sc.path("o"), sc.path("e")) == 0);
  const std::string out = slurp(sc.path("o"));
  CHECK(out.find("T_K,s1,s2") != std::string::npos);
  std::stringstream ss(out);
  const io::Table t = io::read_csv(ss);
  CHECK(t.rows.size() == 5);
  // monotone columns end-to-end
  for (size_t i = 1; i < t.rows.size(); ++i) {
    CHECK(t.rows[i][1] > t.rows[i - 1][1]);
    CHECK(t.rows[i][2] < t.rows[i - 1][2]);
  }
}

} // TEST_SUITE
