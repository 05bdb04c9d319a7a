#include "endor/cli_io.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

using namespace endor;
using namespace endor::cli;
using nlohmann::json;

namespace {

const fs::path kConfigs = ENDOR_SOURCE_DIR "/configs";

json paper_json() {
  std::ifstream in(kConfigs / "paper.json");
  return json::parse(in, nullptr, true, true);
}

fs::path write_text(const fs::path& file, const std::string& text) {
  fs::create_directories(file.parent_path());
  std::ofstream(file, std::ios::binary) << text;
  return file;
}

fs::path write_config(const fs::path& dir, const json& doc) {
  return write_text(dir / "config.json", doc.dump(2));
}

RunReport run(const std::string& command, const fs::path& config, const fs::path& out,
              std::optional<fs::path> data = {}) {
  CommandOptions o;
  o.command = command;
  o.config = config;
  o.out_dir = out;
  o.data = std::move(data);
  return run_command(o);
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool mentions(const std::vector<std::string>& messages, const std::string& needle) {
  for (const auto& m : messages) {
    if (m.find(needle) != std::string::npos) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("levels: paper, I = 0 and zero field") {
  const fs::path dir = test::scratch_dir("cli-levels");
  const RunReport r = run("levels", kConfigs / "paper.json", dir / "paper");
  REQUIRE(r.exit_code == 0);
  const Table t = read_table(dir / "paper" / "levels.tsv");
  CHECK(t.rows.size() == 16);
  int lower = 0;
  for (const auto& row : t.rows) lower += t.number(row, t.column("mS")) < 0 ? 1 : 0;
  CHECK(lower == 8);
  CHECK(read_table(dir / "paper" / "nmr_lines.tsv").rows.size() == 14);

  json doc = paper_json();
  doc["spin_system"]["nuclear_spin"] = 0.0;
  doc["spin_system"].erase("a_matrix_mhz");
  const RunReport r0 = run("levels", write_config(dir / "i0", doc), dir / "i0");
  REQUIRE(r0.exit_code == 0);
  CHECK(read_table(dir / "i0" / "levels.tsv").rows.size() == 2);

  doc = paper_json();
  doc["field"]["magnitude_mT"] = 0.0;
  const RunReport rz = run("levels", write_config(dir / "zero", doc), dir / "zero");
  REQUIRE(rz.exit_code == 0);
  const Table z = read_table(dir / "zero" / "levels.tsv");
  double sum = 0.0;
  for (const auto& row : z.rows) sum += z.number(row, z.column("energy_MHz"));
  CHECK(std::abs(sum) < 1e-6);
  CHECK_FALSE(rz.warnings.empty());
}

TEST_CASE("spectrum: 18 peaks, empty window, doubled frequency") {
  const fs::path dir = test::scratch_dir("cli-spectrum");
  REQUIRE(run("spectrum", kConfigs / "paper.json", dir / "paper").exit_code == 0);
  const Table t = read_table(dir / "paper" / "peaks.tsv");
  CHECK(t.rows.size() == 18);
  int even = 0;
  bool near_458 = false;
  for (const auto& row : t.rows) {
    if (t.text(row, t.column("system")) == "even") {
      ++even;
      near_458 = near_458 || std::abs(t.number(row, t.column("field_mT")) - 458.2) < 10.0;
    }
  }
  CHECK(even == 2);
  CHECK(near_458);

  json doc = paper_json();
  doc["spectrometer"]["window_min_mT"] = 1.0;
  doc["spectrometer"]["window_max_mT"] = 20.0;
  const RunReport empty = run("spectrum", write_config(dir / "empty", doc), dir / "empty");
  CHECK(empty.exit_code == 0);
  CHECK_FALSE(empty.warnings.empty());
  CHECK(read_table(dir / "empty" / "peaks.tsv").rows.empty());

  // I = 0 is linear in the field: doubling f_mw doubles every peak field
  doc = paper_json();
  doc["spin_system"]["nuclear_spin"] = 0.0;
  doc["spin_system"].erase("a_matrix_mhz");
  doc["spectrometer"]["window_max_mT"] = 2000.0;
  REQUIRE(run("spectrum", write_config(dir / "single", doc), dir / "single").exit_code == 0);
  doc["spectrometer"]["f_mw_GHz"] = 2 * 9.56;
  REQUIRE(run("spectrum", write_config(dir / "double", doc), dir / "double").exit_code == 0);
  const Table a = read_table(dir / "single" / "peaks.tsv");
  const Table b = read_table(dir / "double" / "peaks.tsv");
  REQUIRE(a.rows.size() == b.rows.size());
  REQUIRE_FALSE(a.rows.empty());
  for (std::size_t k = 0; k < a.rows.size(); ++k) {
    CHECK(b.number(b.rows[k], b.column("field_mT")) ==
          doctest::Approx(2.0 * a.number(a.rows[k], a.column("field_mT"))).epsilon(1e-7));
  }
}

TEST_CASE("endor: predicted lines near the measured ones") {
  const fs::path dir = test::scratch_dir("cli-endor");
  REQUIRE(run("endor", kConfigs / "paper.json", dir).exit_code == 0);
  const Table t = read_table(dir / "endor_lines.tsv");
  std::map<double, std::vector<double>> by_manifold;
  for (const auto& row : t.rows) {
    by_manifold[t.number(row, t.column("manifold_mS"))].push_back(
        t.number(row, t.column("frequency_MHz")));
  }
  auto near = [&](double ms, double f) {
    for (double v : by_manifold[ms]) {
      if (std::abs(v - f) < 35.0) return true;
    }
    return false;
  };
  CHECK(near(-0.5, 212.4));
  CHECK(near(-0.5, 172.8));
  CHECK(near(0.5, 219.7));
  CHECK(near(0.5, 165.9));
  CHECK(read_table(dir / "davies.tsv").rows.size() > 1000);
}

TEST_CASE("fit-tensors round trip from a synthetic roadmap") {
  const fs::path dir = test::scratch_dir("cli-fit");
  const SpinSystem truth = test::paper_system();
  const Roadmap r = synthesize_roadmap(FitParams::from_tensors(truth.g, truth.a_mhz), 9.56,
                                       {50.0, 1000.0}, 15.0, 0.0, 1);
  std::ostringstream csv;
  csv << "plane,angle_deg,field_mT\n";
  csv.precision(17);
  for (const auto& rec : r.records) {
    for (double b : rec.fields_mT) csv << to_string(rec.plane) << ',' << rec.angle_deg << ',' << b << '\n';
  }
  const fs::path data = write_text(dir / "roadmap.csv", csv.str());

  json doc = paper_json();
  // start from tensors 3% off the truth
  for (auto& row : doc["spin_system"]["g_matrix"]) {
    for (auto& v : row) v = v.get<double>() * 1.03;
  }
  for (auto& row : doc["spin_system"]["a_matrix_mhz"]) {
    for (auto& v : row) v = v.get<double>() * 0.97;
  }
  doc["fit"] = {{"starts", 4}, {"refine", 1}, {"use_config_init", true}, {"model_step_deg", 10}};
  const RunReport rep = run("fit-tensors", write_config(dir, doc), dir / "out", data);
  REQUIRE(rep.exit_code == 0);
  const json report = json::parse(slurp(dir / "out" / "fit_report.json"));
  CHECK(report["residual_gauss"].get<double>() < 0.1);
  CHECK(report["converged"].get<bool>());
  const Table res = read_table(dir / "out" / "residuals.tsv");
  CHECK(res.rows.size() == r.point_count());
  CHECK(read_table(dir / "out" / "model_roadmap.tsv").rows.size() > 100);
}

TEST_CASE("fit-relaxation evaluation with the paper constants") {
  const fs::path dir = test::scratch_dir("cli-relax");
  REQUIRE(run("fit-relaxation", kConfigs / "paper.json", dir).exit_code == 0);
  const json report = json::parse(slurp(dir / "relaxation_report.json"));
  CHECK(report["mode"] == "evaluate");
  CHECK(std::abs(report["zeeman_temperature_K"].get<double>() - 0.459) <= 0.002);

  const Table t = read_table(dir / "relaxation_curves.tsv");
  CHECK(t.rows.size() == 200);
  std::vector<double> temp, ratio;
  for (const auto& row : t.rows) {
    temp.push_back(t.number(row, t.column("temperature_K")));
    ratio.push_back(t.number(row, t.column("t1n_rate_per_s")) /
                    t.number(row, t.column("t1e_rate_per_s")));
    const double sum = t.number(row, t.column("t1n_electron_per_s")) +
                       t.number(row, t.column("t1n_direct_per_s")) +
                       t.number(row, t.column("t1n_raman_per_s")) +
                       t.number(row, t.column("t1n_orbach_per_s"));
    CHECK(sum == doctest::Approx(t.number(row, t.column("t1n_rate_per_s"))).epsilon(1e-9));
  }
  CHECK(temp.front() == doctest::Approx(0.05));
  CHECK(temp.back() == doctest::Approx(6.0));
  // the rate ratio climbs steeply below the Zeeman temperature and levels off
  // above it; the knee is where it reaches 90% of its plateau
  const double plateau = *std::max_element(ratio.begin(), ratio.end());
  double knee = 0.0;
  for (std::size_t k = 0; k < ratio.size(); ++k) {
    if (ratio[k] >= 0.9 * plateau) {
      knee = temp[k];
      break;
    }
  }
  INFO("knee at " << knee << " K");
  CHECK(knee > 0.3);
  CHECK(knee < 0.65);
  CHECK(ratio.front() < 0.1 * plateau);
}

TEST_CASE("fit-relaxation reports the line of a malformed CSV row") {
  const fs::path dir = test::scratch_dir("cli-relax-bad");
  const fs::path data = write_text(dir / "rates.csv",
                                   "temperature_K,value_s,kind\n2.0,0.5,t1e\n2.5,oops,t1e\n");
  const RunReport r = run("fit-relaxation", kConfigs / "paper.json", dir / "out", data);
  CHECK(r.exit_code == 1);
  CHECK(mentions(r.errors, "rates.csv:3"));
  CHECK(fs::exists(dir / "out" / "run_report.json"));
}

TEST_CASE("fit-decay on a synthetic Mims curve") {
  const fs::path dir = test::scratch_dir("cli-decay");
  std::ostringstream csv;
  csv << "two_tau_s,amplitude\n";
  csv.precision(17);
  for (int i = 1; i <= 40; ++i) {
    const double t = 6e-3 * i / 40.0;
    csv << t << ',' << std::exp(-std::pow(t / 2.18e-3, 1.42)) << '\n';
  }
  const fs::path data = write_text(dir / "decay.csv", csv.str());
  REQUIRE(run("fit-decay", kConfigs / "paper.json", dir / "out", data).exit_code == 0);
  const json report = json::parse(slurp(dir / "out" / "decay_fit.json"));
  CHECK(report["model"] == "mims");
  CHECK(report["t2_s"].get<double>() == doctest::Approx(2.18e-3).epsilon(1e-6));
  CHECK(report["m"].get<double>() == doctest::Approx(1.42).epsilon(1e-6));
  CHECK(read_table(dir / "out" / "decay_curve.tsv").rows.size() == 200);
}

TEST_CASE("simulate-seq: mS assignment presence and absence") {
  const fs::path dir = test::scratch_dir("cli-seq");
  REQUIRE(run("simulate-seq", kConfigs / "paper.json", dir, kConfigs / "ms_assignment.json").exit_code ==
          0);
  const Table t = read_table(dir / "sweep.tsv");
  std::map<double, double> echo;
  double top = 0.0;
  for (const auto& row : t.rows) {
    const double e = t.number(row, t.column("echo_amplitude"));
    echo[t.number(row, t.column("sweep_value"))] = e;
    top = std::max(top, e);
  }
  CHECK(echo.at(215.32) > 0.5 * top);
  CHECK(echo.at(162.13) > 0.5 * top);
  for (double f : {190.0, 221.08, 255.72, 262.77}) CHECK(echo.at(f) < 0.02);
}

TEST_CASE("simulate-seq: readout alone gives the thermal EPR polarization") {
  const fs::path dir = test::scratch_dir("cli-readout");
  REQUIRE(run("levels", kConfigs / "paper.json", dir / "levels").exit_code == 0);
  REQUIRE(run("simulate-seq", kConfigs / "paper.json", dir / "seq", kConfigs / "readout_only.json")
              .exit_code == 0);
  const Table lv = read_table(dir / "levels" / "levels.tsv");
  // Boltzmann weights from the written energies at 100 mK
  const double h_over_kt = 6.62607015e-34 / 1.380649e-23 / 0.1 * 1e6;
  std::map<std::pair<double, double>, double> w;
  double z = 0.0;
  for (const auto& row : lv.rows) {
    const double e = lv.number(row, lv.column("energy_MHz"));
    const double p = std::exp(-e * h_over_kt);
    w[{lv.number(row, lv.column("mS")), lv.number(row, lv.column("mI"))}] = p;
    z += p;
  }
  const double want = (w[{-0.5, 1.5}] - w[{0.5, 1.5}]) / z;
  const Table e = read_table(dir / "seq" / "echo.tsv");
  REQUIRE(e.rows.size() == 1);
  CHECK(e.number(e.rows[0], 0) == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("assemble: levels round trip through the NMR line list") {
  const fs::path dir = test::scratch_dir("cli-assemble");
  REQUIRE(run("levels", kConfigs / "paper.json", dir / "levels").exit_code == 0);
  const Table lv = read_table(dir / "levels" / "levels.tsv");
  std::map<std::pair<double, double>, double> energy;
  for (const auto& row : lv.rows) {
    energy[{lv.number(row, lv.column("mS")), lv.number(row, lv.column("mI"))}] =
        lv.number(row, lv.column("energy_MHz"));
  }
  const double lower = energy[{-0.5, 1.5}];
  json doc = paper_json();
  doc["assembly"] = {{"epr_GHz", (energy[{0.5, 1.5}] - lower) / 1000.0},
                     {"mi_star", 1.5},
                     {"reference_MHz", lower}};
  REQUIRE(run("assemble", write_config(dir, doc), dir / "out", dir / "levels" / "nmr_lines.tsv")
              .exit_code == 0);
  const Table d = read_table(dir / "out" / "diagram.tsv");
  REQUIRE(d.rows.size() == 16);
  for (const auto& row : d.rows) {
    const double got = d.number(row, d.column("energy_MHz"));
    const double want = energy[{d.number(row, d.column("mS")), d.number(row, d.column("mI"))}];
    CHECK(got == doctest::Approx(want).epsilon(1e-9).scale(1e3));
  }
  CHECK(json::parse(slurp(dir / "out" / "assembly.json"))["complete"].get<bool>());
}

TEST_CASE("identical inputs give byte-identical tables") {
  const fs::path dir = test::scratch_dir("cli-determinism");
  for (const std::string cmd : {"levels", "spectrum", "endor", "fit-relaxation"}) {
    REQUIRE(run(cmd, kConfigs / "paper.json", dir / (cmd + "-a")).exit_code == 0);
    const RunReport b = run(cmd, kConfigs / "paper.json", dir / (cmd + "-b"));
    for (const auto& file : b.outputs) {
      CHECK(slurp(dir / (cmd + "-a") / file) == slurp(dir / (cmd + "-b") / file));
    }
  }
}

TEST_CASE("config validation: unit suffixes and unknown keys") {
  const fs::path dir = test::scratch_dir("cli-validate");
  json doc = paper_json();
  doc["field"].erase("magnitude_mT");
  doc["field"]["magnitude_GHz"] = 402.7;
  RunReport r = run("levels", write_config(dir / "suffix", doc), dir / "suffix");
  CHECK(r.exit_code == 1);
  CHECK(mentions(r.errors, "magnitude_GHz"));
  CHECK(mentions(r.errors, "unit suffix"));

  doc = paper_json();
  doc["environment"]["colour"] = "blue";
  r = run("levels", write_config(dir / "unknown", doc), dir / "unknown");
  CHECK(r.exit_code == 1);
  CHECK(mentions(r.errors, "colour"));

  doc = paper_json();
  doc["paths"] = {{"data", "missing.csv"}};
  r = run("levels", write_config(dir / "missing", doc), dir / "missing");
  CHECK(r.exit_code == 1);
  CHECK(mentions(r.errors, "missing.csv"));
}

TEST_CASE("every command writes a run report listing existing outputs") {
  const fs::path dir = test::scratch_dir("cli-reports");
  struct Case {
    std::string command;
    std::optional<fs::path> data;
  };
  REQUIRE(run("levels", kConfigs / "paper.json", dir / "lv").exit_code == 0);
  const fs::path decay = write_text(dir / "decay.csv",
                                    "two_tau_s,amplitude\n1,0.9\n2,0.8\n3,0.7\n4,0.62\n5,0.55\n"
                                    "6,0.49\n7,0.44\n8,0.39\n");
  const std::vector<Case> cases{{"levels", {}},
                                {"spectrum", {}},
                                {"endor", {}},
                                {"fit-relaxation", {}},
                                {"fit-decay", decay},
                                {"simulate-seq", kConfigs / "davies.json"},
                                {"assemble", dir / "lv" / "nmr_lines.tsv"}};
  for (const Case& c : cases) {
    const fs::path out = dir / c.command;
    const RunReport r = run(c.command, kConfigs / "paper.json", out, c.data);
    INFO(c.command);
    CHECK(r.exit_code == 0);
    CHECK(r.errors.empty());
    CHECK_FALSE(r.outputs.empty());
    for (const auto& f : r.outputs) CHECK(fs::exists(out / f));
    const json saved = json::parse(slurp(out / "run_report.json"));
    CHECK(saved["command"] == c.command);
    CHECK(saved["inputs_digest"].get<std::string>().size() == 16);
  }

  const RunReport missing = run("fit-tensors", kConfigs / "paper.json", dir / "nodata");
  CHECK(missing.exit_code == 1);
  CHECK(fs::exists(dir / "nodata" / "run_report.json"));
}

TEST_CASE("table reader: delimiters, comments and errors") {
  const fs::path dir = test::scratch_dir("cli-table");
  const Table tsv = read_table(write_text(dir / "a.tsv", "# x\ty\n1\t2\n\n# note\n3\t4\n"));
  CHECK(tsv.header == std::vector<std::string>{"x", "y"});
  CHECK(tsv.rows.size() == 2);
  CHECK(tsv.rows[1].line == 5);
  const Table csv = read_table(write_text(dir / "b.csv", "x,y\n1,2\n"));
  CHECK(csv.number(csv.rows[0], csv.column("y")) == 2.0);
  CHECK_THROWS_AS(csv.column("z"), InputError);
  CHECK_THROWS_AS(read_table(dir / "nope.csv"), InputError);

  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(std::nan("")) == "nan");
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
}
