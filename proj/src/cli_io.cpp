#include "endor/cli_io.hpp"

#include "endor/constants.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <variant>

namespace endor::cli {

using nlohmann::json;
using constants::kDegree;

namespace {

// ---------------------------------------------------------------- config ---

// Longest first so "_per_s" wins over "_s" and "_mT" over "_T".
const std::vector<std::string> kUnitSuffixes = {
    "_per_s", "_mhz", "_MHz", "_GHz", "_kHz", "_Hz", "_mT", "_mK", "_ms", "_us",
    "_ns",    "_deg", "_rad", "_T",   "_G",   "_K",  "_s"};

std::string unit_stem(const std::string& key) {
  for (const auto& suffix : kUnitSuffixes) {
    if (key.size() > suffix.size() && key.ends_with(suffix)) {
      return key.substr(0, key.size() - suffix.size());
    }
  }
  return {};
}

void check_keys(const json& obj, const std::string& where, const std::vector<std::string>& allowed) {
  if (!obj.is_object()) throw InputError(where + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) != allowed.end()) continue;
    const std::string stem = unit_stem(key);
    if (!stem.empty()) {
      for (const auto& known : allowed) {
        if (unit_stem(known) == stem) {
          throw InputError(where + "." + key + ": wrong unit suffix, expected " + where + "." +
                           known);
        }
      }
    }
    throw InputError(where + "." + key + ": unknown key");
  }
}

double number_at(const json& obj, const std::string& where, const std::string& key,
                 double fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) throw InputError(where + "." + key + ": expected a number");
  return v.get<double>();
}

double required_number(const json& obj, const std::string& where, const std::string& key) {
  if (!obj.contains(key)) throw InputError(where + "." + key + ": missing");
  return number_at(obj, where, key, 0.0);
}

std::optional<double> optional_number(const json& obj, const std::string& where,
                                      const std::string& key) {
  if (!obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
  return number_at(obj, where, key, 0.0);
}

int integer_at(const json& obj, const std::string& where, const std::string& key, int fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) throw InputError(where + "." + key + ": expected an integer");
  return v.get<int>();
}

bool bool_at(const json& obj, const std::string& where, const std::string& key, bool fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_boolean()) throw InputError(where + "." + key + ": expected true or false");
  return v.get<bool>();
}

std::string string_at(const json& obj, const std::string& where, const std::string& key,
                      const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) throw InputError(where + "." + key + ": expected a string");
  return v.get<std::string>();
}

// 9 numbers row-major, or three rows of three.
Tensor3 matrix_at(const json& obj, const std::string& where, const std::string& key) {
  const json& v = obj.at(key);
  std::vector<double> flat;
  auto push = [&](const json& x) {
    if (!x.is_number()) throw InputError(where + "." + key + ": entries must be numbers");
    flat.push_back(x.get<double>());
  };
  if (!v.is_array()) throw InputError(where + "." + key + ": expected 9 numbers");
  for (const auto& item : v) {
    if (item.is_array()) {
      for (const auto& x : item) push(x);
    } else {
      push(item);
    }
  }
  if (flat.size() != 9) throw InputError(where + "." + key + ": expected 9 numbers");
  Tensor3 t;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) t(r, c) = flat[3 * r + c];
  }
  return t;
}

const json& block(const json& doc, const std::string& name) {
  static const json empty = json::object();
  return doc.contains(name) ? doc.at(name) : empty;
}

void parse_environment(const json& e, const std::string& where, Environment& env) {
  check_keys(e, where, {"temperature_K", "t1e_s", "t1n_s", "cross_relaxation_s"});
  env.temperature_K = number_at(e, where, "temperature_K", env.temperature_K);
  env.t1e_s = number_at(e, where, "t1e_s", env.t1e_s);
  // JSON has no infinity; null or a missing key keeps the process off.
  if (auto v = optional_number(e, where, "t1n_s")) env.t1n_s = *v;
  if (auto v = optional_number(e, where, "cross_relaxation_s")) env.cross_relaxation_s = *v;
  if (!(env.temperature_K >= 0.0)) throw InputError(where + ".temperature_K: must be >= 0");
  if (!(env.t1e_s > 0.0)) throw InputError(where + ".t1e_s: must be > 0");
  if (!(env.t1n_s > 0.0)) throw InputError(where + ".t1n_s: must be > 0");
  if (!(env.cross_relaxation_s > 0.0)) {
    throw InputError(where + ".cross_relaxation_s: must be > 0");
  }
}

fs::path resolve_path(const json& obj, const std::string& key, const fs::path& base) {
  fs::path p = string_at(obj, "paths", key, "");
  if (p.is_relative()) p = base / p;
  if (!fs::exists(p)) throw InputError("paths." + key + ": file not found: " + p.string());
  return p;
}

}  // namespace

ProjectConfig parse_config(const json& doc, const fs::path& base_dir) {
  check_keys(doc, "config",
             {"description", "spin_system", "field", "spectrometer", "environment", "endor", "fit",
              "relaxation", "decay", "assembly", "paths"});
  ProjectConfig cfg;

  if (!doc.contains("spin_system")) throw InputError("spin_system: missing");
  const json& ss = doc.at("spin_system");
  check_keys(ss, "spin_system", {"nuclear_spin", "g_matrix", "a_matrix_mhz", "label"});
  cfg.system.nuclear_spin = required_number(ss, "spin_system", "nuclear_spin");
  if (!ss.contains("g_matrix")) throw InputError("spin_system.g_matrix: missing");
  cfg.system.g = matrix_at(ss, "spin_system", "g_matrix");
  if (ss.contains("a_matrix_mhz")) {
    cfg.system.a_mhz = matrix_at(ss, "spin_system", "a_matrix_mhz");
  } else if (cfg.system.nuclear_spin > 0.0) {
    throw InputError("spin_system.a_matrix_mhz: missing");
  }
  cfg.system.label = string_at(ss, "spin_system", "label", "");
  try {
    cfg.system.validate();
  } catch (const Error& e) {
    throw InputError(std::string("spin_system: ") + e.what());
  }

  const json& f = block(doc, "field");
  check_keys(f, "field", {"magnitude_mT", "theta_deg", "phi_deg"});
  cfg.field.magnitude_mT = number_at(f, "field", "magnitude_mT", 0.0);
  cfg.field.theta_deg = number_at(f, "field", "theta_deg", 0.0);
  cfg.field.phi_deg = number_at(f, "field", "phi_deg", 0.0);
  if (!(cfg.field.magnitude_mT >= 0.0)) throw InputError("field.magnitude_mT: must be >= 0");

  const json& sp = block(doc, "spectrometer");
  check_keys(sp, "spectrometer",
             {"f_mw_GHz", "window_min_mT", "window_max_mT", "grid_mT", "moment_threshold",
              "linewidth_mT", "lineshape", "root_search", "trace_step_mT"});
  auto& s = cfg.spectrometer;
  s.f_mw_GHz = number_at(sp, "spectrometer", "f_mw_GHz", s.f_mw_GHz);
  s.window.min_mT = number_at(sp, "spectrometer", "window_min_mT", s.window.min_mT);
  s.window.max_mT = number_at(sp, "spectrometer", "window_max_mT", s.window.max_mT);
  s.grid_mT = number_at(sp, "spectrometer", "grid_mT", s.grid_mT);
  s.moment_threshold = number_at(sp, "spectrometer", "moment_threshold", s.moment_threshold);
  s.linewidth_mT = number_at(sp, "spectrometer", "linewidth_mT", s.linewidth_mT);
  s.trace_step_mT = number_at(sp, "spectrometer", "trace_step_mT", s.trace_step_mT);
  const std::string shape = string_at(sp, "spectrometer", "lineshape", "gaussian");
  if (shape == "gaussian") {
    s.lineshape = LineShape::Gaussian;
  } else if (shape == "lorentzian") {
    s.lineshape = LineShape::Lorentzian;
  } else {
    throw InputError("spectrometer.lineshape: expected gaussian or lorentzian");
  }
  const std::string search = string_at(sp, "spectrometer", "root_search", "scan");
  if (search == "scan") {
    s.root_search = RootSearch::Scan;
  } else if (search == "tracked") {
    s.root_search = RootSearch::Tracked;
  } else {
    throw InputError("spectrometer.root_search: expected scan or tracked");
  }
  if (!(s.f_mw_GHz > 0.0)) throw InputError("spectrometer.f_mw_GHz: must be > 0");
  if (!(s.window.min_mT >= 0.0 && s.window.max_mT > s.window.min_mT)) {
    throw InputError("spectrometer: window_max_mT must exceed window_min_mT >= 0");
  }
  if (!(s.grid_mT > 0.0 && s.trace_step_mT > 0.0 && s.linewidth_mT > 0.0)) {
    throw InputError("spectrometer: grid_mT, trace_step_mT and linewidth_mT must be > 0");
  }

  parse_environment(block(doc, "environment"), "environment", cfg.environment);

  const json& en = block(doc, "endor");
  check_keys(en, "endor",
             {"rf_min_MHz", "rf_max_MHz", "rf_step_MHz", "electron_polarization",
              "mixing_angle_deg"});
  cfg.endor.rf_min_MHz = optional_number(en, "endor", "rf_min_MHz");
  cfg.endor.rf_max_MHz = optional_number(en, "endor", "rf_max_MHz");
  cfg.endor.rf_step_MHz = number_at(en, "endor", "rf_step_MHz", cfg.endor.rf_step_MHz);
  cfg.endor.electron_polarization = optional_number(en, "endor", "electron_polarization");
  cfg.endor.mixing_angle_deg = number_at(en, "endor", "mixing_angle_deg", 180.0);
  if (!(cfg.endor.rf_step_MHz > 0.0)) throw InputError("endor.rf_step_MHz: must be > 0");
  if (auto pe = cfg.endor.electron_polarization; pe && !(*pe >= -1.0 && *pe <= 1.0)) {
    throw InputError("endor.electron_polarization: must lie in [-1, 1]");
  }

  const json& fb = block(doc, "fit");
  check_keys(fb, "fit",
             {"starts", "refine", "use_config_init", "init_jitter", "fit_plane_offsets",
              "max_offset_deg", "g_min", "g_max", "a_min_MHz", "a_max_MHz", "model_step_deg"});
  auto& fc = cfg.fit;
  fc.starts = integer_at(fb, "fit", "starts", fc.starts);
  fc.refine = integer_at(fb, "fit", "refine", fc.refine);
  fc.use_config_init = bool_at(fb, "fit", "use_config_init", fc.use_config_init);
  fc.init_jitter = number_at(fb, "fit", "init_jitter", fc.init_jitter);
  fc.fit_plane_offsets = bool_at(fb, "fit", "fit_plane_offsets", fc.fit_plane_offsets);
  fc.max_offset_deg = number_at(fb, "fit", "max_offset_deg", fc.max_offset_deg);
  fc.g_range = {number_at(fb, "fit", "g_min", fc.g_range[0]),
                number_at(fb, "fit", "g_max", fc.g_range[1])};
  fc.a_range_MHz = {number_at(fb, "fit", "a_min_MHz", fc.a_range_MHz[0]),
                    number_at(fb, "fit", "a_max_MHz", fc.a_range_MHz[1])};
  fc.model_step_deg = number_at(fb, "fit", "model_step_deg", fc.model_step_deg);
  if (fc.starts < 1 || fc.refine < 1) throw InputError("fit: starts and refine must be >= 1");
  if (!(fc.model_step_deg > 0.0)) throw InputError("fit.model_step_deg: must be > 0");

  const json& rb = block(doc, "relaxation");
  check_keys(rb, "relaxation", {"t1e", "t1n", "grid_min_K", "grid_max_K", "grid_points"});
  auto& rc = cfg.relaxation;
  rc.t1e.a_d = 1.0 / 17.0;
  rc.t1e.f_r_GHz = cfg.spectrometer.f_mw_GHz;
  rc.t1n.sigma = 0.126;
  rc.t1n.gamma_d = 7.3e-5;
  rc.t1n.gamma_r = 0.0;
  rc.t1n.gamma_o = 1e-32;
  rc.t1n.f_n_MHz = 212.4;
  rc.t1n.f_r_GHz = cfg.spectrometer.f_mw_GHz;
  if (rb.contains("t1e")) {
    const json& t = rb.at("t1e");
    const std::string w = "relaxation.t1e";
    check_keys(t, w, {"a_d_per_s", "a_r", "a_o_per_s", "delta_o_K", "f_r_GHz"});
    rc.t1e.a_d = number_at(t, w, "a_d_per_s", rc.t1e.a_d);
    rc.t1e.a_r = number_at(t, w, "a_r", rc.t1e.a_r);
    rc.t1e.a_o = number_at(t, w, "a_o_per_s", rc.t1e.a_o);
    rc.t1e.delta_o_K = number_at(t, w, "delta_o_K", rc.t1e.delta_o_K);
    rc.t1e.f_r_GHz = number_at(t, w, "f_r_GHz", rc.t1e.f_r_GHz);
  }
  if (rb.contains("t1n")) {
    const json& t = rb.at("t1n");
    const std::string w = "relaxation.t1n";
    check_keys(t, w, {"sigma", "gamma_d_per_s", "gamma_r", "gamma_o", "f_n_MHz", "f_r_GHz"});
    rc.t1n.sigma = number_at(t, w, "sigma", rc.t1n.sigma);
    rc.t1n.gamma_d = number_at(t, w, "gamma_d_per_s", rc.t1n.gamma_d);
    rc.t1n.gamma_r = number_at(t, w, "gamma_r", rc.t1n.gamma_r);
    rc.t1n.gamma_o = number_at(t, w, "gamma_o", rc.t1n.gamma_o);
    rc.t1n.f_n_MHz = number_at(t, w, "f_n_MHz", rc.t1n.f_n_MHz);
    rc.t1n.f_r_GHz = number_at(t, w, "f_r_GHz", rc.t1n.f_r_GHz);
  }
  rc.grid_min_K = number_at(rb, "relaxation", "grid_min_K", rc.grid_min_K);
  rc.grid_max_K = number_at(rb, "relaxation", "grid_max_K", rc.grid_max_K);
  rc.grid_points = integer_at(rb, "relaxation", "grid_points", rc.grid_points);
  try {
    rc.t1e.validate();
    rc.t1n.validate();
  } catch (const Error& e) {
    throw InputError(std::string("relaxation: ") + e.what());
  }
  if (!(rc.grid_min_K > 0.0 && rc.grid_max_K > rc.grid_min_K && rc.grid_points >= 2)) {
    throw InputError("relaxation: need 0 < grid_min_K < grid_max_K and grid_points >= 2");
  }

  const json& db = block(doc, "decay");
  check_keys(db, "decay", {"model", "sigma", "curve_points"});
  const std::string model = string_at(db, "decay", "model", "mims");
  if (model == "mims") {
    cfg.decay.model = DecayModel::Mims;
  } else if (model == "exponential") {
    cfg.decay.model = DecayModel::Exponential;
  } else if (model == "inversion_recovery") {
    cfg.decay.model = DecayModel::InversionRecovery;
  } else {
    throw InputError("decay.model: expected mims, exponential or inversion_recovery");
  }
  cfg.decay.sigma = optional_number(db, "decay", "sigma");
  cfg.decay.curve_points = integer_at(db, "decay", "curve_points", cfg.decay.curve_points);
  if (cfg.decay.curve_points < 2) throw InputError("decay.curve_points: must be >= 2");

  const json& ab = block(doc, "assembly");
  check_keys(ab, "assembly", {"epr_GHz", "mi_star", "reference_MHz"});
  cfg.assembly.anchor.epr_GHz = number_at(ab, "assembly", "epr_GHz", cfg.spectrometer.f_mw_GHz);
  cfg.assembly.anchor.mi_star = number_at(ab, "assembly", "mi_star", 1.5);
  cfg.assembly.reference_MHz = number_at(ab, "assembly", "reference_MHz", 0.0);

  const json& pb = block(doc, "paths");
  check_keys(pb, "paths", {"data", "sequence"});
  if (pb.contains("data")) cfg.data = resolve_path(pb, "data", base_dir);
  if (pb.contains("sequence")) cfg.sequence = resolve_path(pb, "sequence", base_dir);
  return cfg;
}

namespace {

std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw InputError(file.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json_file(const fs::path& file) {
  const std::string text = read_file(file);
  try {
    return json::parse(text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw InputError(file.string() + ": " + e.what());
  }
}

}  // namespace

ProjectConfig load_config(const fs::path& file) {
  const json doc = parse_json_file(file);
  try {
    return parse_config(doc, file.parent_path());
  } catch (const InputError& e) {
    throw InputError(file.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- tables ---

namespace {

std::string trim(std::string_view s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string_view::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return std::string(s.substr(begin, end - begin + 1));
}

std::vector<std::string> split(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    out.push_back(trim(std::string_view(line).substr(start, pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string where(const Table& t, int line) { return t.source.string() + ":" + std::to_string(line); }

}  // namespace

std::optional<std::size_t> Table::find(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  return std::nullopt;
}

std::size_t Table::column(const std::string& name) const {
  if (auto i = find(name)) return *i;
  throw InputError(source.string() + ": missing column '" + name + "'");
}

double Table::number(const Row& row, std::size_t col) const {
  const std::string& cell = text(row, col);
  double v = 0.0;
  const char* first = cell.data();
  const char* last = first + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw InputError(where(*this, row.line) + ": column '" + header[col] +
                     "': not a finite number: '" + cell + "'");
  }
  return v;
}

const std::string& Table::text(const Row& row, std::size_t col) const {
  if (col >= row.cells.size()) {
    throw InputError(where(*this, row.line) + ": missing value for column '" + header[col] + "'");
  }
  return row.cells[col];
}

Table read_table(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw InputError(file.string() + ": cannot open");
  Table t;
  t.source = file;
  char delim = ',';
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::string body = trim(line);
    if (body.empty()) continue;
    if (t.header.empty()) {
      if (body.front() == '#') body = trim(std::string_view(body).substr(1));
      delim = body.find('\t') != std::string::npos ? '\t' : ',';
      t.header = split(body, delim);
      continue;
    }
    if (body.front() == '#') continue;
    Table::Row row{number, split(body, delim)};
    if (row.cells.size() != t.header.size()) {
      throw InputError(where(t, number) + ": expected " + std::to_string(t.header.size()) +
                       " fields, found " + std::to_string(row.cells.size()));
    }
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw InputError(file.string() + ": empty file");
  return t;
}

Roadmap read_roadmap(const fs::path& file, double f_mw_GHz, ScanWindow window) {
  const Table t = read_table(file);
  const auto c_plane = t.column("plane");
  const auto c_angle = t.column("angle_deg");
  const auto c_field = t.column("field_mT");
  std::map<std::pair<int, double>, RoadmapRecord> records;
  for (const auto& row : t.rows) {
    Plane plane;
    try {
      plane = parse_plane(t.text(row, c_plane));
    } catch (const Error& e) {
      throw InputError(where(t, row.line) + ": " + e.what());
    }
    const double angle = t.number(row, c_angle);
    const double field = t.number(row, c_field);
    if (!(angle >= 0.0 && angle < 180.0)) {
      throw InputError(where(t, row.line) + ": angle_deg must lie in [0, 180)");
    }
    if (!(field > 0.0)) throw InputError(where(t, row.line) + ": field_mT must be > 0");
    auto& rec = records[{static_cast<int>(plane), angle}];
    rec.plane = plane;
    rec.angle_deg = angle;
    rec.fields_mT.push_back(field);
  }
  Roadmap data;
  data.f_mw_GHz = f_mw_GHz;
  data.window = window;
  for (auto& [key, rec] : records) {
    std::sort(rec.fields_mT.begin(), rec.fields_mT.end());
    data.records.push_back(std::move(rec));
  }
  try {
    data.validate();
  } catch (const Error& e) {
    throw InputError(file.string() + ": " + e.what());
  }
  return data;
}

std::vector<RateRow> read_rates(const fs::path& file) {
  const Table t = read_table(file);
  const auto c_t = t.column("temperature_K");
  const auto c_v = t.column("value_s");
  const auto c_k = t.column("kind");
  std::vector<RateRow> out;
  for (const auto& row : t.rows) {
    RateRow r;
    const std::string& kind = t.text(row, c_k);
    if (kind == "T1e" || kind == "t1e") {
      r.kind = RateModel::T1e;
    } else if (kind == "T1n" || kind == "t1n") {
      r.kind = RateModel::T1n;
    } else {
      throw InputError(where(t, row.line) + ": kind must be T1e or T1n, got '" + kind + "'");
    }
    r.sample.temperature_K = t.number(row, c_t);
    const double value = t.number(row, c_v);
    if (!(r.sample.temperature_K > 0.0) || !(value > 0.0)) {
      throw InputError(where(t, row.line) + ": temperature_K and value_s must be > 0");
    }
    r.sample.rate_per_s = 1.0 / value;
    out.push_back(r);
  }
  return out;
}

DecayCurve read_decay(const fs::path& file) {
  const Table t = read_table(file);
  const auto c_t = t.column("two_tau_s");
  const auto c_a = t.column("amplitude");
  DecayCurve d;
  for (const auto& row : t.rows) {
    d.two_tau_s.push_back(t.number(row, c_t));
    d.amplitude.push_back(t.number(row, c_a));
  }
  try {
    d.validate();
  } catch (const Error& e) {
    throw InputError(file.string() + ": " + e.what());
  }
  return d;
}

std::vector<AssemblyStep> read_steps(const fs::path& file) {
  const Table t = read_table(file);
  const auto c_ms = t.column("mS");
  const auto c_mi = t.column("mI_from");
  const auto c_f = t.column("frequency_MHz");
  const auto c_sign = t.find("sign");
  std::vector<AssemblyStep> out;
  for (const auto& row : t.rows) {
    AssemblyStep s;
    s.ms = t.number(row, c_ms);
    s.mi_from = t.number(row, c_mi);
    s.frequency_MHz = t.number(row, c_f);
    if (c_sign) s.sign = t.number(row, *c_sign);
    if (std::abs(std::abs(s.ms) - 0.5) > 1e-9) {
      throw InputError(where(t, row.line) + ": ms must be -0.5 or 0.5");
    }
    if (std::abs(std::abs(s.sign) - 1.0) > 1e-9) {
      throw InputError(where(t, row.line) + ": sign must be -1 or 1");
    }
    if (!(s.frequency_MHz >= 0.0)) {
      throw InputError(where(t, row.line) + ": frequency_MHz must be >= 0");
    }
    out.push_back(s);
  }
  return out;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) return "0";  // folds -0
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

TsvWriter::TsvWriter(const fs::path& file, const std::vector<std::string>& columns)
    : out_(file, std::ios::binary), file_(file), columns_(columns.size()) {
  if (!out_) throw Error(file.string() + ": cannot write");
  out_ << "# ";
  for (std::size_t i = 0; i < columns.size(); ++i) out_ << (i ? "\t" : "") << columns[i];
  out_ << '\n';
}

void TsvWriter::separator() {
  if (filled_ == columns_) throw Error(file_.string() + ": too many fields in row");
  if (filled_ > 0) out_ << '\t';
  ++filled_;
}

TsvWriter& TsvWriter::operator<<(double v) {
  separator();
  out_ << format_number(v);
  return *this;
}

TsvWriter& TsvWriter::operator<<(int v) {
  separator();
  out_ << v;
  return *this;
}

TsvWriter& TsvWriter::operator<<(const std::string& v) {
  separator();
  out_ << v;
  return *this;
}

void TsvWriter::end_row() {
  if (filled_ != columns_) throw Error(file_.string() + ": incomplete row");
  out_ << '\n';
  filled_ = 0;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

json RunReport::to_json() const {
  return json{{"command", command},
              {"inputs_digest", inputs_digest},
              {"outputs", outputs},
              {"warnings", warnings},
              {"errors", errors},
              {"non_convergence", non_convergence},
              {"wall_time_s", wall_time_s},
              {"exit_code", exit_code}};
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"levels",         "spectrum",       "endor",
                                                 "fit-tensors",    "fit-relaxation", "fit-decay",
                                                 "simulate-seq",   "assemble"};
  return names;
}

// -------------------------------------------------------------- commands ---

namespace {

struct Run {
  const ProjectConfig& cfg;
  const CommandOptions& opt;
  RunReport& report;
  int& convergence_failures;

  void not_converged(const std::string& msg) {
    report.non_convergence = true;
    report.errors.push_back(msg);
    ++convergence_failures;
  }

  fs::path output(const std::string& name) {
    report.outputs.push_back(name);
    return opt.out_dir / name;
  }
  void warn(const std::string& msg) {
    spdlog::warn("{}", msg);
    report.warnings.push_back(msg);
  }
  void write_json(const std::string& name, const json& doc) {
    const fs::path file = opt.out_dir / name;
    std::ofstream out(file, std::ios::binary);
    if (!out) throw Error(file.string() + ": cannot write");
    out << doc.dump(2) << '\n';
    report.outputs.push_back(name);
  }
  fs::path data_file(const std::optional<fs::path>& fallback, const char* what) const {
    if (opt.data) return *opt.data;
    if (fallback) return *fallback;
    throw InputError(std::string("no ") + what + " file: pass --data or set paths in the config");
  }
};

json tensor_json(const Tensor3& t) {
  json rows = json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({t(r, 0), t(r, 1), t(r, 2)});
  return rows;
}

json principal_json(const Tensor3& t) {
  const PrincipalForm p = principal_from_tensor(t);
  return json{{"values", {p.values[0], p.values[1], p.values[2]}},
              {"euler_zyz_deg", {p.euler_zyz_deg[0], p.euler_zyz_deg[1], p.euler_zyz_deg[2]}},
              {"trace", t.trace()},
              {"degenerate", p.degenerate}};
}

void require_field(const ProjectConfig& cfg) {
  if (!(cfg.field.magnitude_mT > 0.0)) throw InputError("field.magnitude_mT: must be > 0 here");
}

void cmd_levels(Run& run) {
  const auto& cfg = run.cfg;
  const EnergyLevels raw = eigenlevels(build_hamiltonian(cfg.system, cfg.field));
  std::optional<EnergyLevels> labeled;
  if (cfg.field.magnitude_mT > 0.0) {
    labeled = label_levels(raw, cfg.system, cfg.field);
    if (!labeled->labels_reliable) {
      run.warn("level labels unreliable (smallest tracking overlap " +
               format_number(labeled->min_tracking_overlap) + ")");
    }
  } else {
    run.warn("zero field: levels are not labeled");
  }
  const EnergyLevels& lv = labeled ? *labeled : raw;

  TsvWriter levels(run.output("levels.tsv"), {"index", "mS", "mI", "energy_MHz"});
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double ms = labeled ? lv.labels[i].ms : std::nan("");
    const double mi = labeled ? lv.labels[i].mi : std::nan("");
    levels << static_cast<int>(i) << ms << mi << lv.energies_mhz[i];
    levels.end_row();
  }

  TsvWriter lines(run.output("nmr_lines.tsv"),
                  {"mS", "mI_from", "mI_to", "frequency_MHz", "sign", "level_from", "level_to"});
  if (!labeled) return;
  for (const auto& s : steps_from_levels(lv, cfg.system.nuclear_spin)) {
    const int from = lv.index_of(s.ms, s.mi_from);
    const int to = lv.index_of(s.ms, s.mi_from + 1.0);
    lines << s.ms << s.mi_from << s.mi_from + 1.0 << s.frequency_MHz << s.sign << from << to;
    lines.end_row();
  }
}

void cmd_spectrum(Run& run) {
  const auto& cfg = run.cfg;
  const auto& sp = cfg.spectrometer;
  const Vec3 dir = cfg.field.direction();
  ResonanceOptions ro;
  ro.grid_mT = sp.grid_mT;
  ro.moment_threshold = sp.moment_threshold;
  ro.method = sp.root_search;

  SpinSystem odd = cfg.system;
  if (odd.label.empty()) odd.label = odd.nuclear_spin > 0.0 ? "odd" : "even";
  std::vector<ResonancePeak> peaks = class_pair_fields(odd, dir, sp.f_mw_GHz, sp.window, ro);
  if (cfg.system.nuclear_spin > 0.0) {
    SpinSystem even = even_isotope(cfg.system);
    even.label = "even";
    auto more = class_pair_fields(even, dir, sp.f_mw_GHz, sp.window, ro);
    peaks.insert(peaks.end(), more.begin(), more.end());
  }
  std::stable_sort(peaks.begin(), peaks.end(),
                   [](const auto& a, const auto& b) { return a.field_mT < b.field_mT; });
  if (peaks.empty()) run.warn("no resonances inside the scan window");

  TsvWriter table(run.output("peaks.tsv"),
                  {"class_id", "i", "j", "field_mT", "moment", "frequency_GHz", "system"});
  for (const auto& p : peaks) {
    table << p.class_id << p.i << p.j << p.field_mT << p.moment << p.frequency_GHz << p.system;
    table.end_row();
  }

  std::vector<double> grid;
  const int n = static_cast<int>(std::floor(sp.window.width() / sp.trace_step_mT + 1e-9)) + 1;
  for (int k = 0; k < n; ++k) grid.push_back(sp.window.min_mT + k * sp.trace_step_mT);
  const auto trace = stick_to_lineshape(peaks, sp.linewidth_mT, sp.lineshape, grid);
  TsvWriter tr(run.output("trace.tsv"), {"field_mT", "intensity"});
  for (std::size_t k = 0; k < grid.size(); ++k) {
    tr << grid[k] << trace[k];
    tr.end_row();
  }
}

LevelPopulations initial_populations(const SimulationContext& ctx, std::optional<double> pe) {
  if (pe) return electron_polarized_populations(ctx.levels, *pe);
  return thermal_populations(ctx.levels, ctx.environment.temperature_K);
}

void cmd_endor(Run& run) {
  const auto& cfg = run.cfg;
  require_field(cfg);
  const auto lines = endor_frequencies(cfg.system, cfg.field);
  if (lines.empty()) {
    run.warn("no NMR transitions (nuclear_spin is 0)");
  }
  TsvWriter table(run.output("endor_lines.tsv"),
                  {"manifold_mS", "mI_from", "mI_to", "frequency_MHz", "moment",
                   "gradient_MHz_per_T", "level_from", "level_to"});
  bool unreliable = false;
  for (const auto& l : lines) {
    const FieldGradient g = nmr_field_gradient(cfg.system, cfg.field, l);
    if (g.disagreement) {
      run.warn("gradient estimates disagree for line at " + format_number(l.frequency_MHz) +
               " MHz");
    }
    unreliable = unreliable || !l.labels_reliable;
    table << l.manifold_ms << l.mi_from << l.mi_to << l.frequency_MHz << l.moment
          << g.mhz_per_T << l.level_from << l.level_to;
    table.end_row();
  }
  if (unreliable) run.warn("level labels unreliable at this field");
  if (lines.empty()) return;

  const auto ctx = SimulationContext::create(cfg.system, cfg.field, cfg.environment);
  const Transition epr = ctx.nearest_epr(cfg.spectrometer.f_mw_GHz);
  const auto initial = initial_populations(ctx, cfg.endor.electron_polarization);
  double lo = lines.front().frequency_MHz, hi = lo;
  for (const auto& l : lines) {
    lo = std::min(lo, l.frequency_MHz);
    hi = std::max(hi, l.frequency_MHz);
  }
  lo = cfg.endor.rf_min_MHz.value_or(std::max(0.0, lo - 10.0));
  hi = cfg.endor.rf_max_MHz.value_or(hi + 10.0);
  if (!(hi > lo)) throw InputError("endor: rf_max_MHz must exceed rf_min_MHz");
  std::vector<double> sweep;
  const int n = static_cast<int>(std::floor((hi - lo) / cfg.endor.rf_step_MHz + 1e-9)) + 1;
  for (int k = 0; k < n; ++k) sweep.push_back(lo + k * cfg.endor.rf_step_MHz);
  const auto trace = run_davies_endor(ctx, initial, {epr.lower, epr.upper}, sweep,
                                      cfg.endor.mixing_angle_deg * kDegree);
  TsvWriter tr(run.output("davies.tsv"), {"rf_MHz", "echo"});
  for (const auto& p : trace) {
    tr << p.x << p.echo;
    tr.end_row();
  }
}

const char* plane_name(Plane p) {
  switch (p) {
    case Plane::bD1: return "bD1";
    case Plane::D1D2: return "D1D2";
    case Plane::bD2: return "bD2";
  }
  return "?";
}

void cmd_fit_tensors(Run& run) {
  const auto& cfg = run.cfg;
  const fs::path file = run.data_file(cfg.data, "roadmap");
  const Roadmap data = read_roadmap(file, cfg.spectrometer.f_mw_GHz, cfg.spectrometer.window);

  FitOptions fo;
  fo.objective.nuclear_spin = cfg.system.nuclear_spin;
  fo.objective.threads = run.opt.threads;
  fo.objective.resonance.grid_mT = cfg.spectrometer.grid_mT;
  fo.starts = cfg.fit.starts;
  fo.refine = cfg.fit.refine;
  fo.seed = run.opt.seed;
  fo.init_jitter = cfg.fit.init_jitter;
  fo.g_range = cfg.fit.g_range;
  fo.a_range_mhz = cfg.fit.a_range_MHz;
  fo.fit_plane_offsets = cfg.fit.fit_plane_offsets;
  fo.max_offset_deg = cfg.fit.max_offset_deg;
  std::optional<FitParams> init;
  if (cfg.fit.use_config_init) init = FitParams::from_tensors(cfg.system.g, cfg.system.a_mhz);

  spdlog::info("fitting {} records ({} points), {} starts", data.records.size(),
               data.point_count(), fo.starts);
  const FitResult r = fit(data, init, fo);
  if (r.underdetermined) {
    run.warn("fit is underdetermined (condition number " + format_number(r.condition_number) +
             "); add planes or angles");
  }
  if (r.unmatched > 0) {
    run.warn(std::to_string(r.unmatched) + " points without a simulated partner");
  }
  if (!r.converged) {
    run.not_converged("tensor fit did not converge: " + r.stop_reason);
  }

  const Tensor3 g = r.best.g();
  const Tensor3 a = r.best.a_mhz();
  json report{{"objective_mT2", r.objective},
              {"residual_gauss", r.residual_gauss},
              {"n_points", r.n_points},
              {"unmatched", r.unmatched},
              {"iterations", r.iterations},
              {"converged", r.converged},
              {"stop_reason", r.stop_reason},
              {"underdetermined", r.underdetermined},
              {"condition_number", r.condition_number},
              {"g_matrix", tensor_json(g)},
              {"a_matrix_mhz", tensor_json(a)},
              {"g_principal", principal_json(g)},
              {"a_principal_MHz", principal_json(a)},
              {"plane_offset_deg",
               {{"bD1", r.best.plane_offset_deg[0]},
                {"D1D2", r.best.plane_offset_deg[1]},
                {"bD2", r.best.plane_offset_deg[2]}}}};
  run.write_json("fit_report.json", report);

  const auto rows = residual_report(r.best, data, fo.objective);
  TsvWriter res(run.output("residuals.tsv"),
                {"plane", "angle_deg", "peak_index", "experimental_mT", "simulated_mT",
                 "deviation_G", "matched"});
  for (const auto& row : rows) {
    res << std::string(plane_name(row.plane)) << row.angle_deg << row.peak_index
        << row.experimental_mT << row.simulated_mT << row.deviation_gauss
        << static_cast<int>(row.matched);
    res.end_row();
  }

  std::set<Plane> planes;
  for (const auto& rec : data.records) planes.insert(rec.plane);
  TsvWriter model(run.output("model_roadmap.tsv"),
                  {"plane", "angle_deg", "peak_index", "field_mT"});
  const int n = static_cast<int>(std::ceil(180.0 / cfg.fit.model_step_deg - 1e-9));
  for (Plane p : planes) {
    for (int k = 0; k < n; ++k) {
      const double angle = k * cfg.fit.model_step_deg;
      const auto fields = simulate_sorted_fields(r.best, data, p, angle, fo.objective);
      for (std::size_t i = 0; i < fields.size(); ++i) {
        model << std::string(plane_name(p)) << angle << static_cast<int>(i) << fields[i];
        model.end_row();
      }
    }
  }
}

json rate_fit_json(const RateFit& f) {
  json params = json::object();
  for (std::size_t i = 0; i < f.names.size(); ++i) params[f.names[i]] = f.params[i];
  return json{{"parameters", params},
              {"rms_log", f.rms_log},
              {"converged", f.converged},
              {"iterations", f.iterations},
              {"stop_reason", f.stop_reason}};
}

void cmd_fit_relaxation(Run& run) {
  const auto& cfg = run.cfg;
  const auto& rc = cfg.relaxation;
  T1eParams t1e = rc.t1e;
  RelaxParams t1n = rc.t1n;

  const bool have_data = run.opt.data || cfg.data;
  json report{{"mode", have_data ? "fit" : "evaluate"}};
  if (have_data) {
    const auto rows = read_rates(run.data_file(cfg.data, "rates"));
    std::vector<RateSample> e_samples, n_samples;
    for (const auto& r : rows) (r.kind == RateModel::T1e ? e_samples : n_samples).push_back(r.sample);
    if (e_samples.empty() && n_samples.empty()) throw InputError("rates file holds no samples");

    RateFitOptions base;
    base.f_r_GHz = rc.t1e.f_r_GHz;
    base.f_n_MHz = rc.t1n.f_n_MHz;
    TsvWriter res(run.output("relaxation_residuals.tsv"),
                  {"kind", "temperature_K", "data_rate_per_s", "model_rate_per_s", "log_residual"});
    auto fit_one = [&](RateModel kind, const std::vector<RateSample>& samples) {
      RateFitOptions o = base;
      o.electron = t1e;
      const RateFit f = fit_rate_model(samples, kind, o);
      const std::string name = kind == RateModel::T1e ? "T1e" : "T1n";
      if (!f.converged) {
        run.not_converged(name + " fit did not converge: " + f.stop_reason);
      }
      for (std::size_t i = 0; i < samples.size(); ++i) {
        res << name << samples[i].temperature_K << samples[i].rate_per_s
            << f.rate(samples[i].temperature_K) << f.log_residuals[static_cast<Eigen::Index>(i)];
        res.end_row();
      }
      report[name] = rate_fit_json(f);
      return f;
    };
    if (!e_samples.empty()) t1e = fit_one(RateModel::T1e, e_samples).t1e();
    if (!n_samples.empty()) t1n = fit_one(RateModel::T1n, n_samples).t1n();
  }
  report["t1e_model"] = {{"a_d_per_s", t1e.a_d},
                         {"a_r", t1e.a_r},
                         {"a_o_per_s", t1e.a_o},
                         {"delta_o_K", t1e.delta_o_K},
                         {"f_r_GHz", t1e.f_r_GHz}};
  report["t1n_model"] = {{"sigma", t1n.sigma},
                         {"gamma_d_per_s", t1n.gamma_d},
                         {"gamma_r", t1n.gamma_r},
                         {"gamma_o", t1n.gamma_o},
                         {"f_n_MHz", t1n.f_n_MHz},
                         {"f_r_GHz", t1n.f_r_GHz}};
  report["zeeman_temperature_K"] = zeeman_temperature(t1n.f_r_GHz);
  run.write_json("relaxation_report.json", report);

  TsvWriter curves(run.output("relaxation_curves.tsv"),
                   {"temperature_K", "polarization", "t1e_rate_per_s", "t1e_direct_per_s",
                    "t1e_raman_per_s", "t1e_orbach_per_s", "t1n_rate_per_s",
                    "t1n_electron_per_s", "t1n_direct_per_s", "t1n_raman_per_s",
                    "t1n_orbach_per_s", "t1n_s"});
  const double l0 = std::log(rc.grid_min_K);
  const double l1 = std::log(rc.grid_max_K);
  for (int k = 0; k < rc.grid_points; ++k) {
    const double T = std::exp(l0 + (l1 - l0) * k / (rc.grid_points - 1));
    const T1eTerms e = t1e_terms(T, t1e);
    const T1nTerms n = t1n_rate(T, t1n, e.total);
    curves << T << polarization(T, t1n.f_r_GHz) << e.total << e.direct << e.raman << e.orbach
           << n.total << n.electron << n.direct << n.raman << n.orbach << 1.0 / n.total;
    curves.end_row();
  }
}

void cmd_fit_decay(Run& run) {
  const auto& cfg = run.cfg;
  const DecayCurve d = read_decay(run.data_file(cfg.data, "decay"));
  std::function<double(double)> model;
  json report;
  if (cfg.decay.model == DecayModel::Mims) {
    const MimsFit f = mims_fit(d);
    report = {{"model", "mims"},         {"e0", f.e0},         {"t2_s", f.t2_s},
              {"m", f.m},                {"e0_err", f.e0_err}, {"t2_err_s", f.t2_err},
              {"m_err", f.m_err},        {"converged", f.converged}};
    if (!f.converged) {
      run.not_converged("Mims fit did not converge");
    }
    model = [f](double t) { return f.e0 * std::exp(-std::pow(t / f.t2_s, f.m)); };
  } else {
    const bool ir = cfg.decay.model == DecayModel::InversionRecovery;
    const ExponentialFit f =
        fit_exponential(d, ir ? ExponentialKind::InversionRecovery : ExponentialKind::Single,
                        cfg.decay.sigma);
    report = {{"model", ir ? "inversion_recovery" : "exponential"},
              {"amplitude", f.amplitude},
              {"rate_per_s", f.rate_per_s},
              {"tau_s", std::isfinite(f.tau_s) ? json(f.tau_s) : json(nullptr)},
              {"offset", f.offset},
              {"reduced_chi2", f.reduced_chi2},
              {"runs_z", f.runs_z},
              {"no_decay", f.no_decay},
              {"multi_exponential", f.multi_exponential}};
    if (f.no_decay) run.warn("no decay resolved within the sampled times");
    if (f.multi_exponential) run.warn("residuals suggest more than one exponential");
    model = [f, ir](double t) {
      const double e = std::exp(-f.rate_per_s * t);
      return (ir ? f.amplitude * (1.0 - 2.0 * e) : f.amplitude * e) + f.offset;
    };
  }
  run.write_json("decay_fit.json", report);

  TsvWriter res(run.output("decay_residuals.tsv"),
                {"two_tau_s", "amplitude", "model", "residual"});
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double m = model(d.two_tau_s[i]);
    res << d.two_tau_s[i] << d.amplitude[i] << m << d.amplitude[i] - m;
    res.end_row();
  }
  TsvWriter curve(run.output("decay_curve.tsv"), {"two_tau_s", "model"});
  const double t0 = d.two_tau_s.front();
  const double t1 = d.two_tau_s.back();
  for (int k = 0; k < cfg.decay.curve_points; ++k) {
    const double t = t0 + (t1 - t0) * k / (cfg.decay.curve_points - 1);
    curve << t << model(t);
    curve.end_row();
  }
}

// ------------------------------------------------------ pulse sequences ---

struct SeqPulse {
  PulseOp op;
};
struct SeqReadout {
  std::optional<std::pair<int, int>> transition;
  std::optional<std::size_t> nuclear_of;  // element index of an RF pulse
};
using SeqElement = std::variant<SeqPulse, Wait, SeqReadout>;

struct SeqSweep {
  std::size_t element = 0;
  std::string parameter;
  std::vector<double> values;
};

struct SeqSpec {
  std::vector<SeqElement> elements;
  Environment environment;
  std::optional<double> electron_polarization;
  std::optional<SeqSweep> sweep;
};

LevelLabel parse_label(const json& v, const std::string& where) {
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
    throw InputError(where + ": expected [mS, mI]");
  }
  return {v[0].get<double>(), v[1].get<double>()};
}

// [[mS, mI], [mS, mI]] by label or [i, j] by level index.
std::pair<int, int> parse_levels(const json& v, const SimulationContext& ctx,
                                 const std::string& where) {
  if (!v.is_array() || v.size() != 2) {
    throw InputError(where + ": expected [[mS, mI], [mS, mI]] or [i, j]");
  }
  if (v[0].is_number_integer() && v[1].is_number_integer()) {
    const int n = static_cast<int>(ctx.levels.size());
    const int i = v[0].get<int>();
    const int j = v[1].get<int>();
    if (i < 0 || j < 0 || i >= n || j >= n || i == j) {
      throw InputError(where + ": level indices must be distinct and below " + std::to_string(n));
    }
    return {std::min(i, j), std::max(i, j)};
  }
  try {
    return ctx.pair(parse_label(v[0], where), parse_label(v[1], where));
  } catch (const InputError&) {
    throw;
  } catch (const Error& e) {
    throw InputError(where + ": " + e.what());
  }
}

SeqSpec parse_sequence(const json& doc, const SimulationContext& ctx, const Environment& base) {
  check_keys(doc, "sequence", {"description", "initial", "environment", "elements", "sweep"});
  SeqSpec spec;
  spec.environment = base;
  if (doc.contains("environment")) {
    parse_environment(doc.at("environment"), "sequence.environment", spec.environment);
  }
  if (doc.contains("initial")) {
    const json& init = doc.at("initial");
    if (init.is_string() && init.get<std::string>() == "thermal") {
      // default
    } else if (init.is_object()) {
      check_keys(init, "sequence.initial", {"electron_polarization"});
      spec.electron_polarization =
          required_number(init, "sequence.initial", "electron_polarization");
      if (std::abs(*spec.electron_polarization) > 1.0) {
        throw InputError("sequence.initial.electron_polarization: must lie in [-1, 1]");
      }
    } else {
      throw InputError("sequence.initial: expected \"thermal\" or {\"electron_polarization\": x}");
    }
  }
  if (!doc.contains("elements") || !doc.at("elements").is_array()) {
    throw InputError("sequence.elements: expected an array");
  }
  const json& elements = doc.at("elements");
  int readouts = 0;
  for (std::size_t k = 0; k < elements.size(); ++k) {
    const json& e = elements[k];
    const std::string w = "sequence.elements[" + std::to_string(k) + "]";
    if (!e.is_object()) throw InputError(w + ": expected an object");
    const std::string type = string_at(e, w, "type", "");
    if (type == "pulse") {
      check_keys(e, w,
                 {"type", "channel", "levels", "freq_MHz", "angle_deg", "efficiency",
                  "bandwidth_MHz"});
      SeqPulse p;
      const std::string ch = string_at(e, w, "channel", "");
      if (ch == "MW") {
        p.op.channel = Channel::MW;
      } else if (ch == "RF") {
        p.op.channel = Channel::RF;
      } else {
        throw InputError(w + ".channel: expected MW or RF");
      }
      if (e.contains("levels")) p.op.levels = parse_levels(e.at("levels"), ctx, w + ".levels");
      p.op.frequency_MHz = optional_number(e, w, "freq_MHz");
      if (p.op.levels.has_value() == p.op.frequency_MHz.has_value()) {
        throw InputError(w + ": give exactly one of levels and freq_MHz");
      }
      p.op.angle_rad = number_at(e, w, "angle_deg", 180.0) * kDegree;
      p.op.efficiency = number_at(e, w, "efficiency", 1.0);
      p.op.bandwidth_MHz = number_at(e, w, "bandwidth_MHz", 0.0);
      if (!(p.op.efficiency >= 0.0 && p.op.efficiency <= 1.0)) {
        throw InputError(w + ".efficiency: must lie in [0, 1]");
      }
      spec.elements.emplace_back(p);
    } else if (type == "wait") {
      check_keys(e, w, {"type", "duration_s"});
      Wait wt{required_number(e, w, "duration_s")};
      if (!(wt.duration_s >= 0.0)) throw InputError(w + ".duration_s: must be >= 0");
      spec.elements.emplace_back(wt);
    } else if (type == "readout") {
      check_keys(e, w, {"type", "levels", "pulse"});
      SeqReadout r;
      if (e.contains("pulse")) {
        const int idx = integer_at(e, w, "pulse", -1);
        if (idx < 0 || static_cast<std::size_t>(idx) >= k ||
            !elements[idx].is_object() || elements[idx].value("type", "") != "pulse" ||
            elements[idx].value("channel", "") != "RF") {
          throw InputError(w + ".pulse: must name an earlier RF pulse");
        }
        r.nuclear_of = static_cast<std::size_t>(idx);
      } else if (e.contains("levels")) {
        r.transition = parse_levels(e.at("levels"), ctx, w + ".levels");
      }
      spec.elements.emplace_back(r);
      ++readouts;
    } else {
      throw InputError(w + ".type: expected pulse, wait or readout");
    }
  }
  if (readouts != 1) throw InputError("sequence: needs exactly one readout element");

  if (doc.contains("sweep")) {
    const json& s = doc.at("sweep");
    const std::string w = "sequence.sweep";
    check_keys(s, w, {"element", "parameter", "values", "start", "stop", "step"});
    SeqSweep sw;
    const int idx = integer_at(s, w, "element", -1);
    if (idx < 0 || static_cast<std::size_t>(idx) >= spec.elements.size()) {
      throw InputError(w + ".element: out of range");
    }
    sw.element = static_cast<std::size_t>(idx);
    sw.parameter = string_at(s, w, "parameter", "");
    const bool is_pulse = std::holds_alternative<SeqPulse>(spec.elements[sw.element]);
    const bool is_wait = std::holds_alternative<Wait>(spec.elements[sw.element]);
    const bool ok = (is_pulse && (sw.parameter == "freq_MHz" || sw.parameter == "angle_deg" ||
                                  sw.parameter == "efficiency")) ||
                    (is_wait && sw.parameter == "duration_s");
    if (!ok) throw InputError(w + ".parameter: not sweepable on that element");
    if (s.contains("values")) {
      if (!s.at("values").is_array()) throw InputError(w + ".values: expected an array");
      for (const auto& v : s.at("values")) {
        if (!v.is_number()) throw InputError(w + ".values: entries must be numbers");
        sw.values.push_back(v.get<double>());
      }
    } else {
      const double a = required_number(s, w, "start");
      const double b = required_number(s, w, "stop");
      const double st = required_number(s, w, "step");
      if (!(st > 0.0) || !(b >= a)) throw InputError(w + ": need stop >= start and step > 0");
      const int n = static_cast<int>(std::floor((b - a) / st + 1e-9)) + 1;
      for (int k = 0; k < n; ++k) sw.values.push_back(a + k * st);
    }
    if (sw.values.empty()) throw InputError(w + ": no sweep values");
    if (is_pulse && sw.parameter == "freq_MHz") {
      std::get<SeqPulse>(spec.elements[sw.element]).op.levels.reset();
    }
    spec.sweep = sw;
  }
  return spec;
}

// Transition a frequency-addressed pulse acts on: the candidate nearest the
// carrier, or none.
std::optional<std::pair<int, int>> nearest_candidate(const PulseOp& op,
                                                     std::span<const Transition> table) {
  const auto c = candidates(op, table);
  if (c.empty()) return std::nullopt;
  const auto best = std::min_element(c.begin(), c.end(), [&](const auto& a, const auto& b) {
    return std::abs(a.frequency_MHz - *op.frequency_MHz) <
           std::abs(b.frequency_MHz - *op.frequency_MHz);
  });
  return std::pair{best->lower, best->upper};
}

double run_once(const SimulationContext& ctx, const std::vector<SeqElement>& elements,
                std::optional<std::size_t> swept,
                std::pair<int, int> default_readout, LevelPopulations& pops) {
  double echo = 0.0;
  for (std::size_t k = 0; k < elements.size(); ++k) {
    const auto& el = elements[k];
    if (const auto* p = std::get_if<SeqPulse>(&el)) {
      if (p->op.levels) {
        pops = apply_transfer(pops, p->op.levels->first, p->op.levels->second, p->op.angle_rad,
                              p->op.efficiency);
      } else if (swept == k) {
        // A swept carrier drives whatever lies inside its bandwidth.
        for (const auto& t : candidates(p->op, ctx.table)) {
          pops = apply_transfer(pops, t.lower, t.upper, p->op.angle_rad, p->op.efficiency);
        }
      } else {
        pops = apply_pulse(pops, p->op, ctx.table);
      }
    } else if (const auto* w = std::get_if<Wait>(&el)) {
      pops = evolve(pops, w->duration_s, ctx.rates);
    } else {
      const auto& r = std::get<SeqReadout>(el);
      if (r.nuclear_of) {
        const auto& op = std::get<SeqPulse>(elements[*r.nuclear_of]).op;
        const auto pair = op.levels ? op.levels : nearest_candidate(op, ctx.table);
        echo = pair ? std::abs(pops.p[pair->first] - pops.p[pair->second]) : 0.0;
      } else {
        echo = echo_amplitude(pops, r.transition.value_or(default_readout));
      }
    }
  }
  return echo;
}

void cmd_simulate_seq(Run& run) {
  const auto& cfg = run.cfg;
  require_field(cfg);
  fs::path file;
  if (run.opt.data) {
    file = *run.opt.data;
  } else if (cfg.sequence) {
    file = *cfg.sequence;
  } else {
    throw InputError("no sequence file: pass --data or set paths.sequence");
  }
  const json doc = parse_json_file(file);
  // Labels are needed to parse the sequence; the environment only affects
  // the rate matrix, which is rebuilt below when the sequence overrides it.
  auto ctx = SimulationContext::create(cfg.system, cfg.field, cfg.environment);
  SeqSpec spec;
  try {
    spec = parse_sequence(doc, ctx, cfg.environment);
  } catch (const InputError& e) {
    throw InputError(file.string() + ": " + e.what());
  }
  ctx = SimulationContext::create(cfg.system, cfg.field, spec.environment);
  if (!ctx.levels.labels_reliable) run.warn("level labels unreliable at this field");
  const Transition epr = ctx.nearest_epr(cfg.spectrometer.f_mw_GHz);
  const LevelPopulations initial = initial_populations(ctx, spec.electron_polarization);

  if (!spec.sweep) {
    LevelPopulations pops = initial;
    const double echo = run_once(ctx, spec.elements, std::nullopt,
                                 {epr.lower, epr.upper}, pops);
    TsvWriter e(run.output("echo.tsv"), {"echo_amplitude"});
    e << echo;
    e.end_row();
    TsvWriter p(run.output("populations.tsv"), {"index", "mS", "mI", "initial", "final"});
    for (std::size_t i = 0; i < pops.size(); ++i) {
      const auto& l = ctx.levels.labels[i];
      p << static_cast<int>(i) << l.ms << l.mi << initial.p[static_cast<Eigen::Index>(i)]
        << pops.p[static_cast<Eigen::Index>(i)];
      p.end_row();
    }
    return;
  }

  const SeqSweep& sw = *spec.sweep;
  TsvWriter out(run.output("sweep.tsv"), {"sweep_value", "echo_amplitude"});
  for (double v : sw.values) {
    auto elements = spec.elements;
    auto& el = elements[sw.element];
    if (auto* p = std::get_if<SeqPulse>(&el)) {
      if (sw.parameter == "freq_MHz") p->op.frequency_MHz = v;
      if (sw.parameter == "angle_deg") p->op.angle_rad = v * kDegree;
      if (sw.parameter == "efficiency") p->op.efficiency = v;
    } else {
      std::get<Wait>(el).duration_s = v;
    }
    const bool carrier = sw.parameter == "freq_MHz";
    LevelPopulations pops = initial;
    const double echo =
        run_once(ctx, elements, carrier ? std::optional(sw.element) : std::nullopt,
                 {epr.lower, epr.upper}, pops);
    out << v << echo;
    out.end_row();
  }
}

void cmd_assemble(Run& run) {
  const auto& cfg = run.cfg;
  const auto steps = read_steps(run.data_file(cfg.data, "steps"));
  const LevelDiagram d =
      assemble_level_diagram(cfg.system.nuclear_spin, cfg.assembly.anchor, steps);
  for (const auto& gap : d.gaps) run.warn("assembly gap: " + gap);
  TsvWriter out(run.output("diagram.tsv"), {"mS", "mI", "energy_MHz"});
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    const double e = d.energies_MHz[i] ? *d.energies_MHz[i] + cfg.assembly.reference_MHz
                                       : std::nan("");
    out << d.labels[i].ms << d.labels[i].mi << e;
    out.end_row();
  }
  run.write_json("assembly.json", json{{"complete", d.complete}, {"gaps", d.gaps}});
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

RunReport run_command(const CommandOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  RunReport report;
  report.command = options.command;
  CommandOptions opt = options;
  int convergence_failures = 0;
  opt.threads = std::max(1, opt.threads);

  try {
    fs::create_directories(opt.out_dir);
  } catch (const std::exception& e) {
    report.errors.push_back(std::string("cannot create output directory: ") + e.what());
    report.exit_code = 1;
    spdlog::error("{}", report.errors.back());
    return report;
  }

  try {
    const auto& names = command_names();
    if (std::find(names.begin(), names.end(), opt.command) == names.end()) {
      throw InputError("unknown command '" + opt.command + "'");
    }
    const ProjectConfig cfg = load_config(opt.config);

    std::uint64_t h = fnv1a(opt.command);
    h = fnv1a(read_file(opt.config), h);
    const std::optional<fs::path> data = opt.data ? opt.data
                                         : opt.command == "simulate-seq" ? cfg.sequence
                                                                         : cfg.data;
    if (data) h = fnv1a(read_file(*data), h);
    h = fnv1a(std::to_string(opt.seed), h);
    report.inputs_digest = hex64(h);

    Run run{cfg, opt, report, convergence_failures};
    if (opt.command == "levels") cmd_levels(run);
    if (opt.command == "spectrum") cmd_spectrum(run);
    if (opt.command == "endor") cmd_endor(run);
    if (opt.command == "fit-tensors") cmd_fit_tensors(run);
    if (opt.command == "fit-relaxation") cmd_fit_relaxation(run);
    if (opt.command == "fit-decay") cmd_fit_decay(run);
    if (opt.command == "simulate-seq") cmd_simulate_seq(run);
    if (opt.command == "assemble") cmd_assemble(run);
  } catch (const std::exception& e) {
    report.errors.push_back(e.what());
  }
  for (const auto& e : report.errors) spdlog::error("{}", e);

  if (report.errors.empty()) {
    report.exit_code = 0;
  } else if (convergence_failures == static_cast<int>(report.errors.size())) {
    report.exit_code = 2;
  } else {
    report.exit_code = 1;
  }
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path file = opt.out_dir / "run_report.json";
  std::ofstream out(file, std::ios::binary);
  if (out) {
    out << report.to_json().dump(2) << '\n';
  } else {
    spdlog::error("cannot write {}", file.string());
    report.exit_code = 1;
  }
  return report;
}

}  // namespace endor::cli
