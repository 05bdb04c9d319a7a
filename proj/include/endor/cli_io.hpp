#pragma once

// Batch front end: JSON project config, CSV/TSV tables, and one function per
// endor-lab command. Every command writes its tables plus run_report.json
// into the output directory.

#include "endor/pulse_sim.hpp"
#include "endor/relaxation.hpp"
#include "endor/tensor_fit.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace endor::cli {

namespace fs = std::filesystem;

struct SpectrometerConfig {
  double f_mw_GHz = 9.56;
  ScanWindow window{50.0, 1000.0};
  double grid_mT = 0.2;
  double moment_threshold = 0.05;
  double linewidth_mT = 2.0;
  LineShape lineshape = LineShape::Gaussian;
  RootSearch root_search = RootSearch::Scan;
  double trace_step_mT = 0.1;
};

struct EndorConfig {
  std::optional<double> rf_min_MHz;  // around the predicted lines when unset
  std::optional<double> rf_max_MHz;
  double rf_step_MHz = 0.05;
  std::optional<double> electron_polarization;  // thermal when unset
  double mixing_angle_deg = 180.0;
};

struct FitConfig {
  int starts = 64;
  int refine = 4;
  bool use_config_init = false;
  double init_jitter = 0.05;
  bool fit_plane_offsets = false;
  double max_offset_deg = 5.0;
  std::array<double, 2> g_range{0.3, 5.0};
  std::array<double, 2> a_range_MHz{50.0, 1500.0};
  double model_step_deg = 1.0;
};

struct RelaxationConfig {
  T1eParams t1e;
  RelaxParams t1n;
  double grid_min_K = 0.05;
  double grid_max_K = 6.0;
  int grid_points = 200;
};

enum class DecayModel { Mims, Exponential, InversionRecovery };

struct DecayConfig {
  DecayModel model = DecayModel::Mims;
  std::optional<double> sigma;
  int curve_points = 200;
};

struct AssemblyConfig {
  AssemblyAnchor anchor;
  double reference_MHz = 0.0;  // energy assigned to (-1/2, mi*)
};

struct ProjectConfig {
  SpinSystem system;
  FieldVector field;
  SpectrometerConfig spectrometer;
  Environment environment;
  EndorConfig endor;
  FitConfig fit;
  RelaxationConfig relaxation;
  DecayConfig decay;
  AssemblyConfig assembly;
  std::optional<fs::path> data;      // resolved against the config directory
  std::optional<fs::path> sequence;
};

/// Thrown for bad user input; the message names the offending key or
/// file:line.
class InputError : public Error {
 public:
  using Error::Error;
};

ProjectConfig parse_config(const nlohmann::json& doc, const fs::path& base_dir = {});
ProjectConfig load_config(const fs::path& file);

/// Delimited text table. The first non-blank line is the header (a leading
/// '#' is allowed); tab-separated when the header holds a tab, comma
/// otherwise. Later '#' lines and blank lines are skipped.
struct Table {
  struct Row {
    int line = 0;
    std::vector<std::string> cells;
  };
  fs::path source;
  std::vector<std::string> header;
  std::vector<Row> rows;

  std::optional<std::size_t> find(const std::string& column) const;
  std::size_t column(const std::string& column) const;  // throws when absent
  double number(const Row& row, std::size_t col) const;
  const std::string& text(const Row& row, std::size_t col) const;
};

Table read_table(const fs::path& file);

/// Roadmap from columns plane, angle_deg, field_mT (peak_index optional).
Roadmap read_roadmap(const fs::path& file, double f_mw_GHz, ScanWindow window);

struct RateRow {
  RateModel kind = RateModel::T1n;
  RateSample sample;
};
/// Columns temperature_K, value_s (a relaxation time), kind (t1e or t1n).
std::vector<RateRow> read_rates(const fs::path& file);

/// Columns two_tau_s, amplitude.
DecayCurve read_decay(const fs::path& file);

/// Columns mS, mI_from, frequency_MHz and optionally sign; the
/// nmr_lines.tsv written by the levels command qualifies.
std::vector<AssemblyStep> read_steps(const fs::path& file);

/// Writes a TSV with a single '#' header line. Numbers use 12 significant
/// digits so reruns are byte identical.
class TsvWriter {
 public:
  TsvWriter(const fs::path& file, const std::vector<std::string>& columns);
  TsvWriter& operator<<(double v);
  TsvWriter& operator<<(int v);
  TsvWriter& operator<<(const std::string& v);
  void end_row();

 private:
  void separator();
  std::ofstream out_;
  fs::path file_;
  std::size_t columns_ = 0;
  std::size_t filled_ = 0;
};

std::string format_number(double v);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

struct CommandOptions {
  std::string command;
  fs::path config;
  std::optional<fs::path> data;
  fs::path out_dir = ".";
  std::uint64_t seed = 1;
  int threads = 1;
};

struct RunReport {
  std::string command;
  std::string inputs_digest;
  std::vector<std::string> outputs;  // file names inside the output directory
  std::vector<std::string> warnings;
  std::vector<std::string> errors;
  double wall_time_s = 0.0;
  bool non_convergence = false;
  int exit_code = 0;  // 0 ok, 1 error, 2 fit did not converge

  nlohmann::json to_json() const;
};

const std::vector<std::string>& command_names();

/// Runs one command and writes run_report.json. Never throws for input or
/// model errors; they end up in the report and the exit code.
RunReport run_command(const CommandOptions& options);

}  // namespace endor::cli
