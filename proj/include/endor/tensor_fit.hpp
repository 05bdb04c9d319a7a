#pragma once

// Reconstruction of g and A from angular-variation ("roadmap") data. The
// objective pairs simulated and measured fields purely by their order along
// the field axis, so neither peak assignment nor class labels are needed.

#include "endor/least_squares.hpp"
#include "endor/spectra.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace endor {

enum class Plane { bD1, D1D2, bD2 };

std::string to_string(Plane p);
Plane parse_plane(const std::string& name);

/// Unit field direction for a rotation angle inside a crystal plane:
///   bD1: (0, cos a, sin a)   D1D2: (sin a, 0, cos a)   bD2: (sin a, cos a, 0)
Vec3 plane_direction(Plane p, double angle_deg);

struct RoadmapRecord {
  Plane plane = Plane::bD1;
  double angle_deg = 0.0;
  std::vector<double> fields_mT;  // ascending
};

struct Roadmap {
  std::vector<RoadmapRecord> records;
  double f_mw_GHz = 9.56;
  ScanWindow window{100.0, 1500.0};

  /// Throws endor::Error on unsorted fields, angles outside [0, 180) or an
  /// invalid window.
  void validate() const;
  std::size_t point_count() const;
};

struct FitParams {
  // upper triangles: xx, xy, xz, yy, yz, zz
  Eigen::Matrix<double, 6, 1> g_sym = Eigen::Matrix<double, 6, 1>::Zero();
  Eigen::Matrix<double, 6, 1> a_sym_mhz = Eigen::Matrix<double, 6, 1>::Zero();
  std::array<double, 3> plane_offset_deg{0.0, 0.0, 0.0};  // indexed by Plane

  static FitParams from_tensors(const Tensor3& g, const Tensor3& a_mhz);
  Tensor3 g() const;
  Tensor3 a_mhz() const;
  SpinSystem system(double nuclear_spin) const;
};

struct ObjectiveOptions {
  double nuclear_spin = 3.5;
  ResonanceOptions resonance = [] {
    ResonanceOptions r;
    r.method = RootSearch::Tracked;
    return r;
  }();
  /// Residual charged per unmatched point (mT); 2 x window width when unset.
  std::optional<double> mismatch_penalty_mT;
  /// Simulated peaks closer than this are one observed peak. The two C2
  /// classes coincide exactly whenever B lies along b or in the D1D2 plane.
  double resolution_mT = 1e-5;
  int threads = 1;
};

struct ObjectiveValue {
  double value = 0.0;  // mT^2 per experimental point
  std::size_t n_points = 0;
  std::size_t unmatched = 0;
  std::size_t skipped_records = 0;
  double skipped_fraction = 0.0;
};

/// Simulated fields of both C2 classes at one orientation, merged and sorted.
std::vector<double> simulate_sorted_fields(const FitParams& params, const Roadmap& data,
                                           Plane plane, double angle_deg,
                                           const ObjectiveOptions& options = {});

ObjectiveValue objective(const FitParams& params, const Roadmap& data,
                         const ObjectiveOptions& options = {});

/// Roadmap over the three planes at step_deg spacing from params, optionally
/// with gaussian noise of standard deviation noise_mT (fields re-sorted).
Roadmap synthesize_roadmap(const FitParams& params, double f_mw_GHz, ScanWindow window,
                           double step_deg, double noise_mT, std::uint64_t seed,
                           const ObjectiveOptions& options = {},
                           const std::vector<Plane>& planes = {Plane::bD1, Plane::D1D2,
                                                               Plane::bD2});

struct FitOptions {
  ObjectiveOptions objective;
  int starts = 64;
  int refine = 4;  // best starts handed to the local optimizer
  std::uint64_t seed = 1;
  /// Relative spread of starts drawn around a supplied initial guess.
  double init_jitter = 0.05;
  std::array<double, 2> g_range{0.3, 5.0};
  std::array<double, 2> a_range_mhz{50.0, 1500.0};
  bool fit_plane_offsets = false;
  double max_offset_deg = 5.0;
  LsqOptions lsq;
};

struct FitResult {
  FitParams best;
  double objective = 0.0;
  double residual_gauss = 0.0;  // mean |B_sim - B_exp| over matched points
  std::size_t n_points = 0;
  std::size_t unmatched = 0;
  int iterations = 0;
  bool converged = false;
  bool underdetermined = false;
  double condition_number = 0.0;  // of the scaled Jacobian at the optimum
  double start_objective = 0.0;   // of the start that produced `best`
  std::string stop_reason;
};

/// Multi-start sampling followed by Levenberg-Marquardt refinement. With
/// init, starts are drawn around it (the first start is init itself);
/// without, random symmetric tensors in the configured principal ranges.
/// Requires at least 12 records.
FitResult fit(const Roadmap& data, const std::optional<FitParams>& init,
              const FitOptions& options = {});

struct ResidualRow {
  Plane plane = Plane::bD1;
  double angle_deg = 0.0;
  int peak_index = 0;
  double experimental_mT = 0.0;
  double simulated_mT = 0.0;  // NaN when unmatched
  double deviation_gauss = 0.0;
  bool matched = false;
};

/// Per-point comparison. Simulated-only surplus peaks appear with
/// experimental_mT = NaN.
std::vector<ResidualRow> residual_report(const FitParams& params, const Roadmap& data,
                                         const ObjectiveOptions& options = {});

}  // namespace endor
