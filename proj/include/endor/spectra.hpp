#pragma once

// Field-swept EPR peak positions, ENDOR (NMR) line frequencies and field
// gradients predicted from the spin Hamiltonian.

#include "endor/spin_core.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace endor {

struct ResonancePeak {
  double field_mT = 0.0;
  int i = 0;  // lower level (ascending-energy index at the resonance field)
  int j = 0;  // upper level
  double frequency_GHz = 0.0;
  double moment = 0.0;
  int class_id = 1;
  std::string system;
};

struct NmrLine {
  double frequency_MHz = 0.0;
  double manifold_ms = 0.0;
  double mi_from = 0.0;
  double mi_to = 0.0;
  double moment = 0.0;
  int level_from = 0;
  int level_to = 0;
  bool labels_reliable = true;
};

struct ScanWindow {
  double min_mT = 0.0;
  double max_mT = 0.0;
  double width() const { return max_mT - min_mT; }
};

enum class RootSearch {
  // Sign-change scan over every level pair on a fixed grid, then bracketed
  // refinement. Finds forbidden transitions as well.
  Scan,
  // Newton iteration on the 2I+1 allowed (mS flip, same mI) transitions,
  // identified by energy rank inside each electron manifold.
  Tracked,
};

struct ResonanceOptions {
  double grid_mT = 0.2;
  /// Peaks weaker than this fraction of the strongest one are dropped.
  double moment_threshold = 0.05;
  /// Refinement stops once |f_ij(B) - f_mw| is below this (MHz).
  double tolerance_MHz = 1e-4;
  std::optional<Vec3> drive_direction;
  RootSearch method = RootSearch::Scan;
};

/// Partner class under the C2 axis along b: T -> C T C^T, C = diag(-1, 1, -1).
SpinSystem c2_partner(const SpinSystem& sys);

/// Same tensors with I = 0 (even isotopes).
SpinSystem even_isotope(const SpinSystem& sys);

/// Unit microwave-field direction perpendicular to b0_direction, in the plane
/// of b0 and the crystal b axis unless overridden.
Vec3 drive_direction(const Vec3& b0_direction, const std::optional<Vec3>& override_dir = {});

std::vector<ResonancePeak> resonance_fields(const SpinSystem& sys, const Vec3& direction,
                                            double f_mw_GHz, ScanWindow window,
                                            const ResonanceOptions& options = {});

/// Allowed (mS flip, same mI) resonance fields from Newton iteration, one
/// slot per nuclear projection mI = -I ... I; NaN where no root was found.
/// Fields beyond max_field_mT are not filtered out, only used to stop runaway
/// iterations. guesses_mT (same layout) seeds the iteration when given.
struct AllowedLines {
  std::vector<double> field_mT;
  std::vector<double> moment;
  std::vector<int> lower;
  std::vector<int> upper;
};
AllowedLines allowed_line_fields(const SpinSystem& sys, const Vec3& direction, double f_mw_GHz,
                                 double max_field_mT, const ResonanceOptions& options = {},
                                 std::span<const double> guesses_mT = {});

/// Peaks of sys (class 1) and c2_partner(sys) (class 2), merged by field.
std::vector<ResonancePeak> class_pair_fields(const SpinSystem& sys, const Vec3& direction,
                                             double f_mw_GHz, ScanWindow window,
                                             const ResonanceOptions& options = {});

/// Delta mS = 0, Delta mI = 1 lines of both manifolds, mS = -1/2 first.
std::vector<NmrLine> endor_frequencies(const SpinSystem& sys, const FieldVector& b);

struct FieldGradient {
  double mhz_per_T = 0.0;       // central difference, 0.1 mT step
  double check_mhz_per_T = 0.0; // central difference, 0.05 mT step
  double forward_mhz_per_T = 0.0;
  double backward_mhz_per_T = 0.0;
  bool disagreement = false;  // the two central estimates differ by > 1 %
  bool one_sided = false;     // level crossing inside the stencil
};

/// d(E_b - E_a)/d|B| for two labeled levels.
FieldGradient transition_field_gradient(const SpinSystem& sys, const FieldVector& b,
                                        LevelLabel from, LevelLabel to);
FieldGradient nmr_field_gradient(const SpinSystem& sys, const FieldVector& b, const NmrLine& line);

enum class LineShape { Gaussian, Lorentzian };

/// Sum of unit-area profiles (full width at half maximum width_mT) scaled by
/// each peak's moment, sampled on grid_mT.
std::vector<double> stick_to_lineshape(std::span<const ResonancePeak> peaks, double width_mT,
                                       LineShape shape, std::span<const double> grid_mT);

}  // namespace endor
