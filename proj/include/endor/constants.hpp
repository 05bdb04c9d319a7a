#pragma once

namespace endor::constants {

/// Bohr magneton over Planck constant, MHz per mT (13.9962449 GHz/T).
inline constexpr double kBohrMHzPerMilliTesla = 13.9962449;

inline constexpr double kPlanck = 6.62607015e-34;    // J s
inline constexpr double kBoltzmann = 1.380649e-23;  // J/K

/// h/kB in kelvin per hertz.
inline constexpr double kPlanckOverBoltzmann = kPlanck / kBoltzmann;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kDegree = kPi / 180.0;

}  // namespace endor::constants
