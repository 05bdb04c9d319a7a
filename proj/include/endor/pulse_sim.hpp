#pragma once

// Population-level simulation of pulsed ENDOR protocols: pulses exchange
// populations of two levels, waits relax them through a rate matrix that
// obeys detailed balance, and the readout is a population difference.

#include "endor/spectra.hpp"

#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace endor {

struct LevelPopulations {
  Eigen::VectorXd p;

  std::size_t size() const { return static_cast<std::size_t>(p.size()); }
  double sum() const { return p.sum(); }
  /// Throws unless every entry is >= -1e-12 and the sum is 1 to 1e-9.
  void validate() const;
};

struct Environment {
  double temperature_K = 0.1;  // 0 is the zero-temperature limit
  double t1e_s = 17.0;
  double t1n_s = 828.0;        // infinity switches nuclear relaxation off
  /// Electron-nuclear flip-flop (mS, mI+1) <-> (-mS, mI) time; off when
  /// infinite.
  double cross_relaxation_s = std::numeric_limits<double>::infinity();
};

/// Boltzmann populations p_i ~ exp(-E_i h / kB T). At T = 0 the lowest level
/// (or the degenerate lowest set) carries everything.
LevelPopulations thermal_populations(const EnergyLevels& levels, double temperature_K);

/// Electron polarization Pe with uniform nuclear populations: (1 + Pe)/2
/// spread over the mS = -1/2 levels, (1 - Pe)/2 over mS = +1/2. Needs labels.
LevelPopulations electron_polarized_populations(const EnergyLevels& levels, double pe);

struct RateMatrix {
  Eigen::MatrixXd w;           // w(i, j): rate from level j to level i, 1/s
  Eigen::VectorXd stationary;  // detailed-balance partner of w

  /// dp/dt = G p; columns sum to zero.
  Eigen::MatrixXd generator() const;
};

/// Electron flips connect (-1/2, mI) and (+1/2, mI) with total rate 1/T1e;
/// nuclear flips connect adjacent mI inside a manifold with 1/T1n. Each pair
/// splits its rate as W_down = W / (1 + exp(-2x)), W_up = W / (1 + exp(2x)),
/// x = h dE / 2 kB T.
RateMatrix build_rate_matrix(const EnergyLevels& levels, const Environment& env);

/// exp(G t) p. Uses the symmetrized generator when the stationary state has
/// no vanishing entries, a Pade matrix exponential otherwise.
LevelPopulations evolve(const LevelPopulations& pops, double duration_s, const RateMatrix& r);

enum class Channel { MW, RF };

struct Transition {
  int lower = 0;  // level indices, lower energy first
  int upper = 0;
  Channel channel = Channel::RF;
  double frequency_MHz = 0.0;
  LevelLabel from;  // label of `lower`
  LevelLabel to;    // label of `upper`
};

/// Allowed MW (mS flip, same mI) and RF (same mS, adjacent mI) transitions of
/// labeled levels.
std::vector<Transition> transition_table(const EnergyLevels& levels);

struct PulseOp {
  Channel channel = Channel::RF;
  /// Either explicit levels or a frequency resolved against the table.
  std::optional<std::pair<int, int>> levels;
  std::optional<double> frequency_MHz;
  double angle_rad = 3.14159265358979323846;
  double efficiency = 1.0;
  /// Full width of the top-hat excitation; 0 selects 5 MHz (RF) or 20 MHz (MW).
  double bandwidth_MHz = 0.0;
};

double default_bandwidth_MHz(Channel c);

/// Transitions of the pulse's channel inside its bandwidth.
std::vector<Transition> candidates(const PulseOp& op, std::span<const Transition> table);

/// Exactly one level pair; throws with the candidate list otherwise.
std::pair<int, int> resolve_pulse(const PulseOp& op, std::span<const Transition> table);

/// s = efficiency sin^2(angle/2); p_i' = (1-s) p_i + s p_j and vice versa.
LevelPopulations apply_transfer(const LevelPopulations& pops, int i, int j, double angle_rad,
                                double efficiency = 1.0);
LevelPopulations apply_pulse(const LevelPopulations& pops, const PulseOp& op,
                             std::span<const Transition> table);

/// p_i - p_j for an EPR transition given as (lower, upper).
double echo_amplitude(const LevelPopulations& pops, std::pair<int, int> transition);

struct Wait {
  double duration_s = 0.0;
};

struct Readout {
  std::pair<int, int> transition{0, 0};
};

using SequenceElement = std::variant<PulseOp, Wait, Readout>;

struct Sequence {
  std::vector<SequenceElement> elements;
  Environment environment;

  /// Exactly one readout and non-negative waits.
  void validate() const;
};

/// Levels, transitions and relaxation for one spin system, field and
/// environment.
struct SimulationContext {
  SpinSystem system;
  FieldVector field;
  Environment environment;
  EnergyLevels levels;
  std::vector<Transition> table;
  RateMatrix rates;

  static SimulationContext create(const SpinSystem& sys, const FieldVector& b,
                                  const Environment& env);
  int level(double ms, double mi) const { return levels.index_of(ms, mi); }
  /// Level pair of an EPR or NMR transition identified by labels.
  std::pair<int, int> pair(LevelLabel a, LevelLabel b) const;
  /// MW transition closest in frequency to f_GHz.
  Transition nearest_epr(double f_GHz) const;
};

struct SequenceResult {
  LevelPopulations final_populations;
  double echo = 0.0;
};

SequenceResult run_sequence(const SimulationContext& ctx, const Sequence& seq,
                            const LevelPopulations& initial);

struct SpectrumPoint {
  double x = 0.0;  // RF frequency (MHz) or pulse length (s)
  double echo = 0.0;
};

/// MW pi on the EPR transition, RF pulse of mixing_angle at each sweep
/// frequency (every RF transition within bandwidth), echo readout.
std::vector<SpectrumPoint> run_davies_endor(const SimulationContext& ctx,
                                            const LevelPopulations& initial,
                                            std::pair<int, int> epr,
                                            std::span<const double> rf_sweep_MHz,
                                            double mixing_angle_rad = 3.14159265358979323846);

struct MsAssignmentResult {
  double echo = 0.0;  // |p_a - p_b| on the RF pair at detection
  std::pair<int, int> rf_pair{0, 0};
  std::vector<std::string> warnings;
};

/// MW pi on the EPR transition, RF pi at rf_freq, Wait(t_w), then the RF
/// pair's population difference, which an RF pi/2 plus transfer turns into
/// the detected echo. Without initial polarization only the detection block
/// runs. Warns unless 3 T1e <= t_w <= T1n / 3.
MsAssignmentResult run_ms_assignment(const SimulationContext& ctx, const LevelPopulations& initial,
                                     std::pair<int, int> epr, double rf_freq_MHz, double t_w_s,
                                     bool with_initial_polarization = true);

struct ChainStep {
  std::pair<int, int> levels{0, 0};
  double efficiency = 1.0;
};

/// Checks that every step shares a level with where the previous step left
/// population, starting from the EPR levels; the mixing target is checked as
/// the final step. Throws naming the failing step index (the target is
/// index prep_chain.size()).
void validate_chain(const SimulationContext& ctx, std::pair<int, int> epr,
                    std::span<const ChainStep> prep_chain, std::pair<int, int> target);

/// MW pi, RF pi chain, RF mixing sweep, chain in reverse, echo on the EPR
/// transition. With an empty chain this is run_davies_endor.
std::vector<SpectrumPoint> run_generalized_davies(const SimulationContext& ctx,
                                                  const LevelPopulations& initial,
                                                  std::pair<int, int> epr,
                                                  std::span<const ChainStep> prep_chain,
                                                  std::pair<int, int> target,
                                                  std::span<const double> rf_sweep_MHz);

/// As run_generalized_davies with the mixing pulse on `target` only, of
/// variable length: transfer sin^2(Omega t / 2), Omega = 2 pi rabi_freq.
std::vector<SpectrumPoint> run_rabi(const SimulationContext& ctx, const LevelPopulations& initial,
                                    std::pair<int, int> epr, std::span<const ChainStep> prep_chain,
                                    std::pair<int, int> target, std::span<const double> durations_s,
                                    double rabi_freq_Hz);

/// Saturating (s = 1/2) pulses over every comb transition, repeated.
LevelPopulations tidy_reset(const LevelPopulations& pops, std::span<const std::pair<int, int>> comb,
                            int repetitions);

/// Davies ENDOR contrast of successive shots separated by delay_s. The state
/// carries over between shots; a non-empty comb runs tidy_reset after each.
std::vector<double> repeated_endor_contrast(const SimulationContext& ctx,
                                            const LevelPopulations& initial,
                                            std::pair<int, int> epr, double rf_freq_MHz,
                                            int shots, double delay_s,
                                            std::span<const std::pair<int, int>> comb = {},
                                            int tidy_repetitions = 20);

struct T1nMeasurement {
  std::vector<SpectrumPoint> curve;  // (t_w, echo)
  double t1n_s = 0.0;
  bool no_decay = false;
  std::vector<std::string> warnings;
};

T1nMeasurement simulate_t1n_measurement(const SimulationContext& ctx,
                                        const LevelPopulations& initial, std::pair<int, int> epr,
                                        double rf_freq_MHz, std::span<const double> t_w_grid_s);

struct AssemblyStep {
  double ms = -0.5;
  double mi_from = 0.5;  // step is mi_from -> mi_from + 1
  double frequency_MHz = 0.0;
  /// +1 when E(mi_from + 1) > E(mi_from)
  double sign = 1.0;
};

struct AssemblyAnchor {
  double epr_GHz = 9.56;
  double mi_star = 1.5;  // EPR transition (-1/2, mi*) -> (+1/2, mi*)
};

struct LevelDiagram {
  std::vector<LevelLabel> labels;  // mS = -1/2 ladder first, mI descending
  std::vector<std::optional<double>> energies_MHz;
  std::vector<std::string> gaps;  // missing steps, human readable
  bool complete = false;
};

/// E(-1/2, mi*) = 0, E(+1/2, mi*) = 1000 epr_GHz; each ladder by signed
/// accumulation outward from mi*. Duplicate steps are averaged; duplicates
/// disagreeing by more than 0.5 MHz are rejected.
LevelDiagram assemble_level_diagram(double nuclear_spin, const AssemblyAnchor& anchor,
                                    std::span<const AssemblyStep> steps);

/// Steps (with signs) read off labeled levels, for round trips.
std::vector<AssemblyStep> steps_from_levels(const EnergyLevels& levels, double nuclear_spin);

}  // namespace endor
