#include "endor/pulse_sim.hpp"

#include "endor/constants.hpp"
#include "endor/relaxation.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace endor {

namespace {

using constants::kPi;
using constants::kPlanckOverBoltzmann;

constexpr double kPiAngle = kPi;

bool is_half(double ms, double value) { return std::abs(ms - value) < 1e-9; }

std::string format_label(const LevelLabel& l) {
  auto frac = [](double v) {
    const long twice = std::lround(2.0 * v);
    std::ostringstream os;
    if (twice % 2 == 0) {
      os << (twice > 0 ? "+" : "") << twice / 2;
    } else {
      os << (twice > 0 ? "+" : "-") << std::labs(twice) << "/2";
    }
    return os.str();
  };
  return "|" + frac(l.ms) + "," + frac(l.mi) + ">";
}

LevelPopulations clean(Eigen::VectorXd p) {
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 && p[i] > -1e-12) p[i] = 0.0;
  }
  const double s = p.sum();
  if (s > 0.0) p /= s;
  return {p};
}

}  // namespace

void LevelPopulations::validate() const {
  if (p.size() == 0) throw Error("empty population vector");
  if (p.minCoeff() < -1e-12) throw Error("negative population");
  if (std::abs(p.sum() - 1.0) > 1e-9) throw Error("populations do not sum to 1");
}

LevelPopulations thermal_populations(const EnergyLevels& levels, double temperature_K) {
  if (!(temperature_K >= 0.0)) throw Error("temperature must be >= 0");
  const Eigen::Index n = static_cast<Eigen::Index>(levels.size());
  if (n == 0) throw Error("no levels");
  const double e_min = *std::min_element(levels.energies_mhz.begin(), levels.energies_mhz.end());
  Eigen::VectorXd p(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double de_Hz = (levels.energies_mhz[i] - e_min) * 1e6;
    if (temperature_K == 0.0) {
      p[i] = de_Hz <= 1e-6 ? 1.0 : 0.0;
    } else {
      p[i] = std::exp(-de_Hz * kPlanckOverBoltzmann / temperature_K);
    }
  }
  return {p / p.sum()};
}

LevelPopulations electron_polarized_populations(const EnergyLevels& levels, double pe) {
  if (!(pe >= -1.0 && pe <= 1.0)) throw Error("electron polarization must lie in [-1, 1]");
  if (levels.labels.size() != levels.size()) throw Error("levels are not labeled");
  const double per_manifold = static_cast<double>(levels.size()) / 2.0;
  Eigen::VectorXd p(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const double share = levels.labels[i].ms < 0.0 ? 0.5 * (1.0 + pe) : 0.5 * (1.0 - pe);
    p[static_cast<Eigen::Index>(i)] = share / per_manifold;
  }
  return {p};
}

Eigen::MatrixXd RateMatrix::generator() const {
  Eigen::MatrixXd g = w;
  g.diagonal().setZero();
  for (Eigen::Index j = 0; j < g.cols(); ++j) g(j, j) = -g.col(j).sum();
  return g;
}

RateMatrix build_rate_matrix(const EnergyLevels& levels, const Environment& env) {
  if (levels.labels.size() != levels.size()) throw Error("levels are not labeled");
  if (!(env.temperature_K >= 0.0)) throw Error("temperature must be >= 0");
  if (!(env.t1e_s > 0.0) || !(env.t1n_s > 0.0) || !(env.cross_relaxation_s > 0.0)) {
    throw Error("relaxation times must be positive");
  }
  const Eigen::Index n = static_cast<Eigen::Index>(levels.size());
  RateMatrix r;
  r.w = Eigen::MatrixXd::Zero(n, n);
  r.stationary = thermal_populations(levels, env.temperature_K).p;

  auto connect = [&](int a, int b, double rate) {
    if (!(rate > 0.0) || !std::isfinite(rate)) return;
    const int lo = levels.energies_mhz[a] <= levels.energies_mhz[b] ? a : b;
    const int hi = lo == a ? b : a;
    const double de_Hz = (levels.energies_mhz[hi] - levels.energies_mhz[lo]) * 1e6;
    double down = rate, up = 0.0;
    if (env.temperature_K > 0.0) {
      const double x = kPlanckOverBoltzmann * de_Hz / (2.0 * env.temperature_K);
      down = rate / (1.0 + std::exp(-2.0 * x));
      up = rate / (1.0 + std::exp(2.0 * x));
    } else if (de_Hz == 0.0) {
      down = up = 0.5 * rate;
    }
    r.w(lo, hi) += down;
    r.w(hi, lo) += up;
  };

  const double spin = (static_cast<double>(n) / 2.0 - 1.0) / 2.0;
  for (double mi = -spin; mi <= spin + 1e-9; mi += 1.0) {
    connect(levels.index_of(-0.5, mi), levels.index_of(0.5, mi), 1.0 / env.t1e_s);
  }
  for (double ms : {-0.5, 0.5}) {
    for (double mi = -spin; mi < spin - 1e-9; mi += 1.0) {
      connect(levels.index_of(ms, mi), levels.index_of(ms, mi + 1.0), 1.0 / env.t1n_s);
    }
  }
  for (double mi = -spin; mi < spin - 1e-9; mi += 1.0) {
    connect(levels.index_of(-0.5, mi + 1.0), levels.index_of(0.5, mi), 1.0 / env.cross_relaxation_s);
  }
  return r;
}

LevelPopulations evolve(const LevelPopulations& pops, double duration_s, const RateMatrix& r) {
  if (!(duration_s >= 0.0)) throw Error("duration must be >= 0");
  if (duration_s == 0.0) return pops;
  const Eigen::Index n = pops.p.size();
  if (r.w.rows() != n) throw Error("rate matrix size does not match populations");
  const Eigen::MatrixXd g = r.generator();

  const double pi_max = r.stationary.size() == n ? r.stationary.maxCoeff() : 0.0;
  const double pi_min = r.stationary.size() == n ? r.stationary.minCoeff() : 0.0;
  if (pi_max > 0.0 && pi_min > 1e-10 * pi_max) {
    const Eigen::VectorXd root = r.stationary.cwiseSqrt();
    const Eigen::VectorXd inv_root = root.cwiseInverse();
    Eigen::MatrixXd s = inv_root.asDiagonal() * g * root.asDiagonal();
    s = 0.5 * (s + s.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    const Eigen::VectorXd lambda = es.eigenvalues().cwiseMin(0.0);
    const Eigen::MatrixXd& q = es.eigenvectors();
    Eigen::VectorXd decay(n);
    for (Eigen::Index k = 0; k < n; ++k) decay[k] = std::exp(lambda[k] * duration_s);
    const Eigen::VectorXd y = q.transpose() * (inv_root.asDiagonal() * pops.p);
    const Eigen::VectorXd out = root.asDiagonal() * (q * decay.asDiagonal() * y);
    return clean(out);
  }
  const Eigen::MatrixXd gt = g * duration_s;
  const Eigen::MatrixXd e = gt.exp();
  return clean(e * pops.p);
}

std::vector<Transition> transition_table(const EnergyLevels& levels) {
  if (levels.labels.size() != levels.size()) throw Error("levels are not labeled");
  const double spin = (static_cast<double>(levels.size()) / 2.0 - 1.0) / 2.0;
  std::vector<Transition> out;
  auto add = [&](int a, int b, Channel c) {
    Transition t;
    t.channel = c;
    t.lower = levels.energies_mhz[a] <= levels.energies_mhz[b] ? a : b;
    t.upper = t.lower == a ? b : a;
    t.frequency_MHz = levels.energies_mhz[t.upper] - levels.energies_mhz[t.lower];
    t.from = levels.labels[t.lower];
    t.to = levels.labels[t.upper];
    out.push_back(t);
  };
  for (double mi = spin; mi >= -spin - 1e-9; mi -= 1.0) {
    add(levels.index_of(-0.5, mi), levels.index_of(0.5, mi), Channel::MW);
  }
  for (double ms : {-0.5, 0.5}) {
    for (double mi = -spin; mi < spin - 1e-9; mi += 1.0) {
      add(levels.index_of(ms, mi), levels.index_of(ms, mi + 1.0), Channel::RF);
    }
  }
  return out;
}

double default_bandwidth_MHz(Channel c) { return c == Channel::RF ? 5.0 : 20.0; }

std::vector<Transition> candidates(const PulseOp& op, std::span<const Transition> table) {
  if (!op.frequency_MHz) return {};
  const double bw = op.bandwidth_MHz > 0.0 ? op.bandwidth_MHz : default_bandwidth_MHz(op.channel);
  std::vector<Transition> out;
  for (const auto& t : table) {
    if (t.channel == op.channel && std::abs(t.frequency_MHz - *op.frequency_MHz) <= 0.5 * bw) {
      out.push_back(t);
    }
  }
  return out;
}

std::pair<int, int> resolve_pulse(const PulseOp& op, std::span<const Transition> table) {
  if (op.levels) return *op.levels;
  if (!op.frequency_MHz) throw Error("pulse has neither levels nor a frequency");
  const auto found = candidates(op, table);
  if (found.size() == 1) return {found[0].lower, found[0].upper};
  std::ostringstream os;
  os << (op.channel == Channel::RF ? "RF" : "MW") << " pulse at " << *op.frequency_MHz
     << " MHz resolves to " << found.size() << " transitions";
  if (!found.empty()) {
    os << ":";
    for (const auto& t : found) {
      os << " " << format_label(t.from) << "<->" << format_label(t.to) << " (" << t.frequency_MHz
         << " MHz)";
    }
  }
  throw Error(os.str());
}

LevelPopulations apply_transfer(const LevelPopulations& pops, int i, int j, double angle_rad,
                                double efficiency) {
  const Eigen::Index n = pops.p.size();
  if (i < 0 || j < 0 || i >= n || j >= n || i == j) throw Error("invalid level pair");
  if (!(efficiency >= 0.0 && efficiency <= 1.0)) throw Error("efficiency must lie in [0, 1]");
  const double half = std::sin(0.5 * angle_rad);
  const double s = efficiency * half * half;
  LevelPopulations out = pops;
  const double pi = pops.p[i];
  const double pj = pops.p[j];
  out.p[i] = (1.0 - s) * pi + s * pj;
  out.p[j] = (1.0 - s) * pj + s * pi;
  return out;
}

LevelPopulations apply_pulse(const LevelPopulations& pops, const PulseOp& op,
                             std::span<const Transition> table) {
  const auto [i, j] = resolve_pulse(op, table);
  return apply_transfer(pops, i, j, op.angle_rad, op.efficiency);
}

double echo_amplitude(const LevelPopulations& pops, std::pair<int, int> transition) {
  return pops.p[transition.first] - pops.p[transition.second];
}

void Sequence::validate() const {
  int readouts = 0;
  for (const auto& e : elements) {
    if (std::holds_alternative<Readout>(e)) ++readouts;
    if (const auto* w = std::get_if<Wait>(&e); w != nullptr && !(w->duration_s >= 0.0)) {
      throw Error("wait durations must be >= 0");
    }
  }
  if (readouts != 1) throw Error("a sequence needs exactly one readout");
}

SimulationContext SimulationContext::create(const SpinSystem& sys, const FieldVector& b,
                                            const Environment& env) {
  SimulationContext ctx;
  ctx.system = sys;
  ctx.field = b;
  ctx.environment = env;
  ctx.levels = solve_levels(sys, b);
  ctx.table = transition_table(ctx.levels);
  ctx.rates = build_rate_matrix(ctx.levels, env);
  return ctx;
}

std::pair<int, int> SimulationContext::pair(LevelLabel a, LevelLabel b) const {
  const int ia = levels.index_of(a.ms, a.mi);
  const int ib = levels.index_of(b.ms, b.mi);
  return levels.energies_mhz[ia] <= levels.energies_mhz[ib] ? std::pair{ia, ib} : std::pair{ib, ia};
}

Transition SimulationContext::nearest_epr(double f_GHz) const {
  const Transition* best = nullptr;
  for (const auto& t : table) {
    if (t.channel != Channel::MW) continue;
    if (best == nullptr ||
        std::abs(t.frequency_MHz - 1000.0 * f_GHz) < std::abs(best->frequency_MHz - 1000.0 * f_GHz)) {
      best = &t;
    }
  }
  if (best == nullptr) throw Error("no EPR transition");
  return *best;
}

SequenceResult run_sequence(const SimulationContext& ctx, const Sequence& seq,
                            const LevelPopulations& initial) {
  seq.validate();
  const RateMatrix rates = build_rate_matrix(ctx.levels, seq.environment);
  SequenceResult out;
  LevelPopulations p = initial;
  for (const auto& e : seq.elements) {
    if (const auto* op = std::get_if<PulseOp>(&e)) {
      p = apply_pulse(p, *op, ctx.table);
    } else if (const auto* w = std::get_if<Wait>(&e)) {
      p = evolve(p, w->duration_s, rates);
    } else {
      out.echo = echo_amplitude(p, std::get<Readout>(e).transition);
    }
  }
  out.final_populations = p;
  return out;
}

namespace {

LevelPopulations apply_rf_at(LevelPopulations p, const SimulationContext& ctx, double f_MHz,
                             double angle) {
  PulseOp op;
  op.channel = Channel::RF;
  op.frequency_MHz = f_MHz;
  for (const auto& t : candidates(op, ctx.table)) p = apply_transfer(p, t.lower, t.upper, angle);
  return p;
}

LevelPopulations run_chain(LevelPopulations p, std::span<const ChainStep> chain, bool reverse) {
  const std::size_t n = chain.size();
  for (std::size_t k = 0; k < n; ++k) {
    const ChainStep& s = chain[reverse ? n - 1 - k : k];
    p = apply_transfer(p, s.levels.first, s.levels.second, kPiAngle, s.efficiency);
  }
  return p;
}

}  // namespace

std::vector<SpectrumPoint> run_davies_endor(const SimulationContext& ctx,
                                            const LevelPopulations& initial,
                                            std::pair<int, int> epr,
                                            std::span<const double> rf_sweep_MHz,
                                            double mixing_angle_rad) {
  const LevelPopulations prepared = apply_transfer(initial, epr.first, epr.second, kPiAngle);
  std::vector<SpectrumPoint> out;
  out.reserve(rf_sweep_MHz.size());
  for (double f : rf_sweep_MHz) {
    out.push_back({f, echo_amplitude(apply_rf_at(prepared, ctx, f, mixing_angle_rad), epr)});
  }
  return out;
}

MsAssignmentResult run_ms_assignment(const SimulationContext& ctx, const LevelPopulations& initial,
                                     std::pair<int, int> epr, double rf_freq_MHz, double t_w_s,
                                     bool with_initial_polarization) {
  if (!(t_w_s >= 0.0)) throw Error("waiting time must be >= 0");
  PulseOp rf;
  rf.channel = Channel::RF;
  rf.frequency_MHz = rf_freq_MHz;
  MsAssignmentResult out;
  out.rf_pair = resolve_pulse(rf, ctx.table);

  const Environment& env = ctx.environment;
  if (t_w_s < 3.0 * env.t1e_s || t_w_s > env.t1n_s / 3.0) {
    std::ostringstream os;
    os << "T1e << T_W << T1n not satisfied (T1e = " << env.t1e_s << " s, T_W = " << t_w_s
       << " s, T1n = " << env.t1n_s << " s)";
    out.warnings.push_back(os.str());
  }

  LevelPopulations p = initial;
  if (with_initial_polarization) {
    p = apply_transfer(p, epr.first, epr.second, kPiAngle);
    p = apply_transfer(p, out.rf_pair.first, out.rf_pair.second, kPiAngle);
    p = evolve(p, t_w_s, ctx.rates);
  }
  out.echo = std::abs(p.p[out.rf_pair.first] - p.p[out.rf_pair.second]);
  return out;
}

void validate_chain(const SimulationContext& ctx, std::pair<int, int> epr,
                    std::span<const ChainStep> prep_chain, std::pair<int, int> target) {
  const int n = static_cast<int>(ctx.levels.size());
  auto known = [&](std::pair<int, int> p) {
    for (const auto& t : ctx.table) {
      if ((t.lower == p.first && t.upper == p.second) || (t.lower == p.second && t.upper == p.first)) {
        return true;
      }
    }
    return false;
  };
  std::vector<int> front{epr.first, epr.second};
  auto check = [&](std::pair<int, int> step, std::size_t index) {
    if (step.first < 0 || step.second < 0 || step.first >= n || step.second >= n || !known(step)) {
      throw Error("chain step " + std::to_string(index) + " is not an allowed transition");
    }
    const bool has_first = std::find(front.begin(), front.end(), step.first) != front.end();
    const bool has_second = std::find(front.begin(), front.end(), step.second) != front.end();
    if (!has_first && !has_second) {
      throw Error("chain broken at step " + std::to_string(index) +
                  ": it shares no level with the previous step");
    }
    front = {has_first ? step.second : step.first};
  };
  for (std::size_t k = 0; k < prep_chain.size(); ++k) check(prep_chain[k].levels, k);
  check(target, prep_chain.size());
}

std::vector<SpectrumPoint> run_generalized_davies(const SimulationContext& ctx,
                                                  const LevelPopulations& initial,
                                                  std::pair<int, int> epr,
                                                  std::span<const ChainStep> prep_chain,
                                                  std::pair<int, int> target,
                                                  std::span<const double> rf_sweep_MHz) {
  validate_chain(ctx, epr, prep_chain, target);
  LevelPopulations prepared = apply_transfer(initial, epr.first, epr.second, kPiAngle);
  prepared = run_chain(prepared, prep_chain, false);
  std::vector<SpectrumPoint> out;
  out.reserve(rf_sweep_MHz.size());
  for (double f : rf_sweep_MHz) {
    LevelPopulations p = apply_rf_at(prepared, ctx, f, kPiAngle);
    p = run_chain(p, prep_chain, true);
    out.push_back({f, echo_amplitude(p, epr)});
  }
  return out;
}

std::vector<SpectrumPoint> run_rabi(const SimulationContext& ctx, const LevelPopulations& initial,
                                    std::pair<int, int> epr, std::span<const ChainStep> prep_chain,
                                    std::pair<int, int> target, std::span<const double> durations_s,
                                    double rabi_freq_Hz) {
  validate_chain(ctx, epr, prep_chain, target);
  if (!(rabi_freq_Hz > 0.0)) throw Error("Rabi frequency must be positive");
  LevelPopulations prepared = apply_transfer(initial, epr.first, epr.second, kPiAngle);
  prepared = run_chain(prepared, prep_chain, false);
  std::vector<SpectrumPoint> out;
  out.reserve(durations_s.size());
  for (double t : durations_s) {
    if (!(t >= 0.0)) throw Error("pulse lengths must be >= 0");
    LevelPopulations p =
        apply_transfer(prepared, target.first, target.second, 2.0 * kPi * rabi_freq_Hz * t);
    p = run_chain(p, prep_chain, true);
    out.push_back({t, echo_amplitude(p, epr)});
  }
  return out;
}

LevelPopulations tidy_reset(const LevelPopulations& pops, std::span<const std::pair<int, int>> comb,
                            int repetitions) {
  LevelPopulations p = pops;
  for (int r = 0; r < repetitions; ++r) {
    for (const auto& [i, j] : comb) p = apply_transfer(p, i, j, 0.5 * kPiAngle);
  }
  return p;
}

std::vector<double> repeated_endor_contrast(const SimulationContext& ctx,
                                            const LevelPopulations& initial,
                                            std::pair<int, int> epr, double rf_freq_MHz,
                                            int shots, double delay_s,
                                            std::span<const std::pair<int, int>> comb,
                                            int tidy_repetitions) {
  std::vector<double> contrast;
  LevelPopulations p = initial;
  for (int k = 0; k < shots; ++k) {
    const LevelPopulations inverted = apply_transfer(p, epr.first, epr.second, kPiAngle);
    const LevelPopulations mixed = apply_rf_at(inverted, ctx, rf_freq_MHz, kPiAngle);
    contrast.push_back(std::abs(echo_amplitude(mixed, epr) - echo_amplitude(inverted, epr)));
    p = evolve(mixed, delay_s, ctx.rates);
    if (!comb.empty()) p = tidy_reset(p, comb, tidy_repetitions);
  }
  return contrast;
}

constexpr double kElectronSettled = 10.0;

T1nMeasurement simulate_t1n_measurement(const SimulationContext& ctx,
                                        const LevelPopulations& initial, std::pair<int, int> epr,
                                        double rf_freq_MHz, std::span<const double> t_w_grid_s) {
  T1nMeasurement out;
  DecayCurve fit_data;
  const Environment& env = ctx.environment;
  if (3.0 * env.t1e_s >= env.t1n_s / 3.0) {
    out.warnings.push_back("T1e << T1n not satisfied: the recovery mixes both processes");
  }
  for (double tw : t_w_grid_s) {
    const MsAssignmentResult r = run_ms_assignment(ctx, initial, epr, rf_freq_MHz, tw);
    out.curve.push_back({tw, r.echo});
    // early points still carry the electron recovery
    if (tw >= kElectronSettled * env.t1e_s) {
      fit_data.two_tau_s.push_back(tw);
      fit_data.amplitude.push_back(r.echo);
    }
  }
  if (fit_data.size() < 5) throw Error("T1n measurement needs at least 5 points with t_w >= 10 T1e");
  const ExponentialFit f = fit_exponential(fit_data, ExponentialKind::Single);
  double level = 0.0;
  for (double a : fit_data.amplitude) level = std::max(level, std::abs(a));
  // a change below 0.1% of the signal over the sampled window is not a
  // resolved recovery
  const double swing =
      std::abs(f.amplitude) * (std::exp(-f.rate_per_s * fit_data.two_tau_s.front()) -
                               std::exp(-f.rate_per_s * fit_data.two_tau_s.back()));
  out.no_decay = f.no_decay || swing < 1e-3 * level;
  out.t1n_s = f.tau_s;
  return out;
}

LevelDiagram assemble_level_diagram(double nuclear_spin, const AssemblyAnchor& anchor,
                                    std::span<const AssemblyStep> steps) {
  const int nn = static_cast<int>(std::lround(2.0 * nuclear_spin)) + 1;
  if (nn < 1 || std::abs(2.0 * nuclear_spin - (nn - 1)) > 1e-9) throw Error("invalid nuclear spin");
  auto mi_index = [&](double mi) {
    const double k = mi + nuclear_spin;
    const long r = std::lround(k);
    if (std::abs(k - r) > 1e-9 || r < 0 || r >= nn) {
      throw Error("projection " + std::to_string(mi) + " out of range");
    }
    return static_cast<int>(r);
  };
  const int star = mi_index(anchor.mi_star);

  // step frequency (signed) per manifold and lower index, averaged over duplicates
  std::map<std::pair<int, int>, std::vector<double>> table;
  for (const auto& s : steps) {
    if (!is_half(std::abs(s.ms), 0.5)) throw Error("step manifold must be +-1/2");
    if (!(std::abs(s.sign) == 1.0)) throw Error("step sign must be +1 or -1");
    if (!(s.frequency_MHz >= 0.0)) throw Error("step frequency must be >= 0");
    const int k = mi_index(s.mi_from);
    if (k + 1 >= nn) throw Error("step leaves the nuclear ladder");
    table[{s.ms < 0 ? 0 : 1, k}].push_back(s.sign * s.frequency_MHz);
  }
  std::map<std::pair<int, int>, double> delta;
  for (const auto& [key, values] : table) {
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (*hi - *lo > 0.5) {
      std::ostringstream os;
      os << "conflicting steps for mS=" << (key.first == 0 ? "-1/2" : "+1/2") << " mI index "
         << key.second << ": " << *lo << " vs " << *hi << " MHz";
      throw Error(os.str());
    }
    double sum = 0.0;
    for (double v : values) sum += v;
    delta[key] = sum / static_cast<double>(values.size());
  }

  LevelDiagram out;
  out.labels.reserve(2 * nn);
  out.energies_MHz.assign(2 * nn, std::nullopt);
  for (double ms : {-0.5, 0.5}) {
    for (int k = nn - 1; k >= 0; --k) out.labels.push_back({ms, k - nuclear_spin});
  }
  auto slot = [&](int manifold, int k) { return manifold * nn + (nn - 1 - k); };
  auto name = [&](int manifold, int k) {
    return format_label({manifold == 0 ? -0.5 : 0.5, k - nuclear_spin});
  };

  for (int m = 0; m < 2; ++m) {
    std::vector<std::optional<double>> e(nn);
    e[star] = m == 0 ? 0.0 : 1000.0 * anchor.epr_GHz;
    for (int k = star; k + 1 < nn; ++k) {
      const auto it = delta.find({m, k});
      if (it == delta.end() || !e[k]) {
        out.gaps.push_back("missing step " + name(m, k) + " -> " + name(m, k + 1));
        break;
      }
      e[k + 1] = *e[k] + it->second;
    }
    for (int k = star - 1; k >= 0; --k) {
      const auto it = delta.find({m, k});
      if (it == delta.end() || !e[k + 1]) {
        out.gaps.push_back("missing step " + name(m, k) + " -> " + name(m, k + 1));
        break;
      }
      e[k] = *e[k + 1] - it->second;
    }
    for (int k = 0; k < nn; ++k) out.energies_MHz[slot(m, k)] = e[k];
  }
  out.complete = std::all_of(out.energies_MHz.begin(), out.energies_MHz.end(),
                             [](const auto& v) { return v.has_value(); });
  return out;
}

std::vector<AssemblyStep> steps_from_levels(const EnergyLevels& levels, double nuclear_spin) {
  std::vector<AssemblyStep> out;
  for (double ms : {-0.5, 0.5}) {
    for (double mi = -nuclear_spin; mi < nuclear_spin - 1e-9; mi += 1.0) {
      const double d = levels.energies_mhz[levels.index_of(ms, mi + 1.0)] -
                       levels.energies_mhz[levels.index_of(ms, mi)];
      out.push_back({ms, mi, std::abs(d), d >= 0.0 ? 1.0 : -1.0});
    }
  }
  return out;
}

}  // namespace endor
