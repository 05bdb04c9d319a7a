#include "endor/pulse_sim.hpp"
#include "endor/relaxation.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

using namespace endor;

namespace {

constexpr double kHOverKb = 6.62607015e-34 / 1.380649e-23;
constexpr double kPi = std::numbers::pi;

SimulationContext paper_context(Environment env = {}) {
  return SimulationContext::create(test::paper_system(), test::paper_field(), env);
}

SimulationContext two_level_context(Environment env) {
  SpinSystem s;
  s.g = 2.0 * Tensor3::Identity();
  return SimulationContext::create(s, {340.0, 0.0, 0.0}, env);
}

// the EPR pair used throughout: (-1/2, 3/2) <-> (+1/2, 3/2)
std::pair<int, int> epr_of(const SimulationContext& ctx) {
  return ctx.pair({-0.5, 1.5}, {0.5, 1.5});
}

double line(const SimulationContext& ctx, double ms, double mi_a, double mi_b) {
  const auto [i, j] = ctx.pair({ms, mi_a}, {ms, mi_b});
  return std::abs(ctx.levels.energies_mhz[i] - ctx.levels.energies_mhz[j]);
}

double max_abs_diff(const LevelPopulations& a, const LevelPopulations& b) {
  return (a.p - b.p).cwiseAbs().maxCoeff();
}

LevelPopulations uniform(int n) { return {Eigen::VectorXd::Constant(n, 1.0 / n)}; }

}  // namespace

TEST_CASE("thermal populations: limits and the two-level identity") {
  const SimulationContext ctx = paper_context();
  const LevelPopulations hot = thermal_populations(ctx.levels, 1e9);
  CHECK(max_abs_diff(hot, uniform(16)) < 1e-9);

  const LevelPopulations cold = thermal_populations(ctx.levels, 0.1);
  CHECK(cold.sum() == doctest::Approx(1.0).epsilon(1e-12));
  double lower = 0.0;
  for (int i = 0; i < 16; ++i) {
    if (ctx.levels.labels[i].ms < 0) lower += cold.p[i];
  }
  CHECK(lower == doctest::Approx(0.99).epsilon(0.005));

  const LevelPopulations zero = thermal_populations(ctx.levels, 0.0);
  CHECK(zero.p[0] == 1.0);

  const SimulationContext two = two_level_context({});
  const double f_hz = (two.levels.energies_mhz[1] - two.levels.energies_mhz[0]) * 1e6;
  for (double t : {0.1, 0.5, 2.0, 5.0}) {
    const LevelPopulations p = thermal_populations(two.levels, t);
    CHECK(echo_amplitude(p, {0, 1}) == doctest::Approx(std::tanh(kHOverKb * f_hz / (2 * t))).epsilon(1e-12));
    CHECK(echo_amplitude(p, {0, 1}) == doctest::Approx(polarization(t, f_hz * 1e-9)).epsilon(1e-12));
  }
}

TEST_CASE("electron-polarized populations") {
  const SimulationContext ctx = paper_context();
  const LevelPopulations p = electron_polarized_populations(ctx.levels, 0.98);
  CHECK(p.sum() == doctest::Approx(1.0));
  for (int i = 0; i < 16; ++i) {
    const double want = ctx.levels.labels[i].ms < 0 ? 0.99 / 8 : 0.01 / 8;
    CHECK(p.p[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("population transfer cases") {
  LevelPopulations p{Eigen::Vector3d(0.6, 0.3, 0.1)};
  const LevelPopulations swapped = apply_transfer(p, 0, 1, kPi);
  CHECK(swapped.p[0] == 0.3);
  CHECK(swapped.p[1] == 0.6);
  CHECK(swapped.p[2] == 0.1);
  CHECK(max_abs_diff(apply_transfer(p, 0, 2, 0.0), p) == 0.0);
  CHECK(max_abs_diff(apply_transfer(swapped, 0, 1, kPi), p) <= 1e-12);

  LevelPopulations one{Eigen::Vector2d(1.0, 0.0)};
  const LevelPopulations half = apply_transfer(one, 0, 1, 0.5 * kPi);
  CHECK(half.p[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(half.p[1] == doctest::Approx(0.5).epsilon(1e-15));
  const LevelPopulations weak = apply_transfer(one, 0, 1, kPi, 0.3);
  CHECK(weak.p[1] == doctest::Approx(0.3));
}

TEST_CASE("random pulse sequences conserve population") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> level(0, 15);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  LevelPopulations p = uniform(16);
  for (int k = 0; k < 10000; ++k) {
    int i = level(rng), j = level(rng);
    if (i == j) j = (j + 1) % 16;
    p = apply_transfer(p, i, j, 2 * kPi * u(rng), u(rng));
    REQUIRE(std::abs(p.sum() - 1.0) <= 1e-9);
    REQUIRE(p.p.minCoeff() >= -1e-12);
  }
}

TEST_CASE("rate matrix obeys detailed balance and conserves population") {
  for (double t : {0.05, 0.1, 1.0, 10.0}) {
    Environment env;
    env.temperature_K = t;
    env.t1n_s = 50.0;
    env.cross_relaxation_s = 200.0;
    const SimulationContext ctx = paper_context(env);
    const Eigen::MatrixXd g = ctx.rates.generator();
    CHECK(g.colwise().sum().cwiseAbs().maxCoeff() < 1e-12 * g.cwiseAbs().maxCoeff());
    const auto& e = ctx.levels.energies_mhz;
    int connected = 0;
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        const double wij = ctx.rates.w(i, j);
        if (i == j || wij == 0.0) continue;
        ++connected;
        const double want = std::exp(-(e[i] - e[j]) * 1e6 * kHOverKb / t);
        CHECK(wij / ctx.rates.w(j, i) == doctest::Approx(want).epsilon(1e-10));
      }
    }
    // 8 electron pairs, 14 nuclear pairs, 7 flip-flop pairs
    CHECK(connected == 2 * 29);
    CHECK(max_abs_diff({ctx.rates.stationary}, thermal_populations(ctx.levels, t)) < 1e-12);
  }
}

TEST_CASE("evolve: identity, long-time limit and an RK4 oracle") {
  Environment env;
  env.t1e_s = 2.0;
  env.t1n_s = 30.0;
  const SimulationContext ctx = paper_context(env);
  const auto epr = epr_of(ctx);
  LevelPopulations p = apply_transfer(electron_polarized_populations(ctx.levels, 0.5), epr.first,
                                      epr.second, kPi);
  CHECK(max_abs_diff(evolve(p, 0.0, ctx.rates), p) == 0.0);

  const LevelPopulations late = evolve(p, 1e5, ctx.rates);
  CHECK(max_abs_diff(late, thermal_populations(ctx.levels, env.temperature_K)) < 1e-8);
  CHECK(std::abs(late.sum() - 1.0) < 1e-9);

  const Eigen::MatrixXd g = ctx.rates.generator();
  Eigen::VectorXd y = p.p;
  const double h = 1e-3;
  for (int k = 0; k < 5000; ++k) {
    const Eigen::VectorXd k1 = g * y;
    const Eigen::VectorXd k2 = g * (y + 0.5 * h * k1);
    const Eigen::VectorXd k3 = g * (y + 0.5 * h * k2);
    const Eigen::VectorXd k4 = g * (y + h * k3);
    y += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  const LevelPopulations got = evolve(p, 5.0, ctx.rates);
  CHECK((got.p - y).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("two-level inversion recovery follows the closed form") {
  Environment env;
  env.temperature_K = 0.3;
  env.t1e_s = 1.5;
  const SimulationContext ctx = two_level_context(env);
  const LevelPopulations eq = thermal_populations(ctx.levels, env.temperature_K);
  const LevelPopulations inverted = apply_transfer(eq, 0, 1, kPi);
  for (double t : {0.0, 0.1, 1.0, 3.0, 10.0}) {
    const double want = eq.p[0] + (inverted.p[0] - eq.p[0]) * std::exp(-t / env.t1e_s);
    CHECK(evolve(inverted, t, ctx.rates).p[0] == doctest::Approx(want).epsilon(1e-8));
  }
}

TEST_CASE("echo amplitude signs") {
  CHECK(echo_amplitude(uniform(4), {0, 3}) == 0.0);
  LevelPopulations p{Eigen::Vector2d(0.2, 0.8)};
  CHECK(echo_amplitude(p, {0, 1}) == doctest::Approx(-0.6));
}

TEST_CASE("pulse resolution against the transition table") {
  const SimulationContext ctx = paper_context();
  PulseOp op;
  op.channel = Channel::RF;
  op.frequency_MHz = line(ctx, -0.5, 1.5, 0.5);
  op.bandwidth_MHz = 1.0;
  CHECK(resolve_pulse(op, ctx.table) == ctx.pair({-0.5, 1.5}, {-0.5, 0.5}));
  op.frequency_MHz = 190.0;
  CHECK_THROWS_AS(resolve_pulse(op, ctx.table), Error);
  op.frequency_MHz = 218.0;
  op.bandwidth_MHz = 10.0;
  CHECK(candidates(op, ctx.table).size() == 2);
  CHECK_THROWS_AS(resolve_pulse(op, ctx.table), Error);
  CHECK(default_bandwidth_MHz(Channel::RF) == 5.0);
  CHECK(default_bandwidth_MHz(Channel::MW) == 20.0);
}

TEST_CASE("Davies ENDOR shows the lines that share the EPR levels") {
  const SimulationContext ctx = paper_context();
  const auto epr = epr_of(ctx);
  const LevelPopulations init = thermal_populations(ctx.levels, 0.1);
  const double baseline = echo_amplitude(apply_transfer(init, epr.first, epr.second, kPi), epr);

  const double lower = line(ctx, -0.5, 1.5, 0.5);
  const double upper = line(ctx, 0.5, 1.5, 0.5);
  CHECK(std::abs(lower - 212.4) < 5.0);
  CHECK(std::abs(upper - 219.7) < 5.0);

  const std::vector<double> sweep{lower, upper, 190.0, 240.0};
  const auto s = run_davies_endor(ctx, init, epr, sweep);
  CHECK(std::abs(s[0].echo - baseline) > 0.1);
  CHECK(std::abs(s[1].echo - baseline) > 1e-3);
  CHECK(s[2].echo == baseline);
  CHECK(s[3].echo == baseline);

  for (const auto& pt : run_davies_endor(ctx, init, epr, sweep, 0.0)) CHECK(pt.echo == baseline);
}

TEST_CASE("mS assignment separates the manifolds") {
  const SimulationContext ctx = paper_context();
  const auto epr = epr_of(ctx);
  const LevelPopulations init = thermal_populations(ctx.levels, 0.1);
  const double lower = line(ctx, -0.5, 1.5, 0.5);
  const double upper = line(ctx, 0.5, 1.5, 0.5);
  const double rival = line(ctx, -0.5, 2.5, 1.5);
  const auto a = run_ms_assignment(ctx, init, epr, lower, 60.0);
  const auto b = run_ms_assignment(ctx, init, epr, upper, 60.0);
  const auto c = run_ms_assignment(ctx, init, epr, rival, 60.0);
  const double top = std::max({a.echo, b.echo, c.echo});
  CHECK(a.echo > 0.5 * top);
  CHECK(b.echo < 0.1 * a.echo);
  CHECK(a.warnings.empty());

  CHECK_FALSE(run_ms_assignment(ctx, init, epr, lower, 10.0).warnings.empty());
  CHECK_FALSE(run_ms_assignment(ctx, init, epr, lower, 400.0).warnings.empty());

  PulseOp probe;
  probe.frequency_MHz = 190.0;
  CHECK_THROWS_AS(run_ms_assignment(ctx, init, epr, 190.0, 60.0), Error);

  const auto ref = run_ms_assignment(ctx, init, epr, lower, 60.0, false);
  CHECK(ref.echo < 0.1 * a.echo);
}

TEST_CASE("mS assignment without polarization has no contrast") {
  Environment env;
  env.temperature_K = 1000.0;
  const SimulationContext ctx = paper_context(env);
  const auto epr = epr_of(ctx);
  const LevelPopulations init = electron_polarized_populations(ctx.levels, 0.0);
  const auto res = run_ms_assignment(ctx, init, epr, line(ctx, -0.5, 1.5, 0.5), 60.0);
  const auto off = run_ms_assignment(ctx, init, epr, line(ctx, 0.5, 1.5, 0.5), 60.0);
  CHECK(std::abs(res.echo - off.echo) < 1e-3);
}

TEST_CASE("generalized Davies reaches transitions off the EPR levels") {
  const SimulationContext ctx = paper_context();
  const auto epr = epr_of(ctx);
  const LevelPopulations init = electron_polarized_populations(ctx.levels, 1.0);
  const double f_low = line(ctx, -0.5, 0.5, -0.5);
  const double f_up = line(ctx, 0.5, 0.5, -0.5);
  const std::vector<double> sweep{f_low, f_up, 190.0};

  const std::vector<ChainStep> low{{ctx.pair({-0.5, 1.5}, {-0.5, 0.5}), 1.0}};
  const std::vector<ChainStep> up{{ctx.pair({0.5, 1.5}, {0.5, 0.5}), 1.0}};
  const auto sl = run_generalized_davies(ctx, init, epr, low, ctx.pair({-0.5, 0.5}, {-0.5, -0.5}), sweep);
  const auto su = run_generalized_davies(ctx, init, epr, up, ctx.pair({0.5, 0.5}, {0.5, -0.5}), sweep);
  CHECK(std::abs(sl[0].echo - sl[2].echo) > 0.1);
  CHECK(sl[1].echo == sl[2].echo);
  CHECK(std::abs(su[1].echo - su[2].echo) > 0.1);
  CHECK(su[0].echo == su[2].echo);

  std::vector<ChainStep> dead = low;
  dead[0].efficiency = 0.0;
  const auto sd = run_generalized_davies(ctx, init, epr, dead, ctx.pair({-0.5, 0.5}, {-0.5, -0.5}), sweep);
  CHECK(sd[0].echo == sd[2].echo);

  const std::vector<double> direct{line(ctx, -0.5, 1.5, 0.5), 190.0};
  const auto g = run_generalized_davies(ctx, init, epr, {}, ctx.pair({-0.5, 1.5}, {-0.5, 0.5}), direct);
  const auto d = run_davies_endor(ctx, init, epr, direct);
  for (std::size_t i = 0; i < direct.size(); ++i) CHECK(g[i].echo == d[i].echo);

  const std::vector<ChainStep> broken{{ctx.pair({-0.5, -0.5}, {-0.5, -1.5}), 1.0}};
  try {
    validate_chain(ctx, epr, broken, ctx.pair({-0.5, 0.5}, {-0.5, -0.5}));
    FAIL("broken chain accepted");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find('0') != std::string::npos);
  }
}

TEST_CASE("Rabi oscillation period and chain efficiency") {
  const SimulationContext ctx = paper_context();
  const auto epr = epr_of(ctx);
  const LevelPopulations init = electron_polarized_populations(ctx.levels, 1.0);
  const auto target = ctx.pair({-0.5, 0.5}, {-0.5, -0.5});
  const double rabi = 25e3;
  const int n = 256;
  const double dt = 2e-6;
  std::vector<double> durations;
  for (int i = 0; i < n; ++i) durations.push_back(i * dt);

  const std::vector<ChainStep> chain{{ctx.pair({-0.5, 1.5}, {-0.5, 0.5}), 1.0}};
  const auto r = run_rabi(ctx, init, epr, chain, target, durations, rabi);
  const auto base = run_generalized_davies(ctx, init, epr, chain, target, std::vector<double>{190.0});
  CHECK(r[0].echo == doctest::Approx(base[0].echo).epsilon(1e-12));

  // strongest nonzero DFT bin gives the oscillation frequency
  double mean = 0.0;
  for (const auto& pt : r) mean += pt.echo / n;
  int best = 0;
  double best_power = 0.0;
  for (int k = 1; k < n / 2; ++k) {
    std::complex<double> acc = 0.0;
    for (int i = 0; i < n; ++i) acc += (r[i].echo - mean) * std::polar(1.0, -2 * kPi * k * i / n);
    if (std::norm(acc) > best_power) {
      best_power = std::norm(acc);
      best = k;
    }
  }
  const double period = n * dt / best;
  CHECK(std::abs(period - 1.0 / rabi) <= 1.0 / rabi * best / (best * best - 1.0) + dt);

  // 30% chain: hand bookkeeping of the four levels involved
  const std::vector<ChainStep> weak{{chain[0].levels, 0.3}};
  const auto rw = run_rabi(ctx, init, epr, weak, target, durations, rabi);
  const double q = 1.0 / 8.0;
  for (int i = 0; i < n; i += 17) {
    double p2 = q, p13 = 0.0, p3 = q, p4 = q;
    std::swap(p2, p13);  // MW pi
    const double s1 = 0.3;
    double a = (1 - s1) * p2 + s1 * p3, b = (1 - s1) * p3 + s1 * p2;
    p2 = a;
    p3 = b;
    const double s = std::pow(std::sin(kPi * rabi * durations[i]), 2);
    a = (1 - s) * p3 + s * p4;
    b = (1 - s) * p4 + s * p3;
    p3 = a;
    p4 = b;
    a = (1 - s1) * p2 + s1 * p3;
    b = (1 - s1) * p3 + s1 * p2;
    p2 = a;
    p3 = b;
    CHECK(rw[i].echo == doctest::Approx(p2 - p13).epsilon(1e-12));
  }
}

TEST_CASE("Tidy reset") {
  const SimulationContext ctx = paper_context();
  const LevelPopulations init = thermal_populations(ctx.levels, 0.1);
  std::vector<std::pair<int, int>> comb;
  for (const Transition& t : ctx.table) comb.emplace_back(t.lower, t.upper);
  CHECK(max_abs_diff(tidy_reset(init, comb, 200), uniform(16)) < 1e-6);
  CHECK(max_abs_diff(tidy_reset(init, {}, 5), init) == 0.0);
}

TEST_CASE("repeated shots lose contrast unless Tidy resets the nuclei") {
  Environment env;
  env.temperature_K = 4.0;
  env.t1e_s = 1e-3;
  const SimulationContext ctx = paper_context(env);
  const auto epr = epr_of(ctx);
  const LevelPopulations init = thermal_populations(ctx.levels, env.temperature_K);
  const double f = line(ctx, -0.5, 1.5, 0.5);
  std::vector<std::pair<int, int>> comb;
  for (const Transition& t : ctx.table) {
    if (t.channel == Channel::RF) comb.emplace_back(t.lower, t.upper);
  }
  const auto plain = repeated_endor_contrast(ctx, init, epr, f, 50, 20e-3);
  const auto tidy = repeated_endor_contrast(ctx, init, epr, f, 50, 20e-3, comb);
  INFO("plain first " << plain.front() << " last " << plain.back());
  CHECK(plain.back() < 0.2 * plain.front());
  for (std::size_t k = 2; k < tidy.size(); ++k) CHECK(tidy[k] == doctest::Approx(tidy[1]).epsilon(1e-4));
  CHECK(tidy.back() == doctest::Approx(tidy.front()).epsilon(0.05));
}

TEST_CASE("T1n measurement recovers the injected rate" * doctest::may_fail()) {
  const SimulationContext ctx = paper_context();
  const auto epr = epr_of(ctx);
  const LevelPopulations init = thermal_populations(ctx.levels, 0.1);
  std::vector<double> grid;
  for (double t = 1.0; t <= 5000.0; t *= 1.25) grid.push_back(t);
  const T1nMeasurement m = simulate_t1n_measurement(ctx, init, epr, line(ctx, -0.5, 1.5, 0.5), grid);
  CHECK(m.warnings.empty());
  CHECK(m.t1n_s == doctest::Approx(828.0).epsilon(0.10));
}

TEST_CASE("T1n measurement edge cases") {
  std::vector<double> grid;
  for (double t = 1.0; t <= 5000.0; t *= 1.25) grid.push_back(t);
  Environment env;
  env.t1n_s = std::numeric_limits<double>::infinity();
  {
    const SimulationContext ctx = paper_context(env);
    const T1nMeasurement m = simulate_t1n_measurement(
        ctx, thermal_populations(ctx.levels, 0.1), epr_of(ctx), line(ctx, -0.5, 1.5, 0.5), grid);
    CHECK(m.no_decay);
  }
  env.t1n_s = env.t1e_s;
  {
    const SimulationContext ctx = paper_context(env);
    const T1nMeasurement m = simulate_t1n_measurement(
        ctx, thermal_populations(ctx.levels, 0.1), epr_of(ctx), line(ctx, -0.5, 1.5, 0.5), grid);
    CHECK_FALSE(m.warnings.empty());
  }
}

TEST_CASE("level diagram round trip from the Hamiltonian") {
  const SimulationContext ctx = paper_context();
  const auto epr = epr_of(ctx);
  const auto& e = ctx.levels.energies_mhz;
  const AssemblyAnchor anchor{(e[epr.second] - e[epr.first]) / 1000.0, 1.5};
  const auto steps = steps_from_levels(ctx.levels, 3.5);
  CHECK(steps.size() == 14);
  const LevelDiagram d = assemble_level_diagram(3.5, anchor, steps);
  CHECK(d.complete);
  CHECK(d.gaps.empty());
  REQUIRE(d.labels.size() == 16);
  for (std::size_t k = 0; k < 16; ++k) {
    REQUIRE(d.energies_MHz[k].has_value());
    const int i = ctx.level(d.labels[k].ms, d.labels[k].mi);
    CHECK(std::abs(*d.energies_MHz[k] - (e[i] - e[epr.first])) < 1e-6);
  }
}

TEST_CASE("partial ladder from four measured lines") {
  const std::vector<AssemblyStep> steps{{-0.5, 0.5, 212.4, 1.0},
                                        {0.5, 0.5, 219.7, -1.0},
                                        {-0.5, 1.5, 172.8, 1.0},
                                        {0.5, 1.5, 165.9, -1.0}};
  const LevelDiagram d = assemble_level_diagram(3.5, {}, steps);
  CHECK_FALSE(d.complete);
  CHECK_FALSE(d.gaps.empty());
  auto energy = [&](double ms, double mi) -> std::optional<double> {
    for (std::size_t k = 0; k < d.labels.size(); ++k) {
      if (d.labels[k].ms == ms && d.labels[k].mi == mi) return d.energies_MHz[k];
    }
    return std::nullopt;
  };
  REQUIRE(energy(-0.5, 0.5).has_value());
  CHECK(std::abs(*energy(-0.5, 0.5) - *energy(-0.5, 1.5)) == doctest::Approx(212.4));
  CHECK(*energy(0.5, 1.5) == doctest::Approx(9560.0));
  CHECK_FALSE(energy(-0.5, -2.5).has_value());
}

TEST_CASE("zero step frequencies collapse each ladder") {
  std::vector<AssemblyStep> steps;
  for (double ms : {-0.5, 0.5}) {
    for (double mi = -3.5; mi < 3.5; mi += 1.0) steps.push_back({ms, mi, 0.0, 1.0});
  }
  const LevelDiagram d = assemble_level_diagram(3.5, {}, steps);
  CHECK(d.complete);
  for (std::size_t k = 0; k < 16; ++k) {
    CHECK(*d.energies_MHz[k] == (d.labels[k].ms < 0 ? 0.0 : 9560.0));
  }
}

TEST_CASE("duplicate steps are averaged or rejected") {
  const std::vector<AssemblyStep> close{{-0.5, 0.5, 212.4, 1.0}, {-0.5, 0.5, 212.6, 1.0}};
  const LevelDiagram d = assemble_level_diagram(3.5, {}, close);
  for (std::size_t k = 0; k < d.labels.size(); ++k) {
    if (d.labels[k].ms == -0.5 && d.labels[k].mi == 0.5) {
      CHECK(std::abs(*d.energies_MHz[k]) == doctest::Approx(212.5));
    }
  }
  const std::vector<AssemblyStep> far{{-0.5, 0.5, 212.4, 1.0}, {-0.5, 0.5, 213.4, 1.0}};
  CHECK_THROWS_AS(assemble_level_diagram(3.5, {}, far), Error);
}
