#include "endor/relaxation.hpp"

#include "endor/constants.hpp"
#include "endor/spin_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace endor {

namespace {

using constants::kPi;
using constants::kPlanckOverBoltzmann;

constexpr double kInf = std::numeric_limits<double>::infinity();

// h f / (2 kB T) for f in Hz
double half_ratio(double frequency_Hz, double temperature_K) {
  return kPlanckOverBoltzmann * frequency_Hz / (2.0 * temperature_K);
}

double coth(double x) { return 1.0 / std::tanh(x); }

void require_temperature(double t) {
  if (!(t > 0.0)) throw Error("temperature must be positive");
}

double simpson_step(const std::function<double(double)>& f, double a, double b, double fa,
                    double fm, double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m);
  const double rm = 0.5 * (m + b);
  const double flm = f(lm);
  const double frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double rel_tol, int max_depth) {
  if (a == b) return 0.0;
  // A coarse composite pass sets the absolute scale and keeps narrow
  // features from hiding between the first three nodes.
  constexpr int kPanels = 64;
  const double h = (b - a) / kPanels;
  std::vector<double> x(2 * kPanels + 1);
  std::vector<double> fx(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = a + 0.5 * h * static_cast<double>(i);
    fx[i] = f(x[i]);
  }
  double scale = 0.0;
  std::vector<double> coarse(kPanels);
  for (int k = 0; k < kPanels; ++k) {
    coarse[k] = h / 6.0 * (fx[2 * k] + 4.0 * fx[2 * k + 1] + fx[2 * k + 2]);
    scale += std::abs(coarse[k]);
  }
  const double tol = rel_tol * std::max(scale, 1e-300) / kPanels;
  double total = 0.0;
  for (int k = 0; k < kPanels; ++k) {
    total += simpson_step(f, x[2 * k], x[2 * k + 2], fx[2 * k], fx[2 * k + 1], fx[2 * k + 2],
                          coarse[k], tol, max_depth);
  }
  return total;
}

double polarization(double temperature_K, double frequency_GHz) {
  require_temperature(temperature_K);
  return std::tanh(half_ratio(frequency_GHz * 1e9, temperature_K));
}

double zeeman_temperature(double frequency_GHz) { return kPlanckOverBoltzmann * frequency_GHz * 1e9; }

void T1eParams::validate() const {
  if (!(a_d >= 0.0 && a_r >= 0.0 && a_o >= 0.0)) throw Error("T1e prefactors must be >= 0");
  if (!(delta_o_K > 0.0)) throw Error("Orbach gap must be positive");
  if (!(f_r_GHz > 0.0)) throw Error("EPR frequency must be positive");
}

T1eTerms t1e_terms(double temperature_K, const T1eParams& p) {
  require_temperature(temperature_K);
  T1eTerms t;
  t.direct = p.a_d * coth(half_ratio(p.f_r_GHz * 1e9, temperature_K));
  t.raman = p.a_r * std::pow(temperature_K, 9);
  t.orbach = p.a_o * std::exp(-p.delta_o_K / temperature_K);
  t.total = t.direct + t.raman + t.orbach;
  return t;
}

double t1e_rate(double temperature_K, const T1eParams& p) { return t1e_terms(temperature_K, p).total; }

void RelaxParams::validate() const {
  if (!(sigma >= 0.0 && gamma_d >= 0.0 && gamma_r >= 0.0 && gamma_o >= 0.0 && f_n_MHz >= 0.0 &&
        f_r_GHz >= 0.0)) {
    throw Error("relaxation parameters must be >= 0");
  }
}

T1nTerms t1n_rate(double temperature_K, const RelaxParams& rp, double t1e_rate_per_s) {
  require_temperature(temperature_K);
  const double f_r = rp.f_r_GHz * 1e9;
  const double pe = std::tanh(half_ratio(f_r, temperature_K));
  T1nTerms t;
  t.electron = rp.sigma * (1.0 - pe * pe) * t1e_rate_per_s;
  // coth diverges as f_n -> 0 while the prefactor stays finite; a vanishing
  // nuclear frequency switches the direct channel off.
  t.direct = rp.f_n_MHz > 0.0 ? rp.gamma_d * coth(half_ratio(rp.f_n_MHz * 1e6, temperature_K)) : 0.0;
  t.raman = rp.gamma_r * std::pow(temperature_K, 9);
  t.orbach = rp.gamma_o * f_r * f_r * f_r * std::exp(-2.0 * half_ratio(f_r, temperature_K));
  t.total = t.electron + t.direct + t.raman + t.orbach;
  return t;
}

T1eParams RateFit::t1e() const {
  if (model != RateModel::T1e) throw Error("fit is not a T1e model");
  return {params[0], params[1], params[2], params[3], f_r_GHz};
}

RelaxParams RateFit::t1n() const {
  if (model != RateModel::T1n) throw Error("fit is not a T1n model");
  return {params[0], params[1], params[2], params[3], f_n_MHz, f_r_GHz};
}

std::vector<RateTerm> RateFit::terms(double temperature_K) const {
  if (model == RateModel::T1e) {
    const T1eTerms t = t1e_terms(temperature_K, t1e());
    return {{"direct", t.direct}, {"raman", t.raman}, {"orbach", t.orbach}, {"total", t.total}};
  }
  const T1nTerms t = t1n_rate(temperature_K, t1n(), t1e_rate(temperature_K, electron));
  return {{"electron", t.electron}, {"direct", t.direct}, {"raman", t.raman},
          {"orbach", t.orbach},     {"total", t.total}};
}

double RateFit::rate(double temperature_K) const { return terms(temperature_K).back().value; }

RateFit fit_rate_model(std::span<const RateSample> data, RateModel model,
                       const RateFitOptions& options) {
  constexpr int kParams = 4;
  if (data.size() < 2 * kParams) {
    throw Error("rate fit needs at least " + std::to_string(2 * kParams) + " samples, got " +
                std::to_string(data.size()));
  }
  double t_min = kInf, t_max = 0.0, r_min = kInf, r_max = 0.0;
  for (const auto& s : data) {
    require_temperature(s.temperature_K);
    if (!(s.rate_per_s > 0.0)) throw Error("rates must be positive for a log-space fit");
    t_min = std::min(t_min, s.temperature_K);
    t_max = std::max(t_max, s.temperature_K);
    r_min = std::min(r_min, s.rate_per_s);
    r_max = std::max(r_max, s.rate_per_s);
  }

  RateFit fit;
  fit.model = model;
  fit.f_r_GHz = options.f_r_GHz;
  fit.f_n_MHz = options.f_n_MHz;
  fit.electron = options.electron;
  fit.names = model == RateModel::T1e
                  ? std::vector<std::string>{"a_d", "a_r", "a_o", "delta_o_K"}
                  : std::vector<std::string>{"sigma", "gamma_d", "gamma_r", "gamma_o"};

  const double f_r = options.f_r_GHz * 1e9;
  // natural magnitudes of each parameter for this data set
  Eigen::VectorXd natural(kParams);
  std::vector<Eigen::VectorXd> inits;
  if (model == RateModel::T1e) {
    const double direct0 = r_min / coth(half_ratio(f_r, t_min));
    const double raman0 = r_max / std::pow(t_max, 9);
    natural << direct0, raman0, r_max, t_max;
    if (options.init) {
      inits.push_back(*options.init);
    } else {
      // the Orbach gap is the only strongly nonlinear parameter: scan it
      for (double ratio = 1.0; ratio <= 60.0; ratio *= 1.6) {
        const double gap = ratio * t_max;
        Eigen::VectorXd x(kParams);
        x << 0.5 * direct0, 0.3 * raman0, 0.3 * r_max * std::exp(gap / t_max), gap;
        inits.push_back(x);
      }
    }
  } else {
    const double direct0 =
        options.f_n_MHz > 0.0 ? r_min / coth(half_ratio(options.f_n_MHz * 1e6, t_min)) : r_min;
    const double raman0 = r_max / std::pow(t_max, 9);
    const double orbach0 = r_max / (f_r * f_r * f_r * std::exp(-2.0 * half_ratio(f_r, t_max)));
    double sigma0 = 0.1;
    natural << sigma0, direct0, raman0, orbach0;
    if (options.init) {
      inits.push_back(*options.init);
    } else {
      Eigen::VectorXd x(kParams);
      x << sigma0, 0.5 * direct0, 0.3 * raman0, 0.3 * orbach0;
      inits.push_back(x);
    }
  }

  LsqOptions lsq = options.lsq;
  lsq.lower = options.lower.size() == kParams ? options.lower : Eigen::VectorXd::Zero(kParams);
  if (options.lower.size() != kParams && model == RateModel::T1e) lsq.lower[3] = 0.01;
  lsq.upper = options.upper.size() == kParams ? options.upper : Eigen::VectorXd::Constant(kParams, kInf);
  lsq.typical_scale = 1e-3 * natural.cwiseAbs();

  auto model_rate = [&](const Eigen::VectorXd& x, double t) {
    if (model == RateModel::T1e) return t1e_rate(t, {x[0], x[1], x[2], x[3], options.f_r_GHz});
    const RelaxParams rp{x[0], x[1], x[2], x[3], options.f_n_MHz, options.f_r_GHz};
    return t1n_rate(t, rp, t1e_rate(t, options.electron)).total;
  };
  auto residuals = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd r(data.size());
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double m = std::max(model_rate(x, data[k].temperature_K), 1e-300);
      r[k] = std::log(m) - std::log(data[k].rate_per_s);
    }
    return r;
  };

  LsqResult best;
  best.cost = kInf;
  for (const auto& x0 : inits) {
    LsqResult res = levenberg_marquardt(residuals, x0, lsq);
    if (res.cost < best.cost) best = std::move(res);
  }
  fit.params = best.x;
  fit.log_residuals = best.residuals;
  fit.rms_log = std::sqrt(best.cost / static_cast<double>(data.size()));
  fit.converged = best.converged;
  fit.iterations = best.iterations;
  fit.stop_reason = best.stop_reason;
  return fit;
}

void DecayCurve::validate() const {
  if (two_tau_s.size() != amplitude.size()) throw Error("decay curve columns differ in length");
  for (std::size_t i = 0; i < two_tau_s.size(); ++i) {
    if (!std::isfinite(two_tau_s[i]) || !std::isfinite(amplitude[i])) {
      throw Error("decay curve contains non-finite values");
    }
    if (i > 0 && !(two_tau_s[i] > two_tau_s[i - 1])) {
      throw Error("decay times must be strictly increasing");
    }
  }
}

namespace {

// Best (a, c) for fixed rate k, and the resulting cost.
struct LinearPart {
  double a = 0.0;
  double c = 0.0;
  double cost = 0.0;
};

LinearPart solve_linear(const DecayCurve& d, ExponentialKind kind, double k) {
  const std::size_t n = d.size();
  Eigen::MatrixXd x(n, 2);
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double e = std::exp(-k * d.two_tau_s[i]);
    x(i, 0) = kind == ExponentialKind::Single ? e : 1.0 - 2.0 * e;
    x(i, 1) = 1.0;
    y[i] = d.amplitude[i];
  }
  // minimum-norm solution keeps a = 0 when the basis function is constant
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(x);
  cod.setThreshold(1e-10);
  const Eigen::Vector2d ac = cod.solve(y);
  return {ac[0], ac[1], (x * ac - y).squaredNorm()};
}

double runs_z_score(const Eigen::VectorXd& r) {
  int pos = 0, neg = 0, runs = 0;
  int prev = 0;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    const int s = r[i] > 0.0 ? 1 : (r[i] < 0.0 ? -1 : 0);
    if (s == 0) continue;
    (s > 0 ? pos : neg)++;
    if (s != prev) ++runs;
    prev = s;
  }
  const double n1 = pos, n2 = neg, n = n1 + n2;
  if (n1 == 0 || n2 == 0 || n < 3) return 0.0;
  const double mean = 2.0 * n1 * n2 / n + 1.0;
  const double var = 2.0 * n1 * n2 * (2.0 * n1 * n2 - n) / (n * n * (n - 1.0));
  return var > 0.0 ? (runs - mean) / std::sqrt(var) : 0.0;
}

}  // namespace

ExponentialFit fit_exponential(const DecayCurve& data, ExponentialKind kind,
                               std::optional<double> sigma) {
  data.validate();
  const std::size_t n = data.size();
  if (n < 5) throw Error("exponential fit needs at least 5 samples");
  if (sigma && !(*sigma > 0.0)) throw Error("noise sigma must be positive");
  const double t_lo = std::max(data.two_tau_s.front(), 0.0);
  const double t_hi = data.two_tau_s.back();
  const double span = t_hi - t_lo;
  if (!(span > 0.0)) throw Error("decay times must span a positive interval");

  // Variable projection: scan the rate on a log grid, then polish all three
  // parameters together.
  double best_k = 0.0;
  LinearPart best = solve_linear(data, kind, 0.0);
  const double k_lo = 1e-3 / span;
  const double k_hi = 1e3 / std::max(data.two_tau_s[1] - data.two_tau_s[0], span * 1e-6);
  for (double k = k_lo; k <= k_hi; k *= 1.05) {
    const LinearPart lp = solve_linear(data, kind, k);
    if (lp.cost < best.cost * (1.0 - 1e-12)) {
      best = lp;
      best_k = k;
    }
  }

  ExponentialFit out;
  Eigen::VectorXd res(n);
  auto basis = [&](double k, double t) {
    const double e = std::exp(-k * t);
    return kind == ExponentialKind::Single ? e : 1.0 - 2.0 * e;
  };
  const double y_scale = std::max(
      std::abs(*std::max_element(data.amplitude.begin(), data.amplitude.end(),
                                 [](double a, double b) { return std::abs(a) < std::abs(b); })),
      1e-300);
  if (best_k > 0.0 && std::abs(best.a) > 1e-9 * y_scale) {
    auto residuals = [&](const Eigen::VectorXd& x) {
      Eigen::VectorXd r(n);
      for (std::size_t i = 0; i < n; ++i) {
        r[i] = x[0] * basis(x[1], data.two_tau_s[i]) + x[2] - data.amplitude[i];
      }
      return r;
    };
    LsqOptions lsq;
    lsq.step_tolerance = 1e-14;
    lsq.gradient_tolerance = 0.0;
    lsq.relative_step = 1e-7;
    lsq.lower = Eigen::Vector3d(-kInf, 0.0, -kInf);
    lsq.typical_scale = Eigen::Vector3d(y_scale, best_k, y_scale);
    const LsqResult r = levenberg_marquardt(residuals, Eigen::Vector3d(best.a, best_k, best.c), lsq);
    out.amplitude = r.x[0];
    out.rate_per_s = r.x[1];
    out.offset = r.x[2];
    res = r.residuals;
  } else {
    // no resolvable decay: a constant
    const double mean =
        std::accumulate(data.amplitude.begin(), data.amplitude.end(), 0.0) / static_cast<double>(n);
    out.offset = mean;
    for (std::size_t i = 0; i < n; ++i) res[i] = mean - data.amplitude[i];
  }
  // A decay time far beyond the sampled span is not resolved either.
  if (out.rate_per_s * span < 1e-3 || std::abs(out.amplitude) <= 1e-9 * y_scale) {
    out.no_decay = true;
  }
  out.tau_s = out.rate_per_s > 0.0 ? 1.0 / out.rate_per_s : kInf;
  if (!out.no_decay && !(out.tau_s > 0.0 && std::isfinite(out.tau_s))) {
    throw Error("exponential fit produced a non-positive decay time");
  }
  const double dof = static_cast<double>(n) - 3.0;
  const double s2 = sigma ? (*sigma) * (*sigma) : 1.0;
  out.reduced_chi2 = dof > 0 ? res.squaredNorm() / (s2 * dof) : 0.0;
  // residual signs at round-off level carry no shape information
  const double rms = std::sqrt(res.squaredNorm() / static_cast<double>(n));
  out.runs_z = rms > 1e-9 * y_scale ? runs_z_score(res) : 0.0;
  out.multi_exponential = (sigma && out.reduced_chi2 > 3.0) || out.runs_z < -3.0;
  return out;
}

MimsFit mims_fit(const DecayCurve& data) {
  data.validate();
  std::vector<double> t, y;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.amplitude[i] > 0.0 && data.two_tau_s[i] > 0.0) {
      t.push_back(data.two_tau_s[i]);
      y.push_back(data.amplitude[i]);
    }
  }
  if (t.size() < 6) throw Error("Mims fit needs at least 6 positive samples");
  const std::size_t n = t.size();

  // log-log start: ln(-ln(y/E0)) = m ln t - m ln T2, with E0 from the first
  // sample extrapolated by a short linear fit in ln y
  const double y_max = *std::max_element(y.begin(), y.end());
  double e0 = y_max * 1.02;
  for (int pass = 0; pass < 3; ++pass) {
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < n; ++i) {
      const double ratio = y[i] / e0;
      if (ratio < 0.97 && ratio > 0.03) {
        lx.push_back(std::log(t[i]));
        ly.push_back(std::log(-std::log(ratio)));
      }
    }
    if (lx.size() < 3) break;
    const LineFit lf = id_line_fit(lx, ly);
    const double m0 = lf.slope;
    const double t20 = std::exp(-lf.intercept / m0);
    if (!(m0 > 0.0) || !std::isfinite(t20)) break;
    // re-estimate E0 from the fitted shape through the early points
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double f = std::exp(-std::pow(t[i] / t20, m0));
      num += f * y[i];
      den += f * f;
    }
    if (den > 0.0) e0 = num / den;
  }

  // starting shape from the last usable regression
  double m0 = 1.0, t20 = t[n / 2];
  {
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < n; ++i) {
      const double ratio = y[i] / e0;
      if (ratio < 0.97 && ratio > 0.03) {
        lx.push_back(std::log(t[i]));
        ly.push_back(std::log(-std::log(ratio)));
      }
    }
    if (lx.size() >= 3) {
      const LineFit lf = id_line_fit(lx, ly);
      if (lf.slope > 0.0) {
        m0 = lf.slope;
        t20 = std::exp(-lf.intercept / m0);
      }
    }
  }

  auto residuals = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = x[0] * std::exp(-std::pow(t[i] / x[1], x[2])) - y[i];
    return r;
  };
  LsqOptions lsq;
  lsq.step_tolerance = 1e-14;
  lsq.gradient_tolerance = 0.0;
  lsq.relative_step = 1e-7;
  lsq.lower = Eigen::Vector3d(0.0, 1e-300, 0.05);
  lsq.typical_scale = Eigen::Vector3d(e0, t20, 1.0);
  const LsqResult r = levenberg_marquardt(residuals, Eigen::Vector3d(e0, t20, m0), lsq);

  MimsFit out;
  out.e0 = r.x[0];
  out.t2_s = r.x[1];
  out.m = r.x[2];
  out.converged = r.converged;
  if (const auto cov = parameter_covariance(r)) {
    out.e0_err = std::sqrt(std::max((*cov)(0, 0), 0.0));
    out.t2_err = std::sqrt(std::max((*cov)(1, 1), 0.0));
    out.m_err = std::sqrt(std::max((*cov)(2, 2), 0.0));
  }
  return out;
}

FlipProbability id_flip_probability(double pulse_length_s, double rabi_freq_Hz, const LineSpec& line) {
  if (!(pulse_length_s >= 0.0) || !(rabi_freq_Hz > 0.0)) {
    throw Error("pulse length must be >= 0 and Rabi frequency > 0");
  }
  const double w1 = 2.0 * kPi * rabi_freq_Hz;
  auto single = [&](double detuning) {
    const double we2 = w1 * w1 + detuning * detuning;
    const double s = std::sin(0.5 * std::sqrt(we2) * pulse_length_s);
    return w1 * w1 / we2 * s * s;
  };
  FlipProbability out;
  if (!(line.weight > 0.0)) throw Error("line weight must be positive");
  out.renormalized = std::abs(line.weight - 1.0) > 1e-12;
  const double center = 2.0 * kPi * line.offset_Hz;
  if (line.kind == LineKind::Delta) {
    out.value = single(center);
    return out;
  }
  if (!(line.fwhm_Hz > 0.0)) throw Error("line width must be positive");
  const double fwhm = 2.0 * kPi * line.fwhm_Hz;
  // Densities below are normalized over the truncated support, which also
  // removes any supplied weight.
  std::function<double(double)> density;
  double half_range = 0.0;
  if (line.kind == LineKind::Gaussian) {
    const double sigma = fwhm / (2.0 * std::sqrt(2.0 * std::log(2.0)));
    half_range = 8.0 * sigma;
    density = [sigma](double x) { return std::exp(-0.5 * x * x / (sigma * sigma)); };
  } else {
    const double gamma = 0.5 * fwhm;
    half_range = 8.0 * gamma;
    density = [gamma](double x) { return gamma / (x * x + gamma * gamma); };
  }
  const double norm = adaptive_simpson(density, -half_range, half_range, 1e-9);
  const double value = adaptive_simpson(
      [&](double x) { return density(x) * single(center + x); }, -half_range, half_range, 1e-6);
  out.value = std::clamp(value / norm, 0.0, 1.0);
  return out;
}

LineFit id_line_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error("line fit columns differ in length");
  const std::size_t n = x.size();
  if (n < 3) throw Error("line fit needs at least 3 points");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  const double x_scale = std::max(std::abs(mx), 1e-300);
  if (!(sxx > 1e-24 * x_scale * x_scale * n)) throw Error("line fit abscissae are degenerate");
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = y[i] - f.intercept - f.slope * x[i];
    sse += e * e;
  }
  f.r_squared = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  const double s2 = n > 2 ? sse / (n - 2) : 0.0;
  f.slope_err = std::sqrt(s2 / sxx);
  double sum_x2 = 0.0;
  for (double v : x) sum_x2 += v * v;
  f.intercept_err = std::sqrt(s2 * sum_x2 / (n * sxx));
  return f;
}

}  // namespace endor
