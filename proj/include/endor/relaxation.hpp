#pragma once

// Temperature-dependent polarization and spin-lattice relaxation models, echo
// decay fits and the instantaneous-diffusion flip-probability average.

#include "endor/least_squares.hpp"
#include "endor/spin_core.hpp"

#include <optional>
#include <span>
#include <functional>
#include <string>
#include <vector>

namespace endor {

/// tanh(h f / 2 kB T). Throws for T <= 0.
double polarization(double temperature_K, double frequency_GHz);

/// h f / kB in kelvin.
double zeeman_temperature(double frequency_GHz);

struct T1eParams {
  double a_d = 0.0;       // 1/s, direct
  double a_r = 0.0;       // 1/(s K^9), Raman
  double a_o = 0.0;       // 1/s, Orbach prefactor
  double delta_o_K = 1.0; // Orbach gap
  double f_r_GHz = 9.56;

  void validate() const;
};

struct T1eTerms {
  double direct = 0.0;
  double raman = 0.0;
  double orbach = 0.0;
  double total = 0.0;
};

/// a_d coth(h f_r / 2 kB T) + a_r T^9 + a_o exp(-delta_o / T)
T1eTerms t1e_terms(double temperature_K, const T1eParams& p);
double t1e_rate(double temperature_K, const T1eParams& p);

struct RelaxParams {
  double sigma = 0.0;
  double gamma_d = 0.0;  // 1/s
  double gamma_r = 0.0;  // 1/(s K^9)
  double gamma_o = 0.0;  // 1/(s Hz^3): gamma_o * f_r^3 is a rate
  double f_n_MHz = 0.0;
  double f_r_GHz = 9.56;

  void validate() const;
};

struct T1nTerms {
  double electron = 0.0;  // sigma (1 - Pe^2) / T1e
  double direct = 0.0;
  double raman = 0.0;
  double orbach = 0.0;
  double total = 0.0;
};

/// Nuclear spin-lattice rate:
///   sigma (1 - Pe^2) W1e + gamma_d coth(h f_n / 2 kB T) + gamma_r T^9
///   + gamma_o f_r^3 exp(-h f_r / kB T)
T1nTerms t1n_rate(double temperature_K, const RelaxParams& rp, double t1e_rate_per_s);

enum class RateModel { T1e, T1n };

struct RateSample {
  double temperature_K = 0.0;
  double rate_per_s = 0.0;
};

struct RateFitOptions {
  /// Parameters in model order: T1e (a_d, a_r, a_o, delta_o_K),
  /// T1n (sigma, gamma_d, gamma_r, gamma_o). A heuristic guess when unset.
  std::optional<Eigen::VectorXd> init;
  /// Box constraints in the same order; all parameters default to >= 0 and
  /// delta_o to >= 0.01 K.
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  double f_r_GHz = 9.56;
  double f_n_MHz = 212.4;
  /// Electron rate used by the sigma term when fitting T1n.
  T1eParams electron;
  LsqOptions lsq;
};

struct RateTerm {
  std::string name;
  double value = 0.0;
};

struct RateFit {
  RateModel model = RateModel::T1e;
  std::vector<std::string> names;
  Eigen::VectorXd params;
  Eigen::VectorXd log_residuals;  // ln(model) - ln(data) per sample
  double rms_log = 0.0;
  bool converged = false;
  int iterations = 0;
  std::string stop_reason;
  double f_r_GHz = 9.56;
  double f_n_MHz = 212.4;
  T1eParams electron;

  T1eParams t1e() const;
  RelaxParams t1n() const;
  /// Per-process contributions at T; the last entry is the total.
  std::vector<RateTerm> terms(double temperature_K) const;
  double rate(double temperature_K) const;
};

/// Least squares on ln(rate). Needs at least two samples per parameter.
RateFit fit_rate_model(std::span<const RateSample> data, RateModel model,
                       const RateFitOptions& options = {});

struct DecayCurve {
  std::vector<double> two_tau_s;
  std::vector<double> amplitude;
  double temperature_K = 0.0;
  double field_mT = 0.0;

  /// Equal lengths, strictly increasing times.
  void validate() const;
  std::size_t size() const { return two_tau_s.size(); }
};

enum class ExponentialKind { Single, InversionRecovery };

struct ExponentialFit {
  double amplitude = 0.0;
  double rate_per_s = 0.0;
  double tau_s = 0.0;  // infinity when no decay is resolved
  double offset = 0.0;
  double reduced_chi2 = 0.0;
  double runs_z = 0.0;  // Wald-Wolfowitz z-score of residual signs
  bool no_decay = false;
  bool multi_exponential = false;
};

/// a exp(-t/tau) + c, or a (1 - 2 exp(-t/tau)) + c for inversion recovery.
/// sigma is the per-sample noise used for the reduced chi-square; without it
/// the chi-square is in data units squared and only the runs test can raise
/// the multi-exponential flag. Needs at least 5 samples.
ExponentialFit fit_exponential(const DecayCurve& data, ExponentialKind kind,
                               std::optional<double> sigma = {});

struct MimsFit {
  double e0 = 0.0;
  double t2_s = 0.0;
  double m = 0.0;
  double e0_err = 0.0;
  double t2_err = 0.0;
  double m_err = 0.0;
  bool converged = false;
};

/// E0 exp[-(2 tau / T2)^m]; log-log initialization then nonlinear refinement.
MimsFit mims_fit(const DecayCurve& data);

enum class LineKind { Delta, Gaussian, Lorentzian };

struct LineSpec {
  LineKind kind = LineKind::Delta;
  double fwhm_Hz = 0.0;
  double offset_Hz = 0.0;  // line center relative to the pulse carrier
  double weight = 1.0;     // integral of the supplied density
};

struct FlipProbability {
  double value = 0.0;
  bool renormalized = false;  // weight != 1 was divided out
};

/// Average sin^2(theta/2) over the line for a rectangular pulse:
///   integral rho(D) w1^2/(w1^2+D^2) sin^2(sqrt(w1^2+D^2) t_p / 2) dD
/// by adaptive Simpson (relative 1e-6); profiles truncated at +-8 widths.
FlipProbability id_flip_probability(double pulse_length_s, double rabi_freq_Hz,
                                    const LineSpec& line = {});

struct LineFit {
  double intercept = 0.0;
  double slope = 0.0;
  double r_squared = 0.0;
  double intercept_err = 0.0;
  double slope_err = 0.0;
};

/// Ordinary least-squares line through (x, y); needs 3 points and distinct x.
LineFit id_line_fit(std::span<const double> x, std::span<const double> y);

/// Adaptive Simpson quadrature with relative tolerance rel_tol.
double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double rel_tol = 1e-6, int max_depth = 40);

}  // namespace endor
