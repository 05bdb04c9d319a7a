#pragma once

// Bound-constrained Levenberg-Marquardt for small dense problems. Shared by
// the tensor, relaxation-rate and decay fitters.

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>

namespace endor {

using Residuals = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
using JacobianFn = std::function<Eigen::MatrixXd(const Eigen::VectorXd&, const Eigen::VectorXd&)>;

struct LsqOptions {
  int max_iterations = 200;
  double step_tolerance = 1e-6;  // relative to |x| + step_tolerance
  double relative_step = 1e-4;   // forward-difference step
  double initial_lambda = 1e-3;
  double gradient_tolerance = 1e-12;
  // Optional per-parameter floor for the finite-difference step, so that a
  // parameter sitting at zero still gets a usable step.
  Eigen::VectorXd typical_scale;
  Eigen::VectorXd lower;  // empty = unbounded
  Eigen::VectorXd upper;
  // Replaces the forward-difference Jacobian. Receives x and r(x).
  JacobianFn jacobian;
};

struct LsqResult {
  Eigen::VectorXd x;
  Eigen::VectorXd residuals;
  Eigen::MatrixXd jacobian;  // at x
  double cost = 0.0;         // sum of squared residuals
  double initial_cost = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string stop_reason;
};

/// Minimizes |r(x)|^2 starting from x0. Steps are projected onto the box
/// [lower, upper]. Non-finite residuals count as a rejected step.
LsqResult levenberg_marquardt(const Residuals& r, const Eigen::VectorXd& x0,
                              const LsqOptions& options = {});

/// Forward-difference Jacobian with the step rule of levenberg_marquardt.
Eigen::MatrixXd numeric_jacobian(const Residuals& r, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& r0, const LsqOptions& options);

/// Covariance estimate s^2 (J^T J)^-1 with s^2 = cost / (m - n); empty when
/// m <= n or J^T J is singular.
std::optional<Eigen::MatrixXd> parameter_covariance(const LsqResult& result);

}  // namespace endor
