#include "endor/least_squares.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace endor {

namespace {

Eigen::VectorXd project(Eigen::VectorXd x, const LsqOptions& o) {
  if (o.lower.size() == x.size()) x = x.cwiseMax(o.lower);
  if (o.upper.size() == x.size()) x = x.cwiseMin(o.upper);
  return x;
}

bool all_finite(const Eigen::VectorXd& v) { return v.allFinite(); }

}  // namespace

Eigen::MatrixXd numeric_jacobian(const Residuals& r, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& r0, const LsqOptions& o) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd jac(r0.size(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double floor = o.typical_scale.size() == n ? o.typical_scale[j] : 1e-8;
    double h = o.relative_step * std::max(std::abs(x[j]), floor);
    if (h == 0.0) h = o.relative_step;
    Eigen::VectorXd xp = x;
    // step backwards when the forward point would leave the box
    if (o.upper.size() == n && x[j] + h > o.upper[j]) h = -h;
    xp[j] += h;
    const Eigen::VectorXd rp = r(xp);
    jac.col(j) = (rp - r0) / h;
  }
  return jac;
}

LsqResult levenberg_marquardt(const Residuals& r, const Eigen::VectorXd& x0,
                              const LsqOptions& o) {
  LsqResult out;
  out.x = project(x0, o);
  out.residuals = r(out.x);
  out.evaluations = 1;
  if (!all_finite(out.residuals)) {
    out.cost = std::numeric_limits<double>::infinity();
    out.initial_cost = out.cost;
    out.stop_reason = "non-finite residuals at start";
    return out;
  }
  out.cost = out.residuals.squaredNorm();
  out.initial_cost = out.cost;

  const Eigen::Index n = out.x.size();
  auto jacobian_at = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& rx) {
    if (o.jacobian) return o.jacobian(x, rx);
    out.evaluations += static_cast<int>(n);
    return numeric_jacobian(r, x, rx, o);
  };

  double lambda = o.initial_lambda;
  out.jacobian = jacobian_at(out.x, out.residuals);
  for (out.iterations = 0; out.iterations < o.max_iterations;) {
    const Eigen::MatrixXd& jac = out.jacobian;
    Eigen::MatrixXd jtj = jac.transpose() * jac;
    Eigen::VectorXd grad = jac.transpose() * out.residuals;
    // Parameters held at a bound by the descent direction are frozen for
    // this iteration.
    std::vector<bool> frozen(n, false);
    for (Eigen::Index j = 0; j < n; ++j) {
      const bool at_lower = o.lower.size() == n && out.x[j] <= o.lower[j] && grad[j] > 0.0;
      const bool at_upper = o.upper.size() == n && out.x[j] >= o.upper[j] && grad[j] < 0.0;
      if (at_lower || at_upper) {
        frozen[j] = true;
        grad[j] = 0.0;
        jtj.row(j).setZero();
        jtj.col(j).setZero();
        jtj(j, j) = 1.0;
      }
    }
    if (grad.cwiseAbs().maxCoeff() <= o.gradient_tolerance * std::max(1.0, out.cost)) {
      out.converged = true;
      out.stop_reason = "gradient below tolerance";
      return out;
    }
    // Marquardt scaling by the diagonal of J^T J
    const Eigen::VectorXd diag = jtj.diagonal().cwiseMax(1e-300);

    bool accepted = false;
    Eigen::VectorXd step;
    for (int attempt = 0; attempt < 40; ++attempt) {
      Eigen::MatrixXd lhs = jtj;
      lhs.diagonal() += lambda * diag;
      step = lhs.ldlt().solve(-grad);
      for (Eigen::Index j = 0; j < n; ++j) {
        if (frozen[j]) step[j] = 0.0;
      }
      const Eigen::VectorXd trial = project(out.x + step, o);
      step = trial - out.x;
      const Eigen::VectorXd rt = r(trial);
      ++out.evaluations;
      const double cost = all_finite(rt) ? rt.squaredNorm() : std::numeric_limits<double>::infinity();
      if (cost < out.cost) {
        out.x = trial;
        out.residuals = rt;
        out.cost = cost;
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
        break;
      }
      lambda *= 4.0;
      if (lambda > 1e16) break;
    }
    ++out.iterations;
    const double step_norm = step.norm();
    if (!accepted) {
      out.converged = true;
      out.stop_reason = "no further decrease";
      return out;
    }
    if (step_norm < o.step_tolerance * (out.x.norm() + o.step_tolerance)) {
      out.jacobian = jacobian_at(out.x, out.residuals);
      out.converged = true;
      out.stop_reason = "step below tolerance";
      return out;
    }
    out.jacobian = jacobian_at(out.x, out.residuals);
  }
  out.stop_reason = "iteration limit";
  return out;
}

std::optional<Eigen::MatrixXd> parameter_covariance(const LsqResult& result) {
  const Eigen::Index m = result.residuals.size();
  const Eigen::Index n = result.x.size();
  if (m <= n || result.jacobian.rows() != m) return std::nullopt;
  const Eigen::MatrixXd jtj = result.jacobian.transpose() * result.jacobian;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(jtj);
  if (!lu.isInvertible()) return std::nullopt;
  const double s2 = result.cost / static_cast<double>(m - n);
  return Eigen::MatrixXd(lu.inverse() * s2);
}

}  // namespace endor
