#include "endor/spin_core.hpp"

#include "endor/constants.hpp"

#include <unsupported/Eigen/KroneckerProduct>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

namespace endor {

namespace {

using constants::kDegree;

Tensor3 rot_z(double a) {
  Tensor3 r;
  r << std::cos(a), -std::sin(a), 0.0, std::sin(a), std::cos(a), 0.0, 0.0, 0.0, 1.0;
  return r;
}

Tensor3 rot_y(double a) {
  Tensor3 r;
  r << std::cos(a), 0.0, std::sin(a), 0.0, 1.0, 0.0, -std::sin(a), 0.0, std::cos(a);
  return r;
}

bool is_half_integer_multiple(double s) {
  const double twice = 2.0 * s;
  return s >= 0.0 && std::abs(twice - std::round(twice)) < 1e-12;
}

// Eigenvectors of u . (spin matrices), ordered by descending projection.
CMatrix quantized_states(double spin, const Vec3& u) {
  const auto ops = spin_matrices(spin);
  CMatrix proj = u.x() * ops[0] + u.y() * ops[1] + u.z() * ops[2];
  Eigen::SelfAdjointEigenSolver<CMatrix> es(proj);
  return es.eigenvectors().rowwise().reverse();
}

Vec3 unit_or(const Vec3& v, const Vec3& fallback) {
  const double n = v.norm();
  return n > 1e-300 ? Vec3(v / n) : fallback;
}

}  // namespace

int SpinSystem::nuclear_dim() const {
  return static_cast<int>(std::lround(2.0 * nuclear_spin)) + 1;
}

void SpinSystem::validate() const {
  if (!is_half_integer_multiple(nuclear_spin)) {
    throw Error("nuclear_spin must be a non-negative multiple of 1/2");
  }
  if (!g.allFinite() || !a_mhz.allFinite()) {
    throw Error("g and A tensors must have finite entries");
  }
}

Vec3 FieldVector::direction() const {
  const double th = theta_deg * kDegree;
  const double ph = phi_deg * kDegree;
  return {std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th)};
}

FieldVector FieldVector::from_direction(const Vec3& dir, double magnitude_mT) {
  const Vec3 u = unit_or(dir, Vec3::UnitZ());
  FieldVector f;
  f.magnitude_mT = magnitude_mT;
  f.theta_deg = std::acos(std::clamp(u.z(), -1.0, 1.0)) / kDegree;
  f.phi_deg = std::atan2(u.y(), u.x()) / kDegree;
  return f;
}

int EnergyLevels::index_of(double ms, double mi) const {
  if (labels.size() != energies_mhz.size()) {
    throw Error("levels are not labeled");
  }
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (std::abs(labels[k].ms - ms) < 1e-9 && std::abs(labels[k].mi - mi) < 1e-9) {
      return static_cast<int>(k);
    }
  }
  throw Error("no level labeled (" + std::to_string(ms) + ", " + std::to_string(mi) + ")");
}

Tensor3 euler_zyz_matrix(const Vec3& angles_deg) {
  return rot_z(angles_deg[0] * kDegree) * rot_y(angles_deg[1] * kDegree) *
         rot_z(angles_deg[2] * kDegree);
}

Tensor3 tensor_from_principal(const PrincipalForm& p) {
  const Tensor3 r = euler_zyz_matrix(p.euler_zyz_deg);
  return r.transpose() * p.values.asDiagonal() * r;
}

PrincipalForm principal_from_tensor(const Tensor3& t) {
  PrincipalForm out;
  const Tensor3 sym = 0.5 * (t + t.transpose());
  out.asymmetry_norm = (0.5 * (t - t.transpose())).norm();

  Eigen::SelfAdjointEigenSolver<Tensor3> es(sym);
  const Vec3 evals = es.eigenvalues();
  const Tensor3 evecs = es.eigenvectors();

  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return std::abs(evals[a]) > std::abs(evals[b]); });

  // Rows of R are the principal axes expressed in the crystal frame.
  Tensor3 r;
  for (int k = 0; k < 3; ++k) {
    out.values[k] = evals[order[k]];
    r.row(k) = evecs.col(order[k]).transpose();
  }
  if (r.determinant() < 0.0) {
    r.row(2) *= -1.0;
  }

  const double scale = std::max(1.0, evals.cwiseAbs().maxCoeff());
  for (int a = 0; a < 3; ++a) {
    for (int b = a + 1; b < 3; ++b) {
      if (std::abs(evals[a] - evals[b]) < 1e-9 * scale) {
        out.degenerate = true;
      }
    }
  }

  // R = Rz(alpha) Ry(beta) Rz(theta)
  const double beta = std::acos(std::clamp(r(2, 2), -1.0, 1.0));
  double alpha = 0.0;
  double theta = 0.0;
  if (std::sin(beta) > 1e-9) {
    alpha = std::atan2(r(1, 2), r(0, 2));
    theta = std::atan2(r(2, 1), -r(2, 0));
  } else if (r(2, 2) > 0.0) {
    alpha = std::atan2(r(1, 0), r(0, 0));
  } else {
    alpha = std::atan2(-r(1, 0), -r(0, 0));
  }
  out.euler_zyz_deg = Vec3(alpha, beta, theta) / kDegree;
  return out;
}

TraceCheck compare_trace(const Tensor3& t, const Vec3& quoted_values, double rel_tol) {
  TraceCheck c;
  c.matrix_trace = t.trace();
  c.principal_sum = quoted_values.sum();
  c.discrepancy = c.matrix_trace - c.principal_sum;
  c.consistent = std::abs(c.discrepancy) <= rel_tol * quoted_values.cwiseAbs().sum();
  return c;
}

std::array<CMatrix, 3> spin_matrices(double s) {
  const int n = static_cast<int>(std::lround(2.0 * s)) + 1;
  CMatrix sp = CMatrix::Zero(n, n);
  CMatrix sz = CMatrix::Zero(n, n);
  for (int k = 0; k < n; ++k) {
    const double m = s - k;
    sz(k, k) = m;
    if (k > 0) {
      // <m+1| S+ |m>
      sp(k - 1, k) = std::sqrt(s * (s + 1.0) - m * (m + 1.0));
    }
  }
  const CMatrix sm = sp.adjoint();
  const std::complex<double> i2(0.0, 2.0);
  return {(sp + sm) / 2.0, (sp - sm) / i2, sz};
}

CMatrix electron_operator(const SpinSystem& sys, const Vec3& u) {
  const auto s = spin_matrices(0.5);
  const int n = sys.nuclear_dim();
  const CMatrix se = u.x() * s[0] + u.y() * s[1] + u.z() * s[2];
  return Eigen::kroneckerProduct(se, CMatrix::Identity(n, n)).eval();
}

CMatrix nuclear_operator(const SpinSystem& sys, const Vec3& u) {
  const auto ii = spin_matrices(sys.nuclear_spin);
  const CMatrix in = u.x() * ii[0] + u.y() * ii[1] + u.z() * ii[2];
  return Eigen::kroneckerProduct(CMatrix::Identity(2, 2), in).eval();
}

HamiltonianParts hamiltonian_parts(const SpinSystem& sys, const Vec3& direction) {
  sys.validate();
  const int n = sys.nuclear_dim();
  const auto s = spin_matrices(0.5);
  const auto ii = spin_matrices(sys.nuclear_spin);
  const CMatrix eye_n = CMatrix::Identity(n, n);

  HamiltonianParts parts;
  const Vec3 geff = sys.g.transpose() * direction;
  parts.zeeman_per_mT = CMatrix::Zero(2 * n, 2 * n);
  for (int k = 0; k < 3; ++k) {
    parts.zeeman_per_mT += constants::kBohrMHzPerMilliTesla * geff[k] *
                           Eigen::kroneckerProduct(s[k], eye_n).eval();
  }

  // I . A . S = sum_k S_k (x) (sum_j A_jk I_j)
  parts.hyperfine = CMatrix::Zero(2 * n, 2 * n);
  if (n > 1) {
    for (int k = 0; k < 3; ++k) {
      CMatrix field_on_nucleus = CMatrix::Zero(n, n);
      for (int j = 0; j < 3; ++j) field_on_nucleus += sys.a_mhz(j, k) * ii[j];
      parts.hyperfine += Eigen::kroneckerProduct(s[k], field_on_nucleus).eval();
    }
  }
  return parts;
}

CMatrix build_hamiltonian(const SpinSystem& sys, const FieldVector& b) {
  return hamiltonian_parts(sys, b.direction()).at(b.magnitude_mT);
}

EnergyLevels eigenlevels(const CMatrix& h) {
  if (h.rows() != h.cols() || h.rows() == 0) {
    throw Error("Hamiltonian must be a non-empty square matrix");
  }
  const double scale = h.norm();
  if ((h - h.adjoint()).norm() > 1e-9 * scale) {
    throw Error("matrix is not Hermitian within tolerance");
  }
  Eigen::SelfAdjointEigenSolver<CMatrix> es(h);
  if (es.info() != Eigen::Success) {
    throw Error("eigensolver failed");
  }
  EnergyLevels out;
  out.energies_mhz.assign(es.eigenvalues().data(), es.eigenvalues().data() + h.rows());
  out.vectors = es.eigenvectors();
  return out;
}

ProductBasis local_product_basis(const SpinSystem& sys, const Vec3& direction) {
  const Vec3 n = unit_or(direction, Vec3::UnitZ());
  const Vec3 ue = unit_or(sys.g.transpose() * n, n);
  const Vec3 un = unit_or(sys.a_mhz * ue, ue);

  const CMatrix e_states = quantized_states(0.5, ue);
  const CMatrix n_states = quantized_states(sys.nuclear_spin, un);
  const int nn = sys.nuclear_dim();

  ProductBasis basis;
  basis.states = CMatrix::Zero(2 * nn, 2 * nn);
  basis.labels.resize(2 * nn);
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < nn; ++b) {
      const int col = a * nn + b;
      basis.states.col(col) = Eigen::kroneckerProduct(e_states.col(a), n_states.col(b));
      basis.labels[col] = {0.5 - a, sys.nuclear_spin - b};
    }
  }
  return basis;
}

Eigen::MatrixXd overlap_matrix(const CMatrix& a, const CMatrix& b) {
  return (a.adjoint() * b).cwiseAbs2();
}

Assignment assign_by_overlap(const Eigen::MatrixXd& overlap) {
  const int n = static_cast<int>(overlap.rows());
  std::vector<std::tuple<double, int, int>> entries;
  entries.reserve(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < overlap.cols(); ++j) {
      entries.emplace_back(overlap(i, j), i, j);
    }
  }
  std::sort(entries.begin(), entries.end(), [](const auto& x, const auto& y) {
    if (std::get<0>(x) != std::get<0>(y)) return std::get<0>(x) > std::get<0>(y);
    if (std::get<1>(x) != std::get<1>(y)) return std::get<1>(x) < std::get<1>(y);
    return std::get<2>(x) < std::get<2>(y);
  });

  Assignment out;
  out.new_of_old.assign(n, -1);
  std::vector<bool> taken(overlap.cols(), false);
  int assigned = 0;
  for (const auto& [value, i, j] : entries) {
    if (assigned == n) break;
    if (out.new_of_old[i] >= 0 || taken[j]) continue;
    out.new_of_old[i] = j;
    taken[j] = true;
    out.min_overlap = std::min(out.min_overlap, value);
    ++assigned;
  }
  return out;
}

EnergyLevels label_levels(EnergyLevels levels, const SpinSystem& sys, const FieldVector& b) {
  if (!(b.magnitude_mT > 0.0)) {
    throw Error("labeling requires a non-zero field");
  }
  constexpr double kRamp = 1.25;
  constexpr int kMaxSteps = 60;
  constexpr double kDominant = 0.9;
  constexpr double kAmbiguous = 0.5;

  const Vec3 dir = b.direction();
  const ProductBasis basis = local_product_basis(sys, dir);
  const HamiltonianParts parts = hamiltonian_parts(sys, dir);
  const int n = sys.dim();

  auto dominance = [&](const CMatrix& vecs) {
    const Eigen::MatrixXd ov = overlap_matrix(basis.states, vecs);
    return ov.colwise().maxCoeff().minCoeff();
  };

  // Climb until every eigenstate is dominated by one product state.
  std::vector<CMatrix> ladder{levels.vectors};
  double field = b.magnitude_mT;
  bool reached = dominance(levels.vectors) > kDominant;
  for (int step = 0; step < kMaxSteps && !reached; ++step) {
    field *= kRamp;
    ladder.push_back(eigenlevels(parts.at(field)).vectors);
    reached = dominance(ladder.back()) > kDominant;
  }

  // Labels at the top of the ladder come straight from product-state overlap.
  const Assignment top = assign_by_overlap(overlap_matrix(basis.states, ladder.back()));
  std::vector<LevelLabel> current(n);
  for (int i = 0; i < n; ++i) {
    current[top.new_of_old[i]] = basis.labels[i];
  }

  // Walk back down, carrying labels by maximal successive overlap.
  double min_overlap = 1.0;
  for (std::size_t k = ladder.size() - 1; k > 0; --k) {
    const Assignment step = assign_by_overlap(overlap_matrix(ladder[k], ladder[k - 1]));
    std::vector<LevelLabel> next(n);
    for (int i = 0; i < n; ++i) {
      next[step.new_of_old[i]] = current[i];
    }
    current = std::move(next);
    min_overlap = std::min(min_overlap, step.min_overlap);
  }

  levels.labels = std::move(current);
  levels.min_tracking_overlap = min_overlap;
  levels.labels_reliable = reached && min_overlap >= kAmbiguous;
  return levels;
}

EnergyLevels solve_levels(const SpinSystem& sys, const FieldVector& b) {
  return label_levels(eigenlevels(build_hamiltonian(sys, b)), sys, b);
}

}  // namespace endor
