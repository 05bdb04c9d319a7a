#pragma once

// Coupled electron (S = 1/2) and nuclear spin Hamiltonian:
//   H = beta B0 . g . S + I . A . S      (energies in MHz, fields in mT)
// plus the tensor <-> principal-axis conversions used to report fitted
// interaction tensors.

#include <Eigen/Dense>

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace endor {

using Vec3 = Eigen::Vector3d;
using Tensor3 = Eigen::Matrix3d;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SpinSystem {
  double nuclear_spin = 0.0;  // 0, 1/2, 1, ...
  Tensor3 g = Tensor3::Identity();
  Tensor3 a_mhz = Tensor3::Zero();
  std::string label;

  int nuclear_dim() const;
  int dim() const { return 2 * nuclear_dim(); }
  /// Throws endor::Error for non-(half-)integer spin or non-finite tensors.
  void validate() const;
};

struct PrincipalForm {
  Vec3 values = Vec3::Zero();
  Vec3 euler_zyz_deg = Vec3::Zero();  // (alpha, beta, theta)
  // Filled by principal_from_tensor only.
  bool degenerate = false;
  double asymmetry_norm = 0.0;
};

/// Static field in the (D2, b, D1) crystal frame.
struct FieldVector {
  double magnitude_mT = 0.0;
  double theta_deg = 0.0;
  double phi_deg = 0.0;

  Vec3 direction() const;
  Vec3 vector_mT() const { return magnitude_mT * direction(); }
  static FieldVector from_direction(const Vec3& dir, double magnitude_mT);
};

struct LevelLabel {
  double ms = 0.0;
  double mi = 0.0;
};

struct EnergyLevels {
  std::vector<double> energies_mhz;  // ascending
  CMatrix vectors;                   // columns, product basis |mS> (x) |mI>
  std::vector<LevelLabel> labels;    // empty until label_levels
  bool labels_reliable = false;
  double min_tracking_overlap = 0.0;

  std::size_t size() const { return energies_mhz.size(); }
  /// Level carrying label (ms, mi); throws if absent or unlabeled.
  int index_of(double ms, double mi) const;
};

/// Rotation matrix Rz(alpha) Ry(beta) Rz(theta), angles in degrees.
Tensor3 euler_zyz_matrix(const Vec3& angles_deg);

/// Tensor in the crystal frame: R^T diag(values) R with R = euler_zyz_matrix.
Tensor3 tensor_from_principal(const PrincipalForm& p);

/// Decomposes the symmetric part of t. Values are ordered by descending
/// magnitude; the Euler angles satisfy tensor_from_principal(result) == sym(t).
PrincipalForm principal_from_tensor(const Tensor3& t);

/// Trace of a tensor against the sum of separately quoted principal values.
/// A similarity transform keeps the trace, so a mismatch means one of the two
/// is wrong.
struct TraceCheck {
  double matrix_trace = 0.0;
  double principal_sum = 0.0;
  double discrepancy = 0.0;  // matrix_trace - principal_sum
  bool consistent = true;    // |discrepancy| <= rel_tol * sum |quoted values|
};
TraceCheck compare_trace(const Tensor3& t, const Vec3& quoted_values, double rel_tol = 0.01);

/// Spin matrices (x, y, z) for spin s in the basis m = s, s-1, ..., -s.
std::array<CMatrix, 3> spin_matrices(double s);

/// Field-independent pieces of the Hamiltonian for a fixed field direction:
/// H(B) = B * zeeman_per_mT + hyperfine.
struct HamiltonianParts {
  CMatrix zeeman_per_mT;
  CMatrix hyperfine;

  CMatrix at(double field_mT) const { return field_mT * zeeman_per_mT + hyperfine; }
};

HamiltonianParts hamiltonian_parts(const SpinSystem& sys, const Vec3& direction);
CMatrix build_hamiltonian(const SpinSystem& sys, const FieldVector& b);

/// Electron and nuclear operator (u . S), (u . I) in the full product space.
CMatrix electron_operator(const SpinSystem& sys, const Vec3& u);
CMatrix nuclear_operator(const SpinSystem& sys, const Vec3& u);

/// Diagonalizes a Hermitian matrix. Rejects input whose anti-Hermitian part
/// exceeds 1e-9 of its norm.
EnergyLevels eigenlevels(const CMatrix& h);

/// Product states quantized along the local electron axis (g^T n) and the
/// hyperfine field it produces at the nucleus (A g^T n). Columns follow the
/// product-basis index; labels give (mS, mI) of each column.
struct ProductBasis {
  CMatrix states;
  std::vector<LevelLabel> labels;
};
ProductBasis local_product_basis(const SpinSystem& sys, const Vec3& direction);

/// One-to-one assignment maximizing overlap greedily over the whole matrix.
/// overlap(i, j) relates old state i to new state j; returns new index per
/// old index and the smallest overlap that was used.
struct Assignment {
  std::vector<int> new_of_old;
  double min_overlap = 1.0;
};
Assignment assign_by_overlap(const Eigen::MatrixXd& overlap);

/// |<a_i|b_j>|^2 for all column pairs.
Eigen::MatrixXd overlap_matrix(const CMatrix& a, const CMatrix& b);

/// Assigns (mS, mI) by adiabatic continuation from the high-field limit.
EnergyLevels label_levels(EnergyLevels levels, const SpinSystem& sys, const FieldVector& b);

/// build_hamiltonian + eigenlevels + label_levels.
EnergyLevels solve_levels(const SpinSystem& sys, const FieldVector& b);

}  // namespace endor
