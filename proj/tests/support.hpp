#pragma once

// Paper system fixtures and brute-force oracles shared by the unit tests.

#include "endor/spin_core.hpp"

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace endor::test {

SpinSystem paper_system();
FieldVector paper_field();

/// Cyclic Jacobi rotations on a real symmetric matrix; ascending eigenvalues.
std::vector<double> jacobi_eigenvalues(Eigen::MatrixXd a);

/// Eigenvalues of a Hermitian matrix through its real 2n x 2n embedding
/// [[Re, -Im], [Im, Re]], whose spectrum repeats each eigenvalue twice.
std::vector<double> hermitian_eigenvalues_oracle(const CMatrix& h);

CMatrix random_hermitian(int n, std::mt19937_64& rng);

/// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace endor::test
