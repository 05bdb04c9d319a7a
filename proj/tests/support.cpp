#include "support.hpp"

#include <algorithm>
#include <cmath>

namespace endor::test {

SpinSystem paper_system() {
  SpinSystem s;
  s.nuclear_spin = 3.5;
  s.g << -1.03, -2.48, 0.44, -2.49, -2.19, -0.14, 0.44, -0.14, 1.39;
  s.a_mhz << 495.7, 687.4, -232.8, 687.4, 751.8, 165.8, -232.8, 165.8, -338.3;
  s.label = "143Nd";
  return s;
}

FieldVector paper_field() { return {402.7, -2.24, -66.35}; }

std::vector<double> jacobi_eigenvalues(Eigen::MatrixXd a) {
  const int n = static_cast<int>(a.rows());
  const double scale = std::max(a.norm(), 1e-300);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    }
    if (std::sqrt(off) < 1e-15 * scale) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (int i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

std::vector<double> hermitian_eigenvalues_oracle(const CMatrix& h) {
  const int n = static_cast<int>(h.rows());
  Eigen::MatrixXd m(2 * n, 2 * n);
  m << h.real(), -h.imag(), h.imag(), h.real();
  const auto doubled = jacobi_eigenvalues(m);
  std::vector<double> ev;
  for (int i = 0; i < 2 * n; i += 2) ev.push_back(0.5 * (doubled[i] + doubled[i + 1]));
  return ev;
}

CMatrix random_hermitian(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  CMatrix m(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) m(i, j) = {g(rng), g(rng)};
  }
  return 0.5 * (m + m.adjoint());
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("endor-lab-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace endor::test
