#include "endor/spectra.hpp"

#include "endor/constants.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace endor {

namespace {

using constants::kBohrMHzPerMilliTesla;

Vec3 normalized(const Vec3& v) {
  const double n = v.norm();
  if (!(n > 0.0)) throw Error("direction vector must be non-zero");
  return v / n;
}

struct Diag {
  Eigen::VectorXd energies;
  CMatrix vectors;
};

Diag diagonalize(const HamiltonianParts& parts, double field_mT) {
  Eigen::SelfAdjointEigenSolver<CMatrix> es(parts.at(field_mT));
  return {es.eigenvalues(), es.eigenvectors()};
}

double transition_moment(const CMatrix& op, const CMatrix& vecs, int a, int b) {
  return std::norm(vecs.col(a).dot(op * vecs.col(b)));
}

void apply_threshold(std::vector<ResonancePeak>& peaks, double threshold) {
  double strongest = 0.0;
  for (const auto& p : peaks) strongest = std::max(strongest, p.moment);
  std::erase_if(peaks, [&](const ResonancePeak& p) { return p.moment < threshold * strongest; });
}

// Bracketed root of f_pair(B) - f_mw between two grid points. The pair is
// followed from the left grid point by overlap.
struct Bracket {
  double lo, hi;
  double d_lo, d_hi;
};

std::vector<ResonancePeak> scan_fields(const SpinSystem& sys, const HamiltonianParts& parts,
                                       const CMatrix& moment_op, double f_mw_MHz,
                                       ScanWindow window, const ResonanceOptions& opt) {
  const int n = sys.dim();
  const int steps = static_cast<int>(std::floor(window.width() / opt.grid_mT + 1e-9));
  std::vector<double> grid;
  for (int k = 0; k <= steps; ++k) grid.push_back(window.min_mT + k * opt.grid_mT);
  if (grid.back() < window.max_mT - 1e-9) grid.push_back(window.max_mT);

  // column of each tracked state at the previous grid point
  std::vector<int> col(n);
  for (int t = 0; t < n; ++t) col[t] = t;

  auto pair_detuning = [&](const Diag& d, int ca, int cb) {
    return std::abs(d.energies[cb] - d.energies[ca]) - f_mw_MHz;
  };

  auto refine = [&](const Diag& left, int ca, int cb, Bracket br) {
    // Illinois variant of regula falsi, states re-identified against the
    // left grid point at every trial field.
    const Eigen::VectorXcd va = left.vectors.col(ca);
    const Eigen::VectorXcd vb = left.vectors.col(cb);
    double root = br.lo;
    int side = 0;
    for (int it = 0; it < 200; ++it) {
      const double trial = (br.lo * br.d_hi - br.hi * br.d_lo) / (br.d_hi - br.d_lo);
      const double b = std::isfinite(trial) && trial > br.lo && trial < br.hi
                           ? trial
                           : 0.5 * (br.lo + br.hi);
      const Diag d = diagonalize(parts, b);
      int ja = 0;
      int jb = 0;
      (d.vectors.adjoint() * va).cwiseAbs2().maxCoeff(&ja);
      (d.vectors.adjoint() * vb).cwiseAbs2().maxCoeff(&jb);
      if (ja == jb) {
        // Degenerate identification; fall back to energy ordering.
        jb = ja + (ca < cb ? 1 : -1);
        jb = std::clamp(jb, 0, n - 1);
      }
      const double dv = pair_detuning(d, ja, jb);
      root = b;
      if (std::abs(dv) <= opt.tolerance_MHz || br.hi - br.lo < 1e-9) break;
      if ((dv < 0.0) == (br.d_lo < 0.0)) {
        br.lo = b;
        br.d_lo = dv;
        if (side == -1) br.d_hi *= 0.5;
        side = -1;
      } else {
        br.hi = b;
        br.d_hi = dv;
        if (side == 1) br.d_lo *= 0.5;
        side = 1;
      }
    }
    return root;
  };

  std::vector<ResonancePeak> peaks;
  Diag prev = diagonalize(parts, grid.front());
  for (std::size_t k = 1; k < grid.size(); ++k) {
    Diag cur = diagonalize(parts, grid[k]);
    const Assignment asg = assign_by_overlap(overlap_matrix(prev.vectors, cur.vectors));
    std::vector<int> next(n);
    for (int t = 0; t < n; ++t) next[t] = asg.new_of_old[col[t]];

    for (int s = 0; s < n; ++s) {
      for (int t = s + 1; t < n; ++t) {
        const double d0 = pair_detuning(prev, col[s], col[t]);
        const double d1 = pair_detuning(cur, next[s], next[t]);
        if ((d0 < 0.0) == (d1 < 0.0)) continue;
        double root = grid[k - 1];
        if (d0 != 0.0) {
          root = refine(prev, col[s], col[t], {grid[k - 1], grid[k], d0, d1});
        }
        // Identify the pair at the root and evaluate its moment there.
        const Diag at = diagonalize(parts, root);
        int ja = 0;
        int jb = 0;
        (at.vectors.adjoint() * prev.vectors.col(col[s])).cwiseAbs2().maxCoeff(&ja);
        (at.vectors.adjoint() * prev.vectors.col(col[t])).cwiseAbs2().maxCoeff(&jb);
        if (ja == jb) continue;
        ResonancePeak p;
        p.field_mT = root;
        p.i = std::min(ja, jb);
        p.j = std::max(ja, jb);
        p.frequency_GHz = (at.energies[p.j] - at.energies[p.i]) / 1000.0;
        p.moment = transition_moment(moment_op, at.vectors, p.i, p.j);
        p.system = sys.label;
        peaks.push_back(std::move(p));
      }
    }
    col = next;
    prev = std::move(cur);
  }
  return peaks;
}

std::vector<ResonancePeak> tracked_fields(const SpinSystem& sys, const Vec3& dir,
                                          double f_mw_GHz, ScanWindow window,
                                          const ResonanceOptions& opt) {
  const AllowedLines lines = allowed_line_fields(sys, dir, f_mw_GHz, window.max_mT, opt);
  std::vector<ResonancePeak> peaks;
  for (std::size_t r = 0; r < lines.field_mT.size(); ++r) {
    const double b = lines.field_mT[r];
    if (std::isnan(b) || b < window.min_mT || b > window.max_mT) continue;
    ResonancePeak p;
    p.field_mT = b;
    p.i = lines.lower[r];
    p.j = lines.upper[r];
    p.frequency_GHz = f_mw_GHz;
    p.moment = lines.moment[r];
    p.system = sys.label;
    peaks.push_back(std::move(p));
  }
  return peaks;
}

}  // namespace

AllowedLines allowed_line_fields(const SpinSystem& sys, const Vec3& direction, double f_mw_GHz,
                                 double max_field_mT, const ResonanceOptions& options,
                                 std::span<const double> guesses_mT) {
  const Vec3 dir = normalized(direction);
  const int nn = sys.nuclear_dim();
  const double spin = sys.nuclear_spin;
  const double f_mw_MHz = 1000.0 * f_mw_GHz;
  const HamiltonianParts parts = hamiltonian_parts(sys, dir);
  const CMatrix moment_op =
      electron_operator(sys, sys.g.transpose() * drive_direction(dir, options.drive_direction));

  AllowedLines out;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.field_mT.assign(nn, nan);
  out.moment.assign(nn, 0.0);
  out.lower.assign(nn, 0);
  out.upper.assign(nn, 0);

  const Vec3 geff_vec = sys.g.transpose() * dir;
  const double geff = geff_vec.norm();
  if (!(geff > 0.0)) return out;
  const double coupling = (sys.a_mhz * (geff_vec / geff)).norm();
  const CMatrix& zeeman = parts.zeeman_per_mT;

  for (int r = 0; r < nn; ++r) {
    const double mi = -spin + r;
    // rank inside each manifold: mS = -1/2 ascends with falling mI,
    // mS = +1/2 with rising mI
    const int lower = static_cast<int>(std::lround(spin - mi));
    const int upper = nn + r;
    out.lower[r] = lower;
    out.upper[r] = upper;

    double b = (f_mw_MHz - mi * coupling) / (kBohrMHzPerMilliTesla * geff);
    if (static_cast<int>(guesses_mT.size()) == nn && std::isfinite(guesses_mT[r]) &&
        guesses_mT[r] > 0.0) {
      b = guesses_mT[r];
    }
    if (!(b > 0.0)) b = f_mw_MHz / (kBohrMHzPerMilliTesla * geff);
    bool ok = false;
    Diag d;
    for (int it = 0; it < 60; ++it) {
      d = diagonalize(parts, b);
      const double f = d.energies[upper] - d.energies[lower];
      const double slope = (d.vectors.col(upper).dot(zeeman * d.vectors.col(upper)) -
                            d.vectors.col(lower).dot(zeeman * d.vectors.col(lower)))
                               .real();
      const double err = f - f_mw_MHz;
      if (std::abs(err) <= 1e-10 * std::max(1.0, f_mw_MHz)) {
        ok = true;
        break;
      }
      if (!(slope > 1e-9)) break;
      double next = b - err / slope;
      if (next <= 0.0) next = 0.5 * b;
      if (next > 4.0 * max_field_mT + 1.0) break;
      b = next;
    }
    if (!ok) continue;
    out.field_mT[r] = b;
    out.moment[r] = transition_moment(moment_op, d.vectors, lower, upper);
  }
  return out;
}

SpinSystem c2_partner(const SpinSystem& sys) {
  const Tensor3 c = Vec3(-1.0, 1.0, -1.0).asDiagonal();
  SpinSystem out = sys;
  out.g = c * sys.g * c.transpose();
  out.a_mhz = c * sys.a_mhz * c.transpose();
  return out;
}

SpinSystem even_isotope(const SpinSystem& sys) {
  SpinSystem out = sys;
  out.nuclear_spin = 0.0;
  out.a_mhz.setZero();
  out.label = sys.label.empty() ? "I=0" : sys.label + " (I=0)";
  return out;
}

Vec3 drive_direction(const Vec3& b0_direction, const std::optional<Vec3>& override_dir) {
  const Vec3 n = normalized(b0_direction);
  auto perpendicular = [&](const Vec3& v) { return Vec3(v - v.dot(n) * n); };
  Vec3 b1 = perpendicular(override_dir.value_or(Vec3::UnitY()));
  if (b1.norm() < 1e-9) b1 = perpendicular(Vec3::UnitX());
  if (b1.norm() < 1e-9) b1 = perpendicular(Vec3::UnitZ());
  return b1.normalized();
}

std::vector<ResonancePeak> resonance_fields(const SpinSystem& sys, const Vec3& direction,
                                            double f_mw_GHz, ScanWindow window,
                                            const ResonanceOptions& options) {
  if (!(window.min_mT >= 0.0) || !(window.max_mT > window.min_mT)) {
    throw Error("scan window must satisfy 0 <= min < max");
  }
  if (!(options.grid_mT > 0.0)) throw Error("scan grid must be positive");
  if (!(f_mw_GHz > 0.0)) throw Error("microwave frequency must be positive");

  const Vec3 dir = normalized(direction);
  const HamiltonianParts parts = hamiltonian_parts(sys, dir);
  const Vec3 b1 = drive_direction(dir, options.drive_direction);
  const CMatrix moment_op = electron_operator(sys, sys.g.transpose() * b1);
  const double f_mw_MHz = 1000.0 * f_mw_GHz;

  std::vector<ResonancePeak> peaks =
      options.method == RootSearch::Scan
          ? scan_fields(sys, parts, moment_op, f_mw_MHz, window, options)
          : tracked_fields(sys, dir, f_mw_GHz, window, options);
  apply_threshold(peaks, options.moment_threshold);
  std::sort(peaks.begin(), peaks.end(),
            [](const ResonancePeak& a, const ResonancePeak& b) { return a.field_mT < b.field_mT; });
  return peaks;
}

std::vector<ResonancePeak> class_pair_fields(const SpinSystem& sys, const Vec3& direction,
                                             double f_mw_GHz, ScanWindow window,
                                             const ResonanceOptions& options) {
  auto peaks = resonance_fields(sys, direction, f_mw_GHz, window, options);
  auto partner = resonance_fields(c2_partner(sys), direction, f_mw_GHz, window, options);
  for (auto& p : partner) p.class_id = 2;
  peaks.insert(peaks.end(), partner.begin(), partner.end());
  std::stable_sort(peaks.begin(), peaks.end(), [](const auto& a, const auto& b) {
    return a.field_mT < b.field_mT;
  });
  return peaks;
}

std::vector<NmrLine> endor_frequencies(const SpinSystem& sys, const FieldVector& b) {
  const EnergyLevels levels = solve_levels(sys, b);
  const Vec3 xp = drive_direction(b.direction());
  const CMatrix ix = nuclear_operator(sys, xp);

  std::vector<NmrLine> lines;
  const double spin = sys.nuclear_spin;
  for (double ms : {-0.5, 0.5}) {
    for (double mi = -spin; mi < spin - 1e-9; mi += 1.0) {
      NmrLine line;
      line.manifold_ms = ms;
      line.mi_from = mi;
      line.mi_to = mi + 1.0;
      line.level_from = levels.index_of(ms, mi);
      line.level_to = levels.index_of(ms, mi + 1.0);
      line.frequency_MHz =
          std::abs(levels.energies_mhz[line.level_to] - levels.energies_mhz[line.level_from]);
      line.moment = transition_moment(ix, levels.vectors, line.level_from, line.level_to);
      line.labels_reliable = levels.labels_reliable;
      lines.push_back(line);
    }
  }
  return lines;
}

FieldGradient transition_field_gradient(const SpinSystem& sys, const FieldVector& b,
                                        LevelLabel from, LevelLabel to) {
  const EnergyLevels center = solve_levels(sys, b);
  const int ia = center.index_of(from.ms, from.mi);
  const int ib = center.index_of(to.ms, to.mi);
  const HamiltonianParts parts = hamiltonian_parts(sys, b.direction());

  struct Sample {
    double freq;
    bool tracked;
  };
  auto sample = [&](double field) {
    const Diag d = diagonalize(parts, field);
    const Assignment asg = assign_by_overlap(overlap_matrix(center.vectors, d.vectors));
    const int ja = asg.new_of_old[ia];
    const int jb = asg.new_of_old[ib];
    const Eigen::MatrixXd ov = overlap_matrix(center.vectors, d.vectors);
    const bool tracked = ov(ia, ja) >= 0.5 && ov(ib, jb) >= 0.5;
    return Sample{d.energies[jb] - d.energies[ja], tracked};
  };

  const double b0 = b.magnitude_mT;
  const double f0 = center.energies_mhz[ib] - center.energies_mhz[ia];
  constexpr double kStep = 0.1;
  constexpr double kHalf = 0.05;
  const Sample up = sample(b0 + kStep);
  const Sample down = sample(b0 - kStep);
  const Sample up_half = sample(b0 + kHalf);
  const Sample down_half = sample(b0 - kHalf);

  // Frequencies are reported as positive quantities.
  const double sign = f0 < 0.0 ? -1.0 : 1.0;
  FieldGradient g;
  g.forward_mhz_per_T = sign * (up.freq - f0) / kStep * 1000.0;
  g.backward_mhz_per_T = sign * (f0 - down.freq) / kStep * 1000.0;
  if (up.tracked && down.tracked) {
    g.mhz_per_T = sign * (up.freq - down.freq) / (2.0 * kStep) * 1000.0;
    g.check_mhz_per_T = sign * (up_half.freq - down_half.freq) / (2.0 * kHalf) * 1000.0;
    const double scale = std::max(std::abs(g.check_mhz_per_T), 1e-12);
    g.disagreement = std::abs(g.mhz_per_T - g.check_mhz_per_T) > 0.01 * scale;
  } else {
    g.one_sided = true;
    g.mhz_per_T = up.tracked ? g.forward_mhz_per_T : g.backward_mhz_per_T;
    g.check_mhz_per_T = g.mhz_per_T;
  }
  return g;
}

FieldGradient nmr_field_gradient(const SpinSystem& sys, const FieldVector& b, const NmrLine& line) {
  return transition_field_gradient(sys, b, {line.manifold_ms, line.mi_from},
                                   {line.manifold_ms, line.mi_to});
}

std::vector<double> stick_to_lineshape(std::span<const ResonancePeak> peaks, double width_mT,
                                       LineShape shape, std::span<const double> grid_mT) {
  if (!(width_mT > 0.0)) throw Error("line width must be positive");
  std::vector<double> out(grid_mT.size(), 0.0);
  const double sigma = width_mT / (2.0 * std::sqrt(2.0 * std::log(2.0)));
  const double gamma = width_mT / 2.0;
  for (const auto& p : peaks) {
    for (std::size_t k = 0; k < grid_mT.size(); ++k) {
      const double x = grid_mT[k] - p.field_mT;
      const double profile =
          shape == LineShape::Gaussian
              ? std::exp(-0.5 * x * x / (sigma * sigma)) / (sigma * std::sqrt(2.0 * constants::kPi))
              : gamma / (constants::kPi * (x * x + gamma * gamma));
      out[k] += p.moment * profile;
    }
  }
  return out;
}

}  // namespace endor
