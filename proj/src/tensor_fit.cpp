#include "endor/tensor_fit.hpp"

#include "endor/constants.hpp"
#include "endor/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace endor {

namespace {

constexpr int kSymIndex[6][2] = {{0, 0}, {0, 1}, {0, 2}, {1, 1}, {1, 2}, {2, 2}};
constexpr int kTensorParams = 12;

Tensor3 unpack(const Eigen::Matrix<double, 6, 1>& v) {
  Tensor3 t;
  for (int k = 0; k < 6; ++k) {
    t(kSymIndex[k][0], kSymIndex[k][1]) = v[k];
    t(kSymIndex[k][1], kSymIndex[k][0]) = v[k];
  }
  return t;
}

Eigen::Matrix<double, 6, 1> pack(const Tensor3& t) {
  const Tensor3 s = 0.5 * (t + t.transpose());
  Eigen::Matrix<double, 6, 1> v;
  for (int k = 0; k < 6; ++k) v[k] = s(kSymIndex[k][0], kSymIndex[k][1]);
  return v;
}

// Newton seeds for one record: per class, one slot per nuclear projection.
using Seeds = std::array<std::vector<double>, 2>;

struct RecordOutcome {
  std::vector<double> fields;  // merged, sorted
  Seeds seeds;
  bool ok = true;
};

RecordOutcome simulate_record(const SpinSystem& class1, const SpinSystem& class2, const Vec3& dir,
                              const Roadmap& data, const ObjectiveOptions& opt,
                              const Seeds* seeds) {
  RecordOutcome out;
  const SpinSystem* systems[2] = {&class1, &class2};
  for (int c = 0; c < 2; ++c) {
    std::span<const double> guess;
    if (seeds != nullptr) guess = (*seeds)[c];
    const AllowedLines lines = allowed_line_fields(*systems[c], dir, data.f_mw_GHz,
                                                   data.window.max_mT, opt.resonance, guess);
    double strongest = 0.0;
    for (double m : lines.moment) strongest = std::max(strongest, m);
    for (std::size_t r = 0; r < lines.field_mT.size(); ++r) {
      const double b = lines.field_mT[r];
      if (!std::isfinite(b) || b < data.window.min_mT || b > data.window.max_mT) continue;
      if (lines.moment[r] < opt.resonance.moment_threshold * strongest) continue;
      out.fields.push_back(b);
    }
    out.seeds[c] = lines.field_mT;
  }
  std::sort(out.fields.begin(), out.fields.end());
  const auto last = std::unique(out.fields.begin(), out.fields.end(), [&](double a, double b) {
    return b - a < opt.resolution_mT;
  });
  out.fields.erase(last, out.fields.end());
  return out;
}

double penalty_of(const Roadmap& data, const ObjectiveOptions& opt) {
  return opt.mismatch_penalty_mT.value_or(2.0 * data.window.width());
}

Vec3 record_direction(const FitParams& p, const RoadmapRecord& rec) {
  return plane_direction(rec.plane, rec.angle_deg + p.plane_offset_deg[static_cast<int>(rec.plane)]);
}

// Fixed-length residual vector: one slot per experimental point plus one
// slot per record that carries the surplus of simulated peaks.
class Evaluator {
 public:
  Evaluator(const Roadmap& data, const ObjectiveOptions& opt)
      : data_(data), opt_(opt), seeds_(data.records.size()), last_(data.records.size()) {
    offsets_.reserve(data.records.size() + 1);
    std::size_t at = 0;
    for (const auto& rec : data.records) {
      offsets_.push_back(at);
      at += rec.fields_mT.size() + 1;
    }
    size_ = at;
  }

  std::size_t size() const { return size_; }

  Eigen::VectorXd residuals(const FitParams& p, bool use_seeds, bool remember,
                            ObjectiveValue* summary = nullptr) {
    const SpinSystem class1 = p.system(opt_.nuclear_spin);
    const SpinSystem class2 = c2_partner(class1);
    const double penalty = penalty_of(data_, opt_);
    Eigen::VectorXd r(size_);
    std::vector<std::size_t> unmatched(data_.records.size(), 0);
    std::vector<char> skipped(data_.records.size(), 0);

    parallel_for(data_.records.size(), opt_.threads, [&](std::size_t k) {
      const RoadmapRecord& rec = data_.records[k];
      const std::size_t base = offsets_[k];
      const std::size_t n_exp = rec.fields_mT.size();
      RecordOutcome sim;
      try {
        const Seeds* seeds = use_seeds && !seeds_[k][0].empty() ? &seeds_[k] : nullptr;
        sim = simulate_record(class1, class2, record_direction(p, rec), data_, opt_, seeds);
      } catch (const Error&) {
        sim.ok = false;
      }
      if (!sim.ok) {
        skipped[k] = 1;
        for (std::size_t i = 0; i <= n_exp; ++i) r[base + i] = 0.0;
        return;
      }
      if (remember) last_[k] = sim.seeds;
      const std::size_t n_sim = sim.fields.size();
      for (std::size_t i = 0; i < n_exp; ++i) {
        r[base + i] = i < n_sim ? sim.fields[i] - rec.fields_mT[i] : penalty;
      }
      const std::size_t extra = n_sim > n_exp ? n_sim - n_exp : 0;
      r[base + n_exp] = std::sqrt(static_cast<double>(extra)) * penalty;
      unmatched[k] = extra + (n_exp > n_sim ? n_exp - n_sim : 0);
    });

    if (summary != nullptr) {
      summary->n_points = data_.point_count();
      summary->unmatched = std::accumulate(unmatched.begin(), unmatched.end(), std::size_t{0});
      summary->skipped_records = static_cast<std::size_t>(std::count(skipped.begin(), skipped.end(), 1));
      summary->skipped_fraction =
          data_.records.empty() ? 0.0
                                : static_cast<double>(summary->skipped_records) / data_.records.size();
      summary->value = summary->n_points == 0 ? 0.0 : r.squaredNorm() / summary->n_points;
    }
    return r;
  }

  // The most recent remembered evaluation becomes the seed set.
  void promote() { seeds_ = last_; }
  void clear_seeds() {
    for (auto& s : seeds_) s = Seeds{};
  }

 private:
  const Roadmap& data_;
  ObjectiveOptions opt_;
  std::vector<std::size_t> offsets_;
  std::size_t size_ = 0;
  std::vector<Seeds> seeds_;
  std::vector<Seeds> last_;
};

struct Layout {
  bool offsets = false;
  int size() const { return kTensorParams + (offsets ? 3 : 0); }
};

Eigen::VectorXd to_vector(const FitParams& p, Layout layout) {
  Eigen::VectorXd x(layout.size());
  x.head<6>() = p.g_sym;
  x.segment<6>(6) = p.a_sym_mhz;
  if (layout.offsets) {
    for (int k = 0; k < 3; ++k) x[kTensorParams + k] = p.plane_offset_deg[k];
  }
  return x;
}

FitParams from_vector(const Eigen::VectorXd& x, Layout layout) {
  FitParams p;
  p.g_sym = x.head<6>();
  p.a_sym_mhz = x.segment<6>(6);
  if (layout.offsets) {
    for (int k = 0; k < 3; ++k) p.plane_offset_deg[k] = x[kTensorParams + k];
  }
  return p;
}

Tensor3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Quaterniond q(normal(rng), normal(rng), normal(rng), normal(rng));
  q.normalize();
  return q.toRotationMatrix();
}

Tensor3 random_tensor(std::mt19937_64& rng, std::array<double, 2> range) {
  std::uniform_real_distribution<double> mag(range[0], range[1]);
  std::bernoulli_distribution sign(0.5);
  Vec3 values;
  for (int k = 0; k < 3; ++k) values[k] = (sign(rng) ? -1.0 : 1.0) * mag(rng);
  const Tensor3 r = random_rotation(rng);
  return r.transpose() * values.asDiagonal() * r;
}

FitParams jittered(const FitParams& init, double jitter, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  FitParams p = init;
  const double g_scale = std::max(init.g_sym.cwiseAbs().maxCoeff(), 1e-3);
  const double a_scale = std::max(init.a_sym_mhz.cwiseAbs().maxCoeff(), 1e-3);
  for (int k = 0; k < 6; ++k) {
    p.g_sym[k] += jitter * normal(rng) * std::max(std::abs(init.g_sym[k]), 0.1 * g_scale);
    p.a_sym_mhz[k] += jitter * normal(rng) * std::max(std::abs(init.a_sym_mhz[k]), 0.1 * a_scale);
  }
  return p;
}

}  // namespace

std::string to_string(Plane p) {
  switch (p) {
    case Plane::bD1: return "bD1";
    case Plane::D1D2: return "D1D2";
    case Plane::bD2: return "bD2";
  }
  return "?";
}

Plane parse_plane(const std::string& name) {
  if (name == "bD1") return Plane::bD1;
  if (name == "D1D2") return Plane::D1D2;
  if (name == "bD2") return Plane::bD2;
  throw Error("unknown plane '" + name + "' (expected bD1, D1D2 or bD2)");
}

Vec3 plane_direction(Plane p, double angle_deg) {
  const double a = angle_deg * constants::kDegree;
  const double c = std::cos(a);
  const double s = std::sin(a);
  switch (p) {
    case Plane::bD1: return {0.0, c, s};
    case Plane::D1D2: return {s, 0.0, c};
    case Plane::bD2: return {s, c, 0.0};
  }
  return Vec3::UnitZ();
}

void Roadmap::validate() const {
  if (!(f_mw_GHz > 0.0)) throw Error("roadmap microwave frequency must be positive");
  if (!(window.min_mT >= 0.0) || !(window.max_mT > window.min_mT)) {
    throw Error("roadmap window must satisfy 0 <= min < max");
  }
  for (const auto& rec : records) {
    if (!(rec.angle_deg >= 0.0 && rec.angle_deg < 180.0)) {
      throw Error("roadmap angle out of [0, 180): " + std::to_string(rec.angle_deg));
    }
    for (std::size_t i = 1; i < rec.fields_mT.size(); ++i) {
      if (!(rec.fields_mT[i] > rec.fields_mT[i - 1])) {
        throw Error("roadmap fields not strictly ascending in " + to_string(rec.plane) + " at " +
                    std::to_string(rec.angle_deg) + " deg");
      }
    }
  }
}

std::size_t Roadmap::point_count() const {
  std::size_t n = 0;
  for (const auto& rec : records) n += rec.fields_mT.size();
  return n;
}

FitParams FitParams::from_tensors(const Tensor3& g, const Tensor3& a_mhz) {
  FitParams p;
  p.g_sym = pack(g);
  p.a_sym_mhz = pack(a_mhz);
  return p;
}

Tensor3 FitParams::g() const { return unpack(g_sym); }
Tensor3 FitParams::a_mhz() const { return unpack(a_sym_mhz); }

SpinSystem FitParams::system(double nuclear_spin) const {
  SpinSystem s;
  s.nuclear_spin = nuclear_spin;
  s.g = g();
  s.a_mhz = a_mhz();
  s.validate();
  return s;
}

std::vector<double> simulate_sorted_fields(const FitParams& params, const Roadmap& data,
                                           Plane plane, double angle_deg,
                                           const ObjectiveOptions& options) {
  const SpinSystem class1 = params.system(options.nuclear_spin);
  const RoadmapRecord rec{plane, angle_deg, {}};
  return simulate_record(class1, c2_partner(class1), record_direction(params, rec), data, options,
                         nullptr)
      .fields;
}

ObjectiveValue objective(const FitParams& params, const Roadmap& data,
                         const ObjectiveOptions& options) {
  Evaluator ev(data, options);
  ObjectiveValue v;
  ev.residuals(params, false, false, &v);
  return v;
}

Roadmap synthesize_roadmap(const FitParams& params, double f_mw_GHz, ScanWindow window,
                           double step_deg, double noise_mT, std::uint64_t seed,
                           const ObjectiveOptions& options, const std::vector<Plane>& planes) {
  if (!(step_deg > 0.0)) throw Error("angle step must be positive");
  Roadmap data;
  data.f_mw_GHz = f_mw_GHz;
  data.window = window;
  for (Plane plane : planes) {
    for (double a = 0.0; a < 180.0 - 1e-9; a += step_deg) {
      data.records.push_back({plane, a, {}});
    }
  }
  parallel_for(data.records.size(), options.threads, [&](std::size_t k) {
    auto& rec = data.records[k];
    rec.fields_mT = simulate_sorted_fields(params, data, rec.plane, rec.angle_deg, options);
  });
  if (noise_mT > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_mT);
    for (auto& rec : data.records) {
      for (double& b : rec.fields_mT) b += noise(rng);
      std::sort(rec.fields_mT.begin(), rec.fields_mT.end());
    }
  }
  return data;
}

FitResult fit(const Roadmap& data, const std::optional<FitParams>& init, const FitOptions& options) {
  data.validate();
  if (data.records.size() < static_cast<std::size_t>(kTensorParams)) {
    throw Error("tensor fit needs at least 12 roadmap records, got " +
                std::to_string(data.records.size()));
  }
  const Layout layout{options.fit_plane_offsets};
  std::mt19937_64 rng(options.seed);

  // Stage 1: sample starts
  std::vector<FitParams> starts;
  const int n_starts = std::max(options.starts, 1);
  for (int s = 0; s < n_starts; ++s) {
    if (init) {
      starts.push_back(s == 0 ? *init : jittered(*init, options.init_jitter, rng));
    } else {
      starts.push_back(FitParams::from_tensors(random_tensor(rng, options.g_range),
                                               random_tensor(rng, options.a_range_mhz)));
    }
  }
  Evaluator ev(data, options.objective);
  std::vector<double> start_value(starts.size());
  for (std::size_t s = 0; s < starts.size(); ++s) {
    ObjectiveValue v;
    try {
      ev.residuals(starts[s], false, false, &v);
      start_value[s] = v.value;
    } catch (const Error&) {
      start_value[s] = std::numeric_limits<double>::infinity();
    }
  }
  std::vector<std::size_t> order(starts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return start_value[a] < start_value[b]; });

  // Stage 2: local refinement of the best starts
  const double n_points = static_cast<double>(std::max<std::size_t>(data.point_count(), 1));
  LsqOptions lsq = options.lsq;
  const Eigen::VectorXd probe = to_vector(starts[order[0]], layout);
  if (layout.offsets) {
    const int n = layout.size();
    lsq.lower = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
    lsq.upper = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    lsq.lower.tail<3>().setConstant(-options.max_offset_deg);
    lsq.upper.tail<3>().setConstant(options.max_offset_deg);
  }
  {
    // finite-difference step floors: a tenth of the largest entry of each tensor
    Eigen::VectorXd scale(layout.size());
    scale.head<6>().setConstant(0.1 * std::max(probe.head<6>().cwiseAbs().maxCoeff(), 1e-3));
    scale.segment<6>(6).setConstant(0.1 * std::max(probe.segment<6>(6).cwiseAbs().maxCoeff(), 1e-3));
    if (layout.offsets) scale.tail<3>().setConstant(1.0);
    lsq.typical_scale = scale;
  }

  auto residual_fn = [&](const Eigen::VectorXd& x) {
    try {
      return Eigen::VectorXd(ev.residuals(from_vector(x, layout), true, true));
    } catch (const Error&) {
      return Eigen::VectorXd(Eigen::VectorXd::Constant(ev.size(), std::numeric_limits<double>::quiet_NaN()));
    }
  };
  auto probe_fn = [&](const Eigen::VectorXd& x) {
    try {
      return Eigen::VectorXd(ev.residuals(from_vector(x, layout), true, false));
    } catch (const Error&) {
      return Eigen::VectorXd(Eigen::VectorXd::Constant(ev.size(), std::numeric_limits<double>::quiet_NaN()));
    }
  };
  // The Jacobian is requested right after the evaluation at x was accepted,
  // so that evaluation's roots seed the difference quotients.
  lsq.jacobian = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& rx) {
    ev.promote();
    Eigen::MatrixXd jac = numeric_jacobian(probe_fn, x, rx, lsq);
    return jac;
  };

  FitResult best;
  best.objective = std::numeric_limits<double>::infinity();
  LsqResult best_lsq;
  const int n_refine = std::clamp(options.refine, 1, static_cast<int>(starts.size()));
  for (int k = 0; k < n_refine; ++k) {
    const std::size_t s = order[k];
    if (!std::isfinite(start_value[s])) continue;
    ev.clear_seeds();
    // seed the first Jacobian with the start's own roots
    ev.residuals(starts[s], false, true);
    LsqResult res = levenberg_marquardt(residual_fn, to_vector(starts[s], layout), lsq);
    const double value = res.cost / n_points;
    if (value < best.objective) {
      best.objective = value;
      best.best = from_vector(res.x, layout);
      best.iterations = res.iterations;
      best.converged = res.converged && value < start_value[s];
      best.start_objective = start_value[s];
      best.stop_reason = res.stop_reason;
      best_lsq = res;
    }
  }
  if (!std::isfinite(best.objective)) {
    best.best = starts[order[0]];
    best.converged = false;
    best.stop_reason = "no start produced a finite objective";
    return best;
  }

  // identifiability: condition of the Jacobian with columns scaled by the
  // parameter magnitudes
  Eigen::MatrixXd jac = best_lsq.jacobian;
  for (Eigen::Index j = 0; j < jac.cols(); ++j) {
    jac.col(j) *= std::max(std::abs(best_lsq.x[j]), lsq.typical_scale[j]);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(jac);
  const auto& sv = svd.singularValues();
  const double smax = sv.size() > 0 ? sv[0] : 0.0;
  const double smin = sv.size() > 0 ? sv[sv.size() - 1] : 0.0;
  best.condition_number = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
  best.underdetermined = !(best.condition_number < 1e6);

  ObjectiveValue v;
  ev.clear_seeds();
  ev.residuals(best.best, false, false, &v);
  best.n_points = v.n_points;
  best.unmatched = v.unmatched;
  const auto rows = residual_report(best.best, data, options.objective);
  double sum = 0.0;
  std::size_t matched = 0;
  for (const auto& row : rows) {
    if (!row.matched) continue;
    sum += std::abs(row.deviation_gauss);
    ++matched;
  }
  best.residual_gauss = matched > 0 ? sum / matched : 0.0;
  return best;
}

std::vector<ResidualRow> residual_report(const FitParams& params, const Roadmap& data,
                                         const ObjectiveOptions& options) {
  std::vector<std::vector<double>> sims(data.records.size());
  parallel_for(data.records.size(), options.threads, [&](std::size_t k) {
    const auto& rec = data.records[k];
    sims[k] = simulate_sorted_fields(params, data, rec.plane, rec.angle_deg, options);
  });
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<ResidualRow> rows;
  for (std::size_t k = 0; k < data.records.size(); ++k) {
    const auto& rec = data.records[k];
    const auto& sim = sims[k];
    const std::size_t n = std::max(rec.fields_mT.size(), sim.size());
    for (std::size_t i = 0; i < n; ++i) {
      ResidualRow row;
      row.plane = rec.plane;
      row.angle_deg = rec.angle_deg;
      row.peak_index = static_cast<int>(i);
      row.experimental_mT = i < rec.fields_mT.size() ? rec.fields_mT[i] : nan;
      row.simulated_mT = i < sim.size() ? sim[i] : nan;
      row.matched = i < rec.fields_mT.size() && i < sim.size();
      row.deviation_gauss = row.matched ? 10.0 * (row.simulated_mT - row.experimental_mT) : nan;
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace endor
