#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "coldscat/coherent_dipole.hpp"
#include "coldscat/common.hpp"
#include "coldscat/geometry.hpp"
#include "coldscat/thread_pool.hpp"

namespace coldscat {

// Detection direction in the laser frame: theta measured from the beam
// direction khat0, phi measured in the transverse plane from the laser
// polarization. bin_halfwidth > 0 averages uniformly over the solid-angle cap.
struct DetectionDirection {
  double theta = kPi / 2;
  double phi = 0.0;
  double bin_halfwidth = 0.0;

  void validate() const {
    if (theta < 0 || theta > kPi) throw ConfigError("direction theta must be in [0, pi]");
    if (bin_halfwidth < 0) throw ConfigError("direction bin_halfwidth must be >= 0");
  }
};

inline Vec3 detection_unit(const DetectionDirection& dir, const DriveSpec& drive) {
  const Vec3 forward = drive.wavevector.normalized();
  const Vec3 pol = drive.polarization.normalized();
  const Vec3 side = forward.cross(pol);
  return std::cos(dir.theta) * forward +
         std::sin(dir.theta) * (std::cos(dir.phi) * pol + std::sin(dir.phi) * side);
}

namespace detail {

// Far-field double sum evaluated through the projected field amplitude
// F^a = sum_j b_j^a exp(-i k_s . r_j): I = |F|^2 - |rhat . F|^2, which is the
// transverse projector of the radiated field and manifestly real.
inline double raw_intensity(const Eigen::MatrixX3cd& coherences,
                            const std::vector<Vec3>& positions, const Vec3& rhat) {
  Eigen::Vector3cd field = Eigen::Vector3cd::Zero();
  const int n = static_cast<int>(positions.size());
  for (int j = 0; j < n; ++j) {
    const Complex phase = std::exp(Complex(0, -kWavevector * rhat.dot(positions[j])));
    field += phase * coherences.row(j).transpose();
  }
  return field.squaredNorm() - std::norm(rhat.cast<Complex>().dot(field));
}

inline double raw_intensity_two_level(const Eigen::VectorXcd& coherences,
                                      const std::vector<Vec3>& positions, const Vec3& rhat,
                                      const Vec3& pol) {
  Complex field(0, 0);
  const int n = static_cast<int>(positions.size());
  for (int j = 0; j < n; ++j)
    field += coherences(j) * std::exp(Complex(0, -kWavevector * rhat.dot(positions[j])));
  const double transverse = 1.0 - rhat.dot(pol) * rhat.dot(pol);
  return std::norm(field) * transverse;
}

// Deterministic direction set covering the detection cap (area-uniform
// spiral); a point detector when the halfwidth is zero.
inline std::vector<Vec3> cap_directions(const Vec3& rhat, double halfwidth, int count = 16) {
  if (halfwidth <= 0) return {rhat};
  Vec3 t1 = rhat.cross(std::abs(rhat.z()) < 0.9 ? Vec3(0, 0, 1) : Vec3(1, 0, 0)).normalized();
  Vec3 t2 = rhat.cross(t1);
  std::vector<Vec3> dirs;
  dirs.reserve(static_cast<std::size_t>(count));
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < count; ++i) {
    const double u = (i + 0.5) / count;
    const double alpha = halfwidth * std::sqrt(u);
    const double beta = golden * i;
    dirs.push_back(std::cos(alpha) * rhat +
                   std::sin(alpha) * (std::cos(beta) * t1 + std::sin(beta) * t2));
  }
  return dirs;
}

inline double normalization(const DriveSpec& drive) {
  if (!(drive.rabi > 0)) throw ConfigError("intensity normalization requires rabi > 0");
  return (kGamma / drive.rabi) * (kGamma / drive.rabi);
}

}  // namespace detail

// Intensity in units of the single-atom on-resonance transverse value at the
// same drive strength.
inline double far_field_intensity(const SteadyState& state, const AtomicCloud& cloud,
                                  const DetectionDirection& dir, const DriveSpec& drive) {
  dir.validate();
  const Vec3 rhat = detection_unit(dir, drive);
  double sum = 0.0;
  const auto dirs = detail::cap_directions(rhat, dir.bin_halfwidth);
  for (const Vec3& d : dirs)
    sum += detail::raw_intensity(state.coherences, cloud.positions, d);
  return detail::normalization(drive) * sum / dirs.size();
}

inline double far_field_intensity(const TwoLevelState& state, const AtomicCloud& cloud,
                                  const DetectionDirection& dir, const DriveSpec& drive) {
  dir.validate();
  const Vec3 rhat = detection_unit(dir, drive);
  double sum = 0.0;
  const auto dirs = detail::cap_directions(rhat, dir.bin_halfwidth);
  for (const Vec3& d : dirs)
    sum += detail::raw_intensity_two_level(state.coherences, cloud.positions, d,
                                           drive.polarization);
  return detail::normalization(drive) * sum / dirs.size();
}

// Incoherent (diagonal) part of the far-field sum: the ensemble mean of the
// intensity away from the forward cone, free of single-realization speckle.
inline double far_field_incoherent(const SteadyState& state, const AtomicCloud& cloud,
                                   const DetectionDirection& dir, const DriveSpec& drive) {
  (void)cloud;
  const Vec3 rhat = detection_unit(dir, drive);
  double sum = 0.0;
  for (int j = 0; j < state.coherences.rows(); ++j) {
    const Eigen::Vector3cd b = state.coherences.row(j).transpose();
    sum += b.squaredNorm() - std::norm(rhat.cast<Complex>().dot(b));
  }
  return detail::normalization(drive) * sum;
}

inline double far_field_incoherent(const TwoLevelState& state, const AtomicCloud& cloud,
                                   const DetectionDirection& dir, const DriveSpec& drive) {
  (void)cloud;
  const Vec3 rhat = detection_unit(dir, drive);
  const double transverse = 1.0 - std::pow(rhat.dot(drive.polarization.normalized()), 2);
  return detail::normalization(drive) * transverse * state.coherences.squaredNorm();
}

template <typename State>
std::vector<std::pair<double, double>> angular_scan(const State& state, const AtomicCloud& cloud,
                                                    const DriveSpec& drive,
                                                    const std::vector<double>& theta_grid,
                                                    double phi, double bin_halfwidth = 0.0) {
  std::vector<std::pair<double, double>> out;
  out.reserve(theta_grid.size());
  for (double theta : theta_grid) {
    DetectionDirection dir{theta, phi, bin_halfwidth};
    out.emplace_back(theta, far_field_intensity(state, cloud, dir, drive));
  }
  return out;
}

// --- spectra ------------------------------------------------------------

struct SpectrumMetadata {
  std::string model = "cd";
  CloudSpec cloud;
  int ensemble = 1;
  std::uint64_t seed = 0;
  std::string sweep_axis = "detuning";
  std::string normalization = "single-atom on-resonance transverse intensity";
  double od = 0.0;       // on-resonance, beam axis
  double density = 0.0;  // n0 k0^-3
};

struct Spectrum {
  std::vector<double> detunings;  // sweep grid (detuning unless stated otherwise)
  std::vector<DetectionDirection> directions;
  std::vector<std::vector<double>> intensities;  // [direction][grid point]
  std::vector<std::vector<double>> stderrs;
  SpectrumMetadata meta;

  void validate() const {
    for (std::size_t i = 1; i < detunings.size(); ++i)
      if (!(detunings[i] > detunings[i - 1]))
        throw ConfigError("spectrum grid must be strictly increasing");
    for (const auto& column : intensities)
      for (double v : column)
        if (!(v >= 0)) throw ConfigError("spectrum intensities must be non-negative");
  }
};

// One realization of one sweep point: per-direction intensities.
using PointEvaluator =
    std::function<std::vector<double>(double value, int point, int member)>;

// Averages `evaluator` over `ensemble` members per grid point, in parallel
// over (point, member) with deterministic reduction in member order.
inline Spectrum sweep_spectrum(const PointEvaluator& evaluator, const std::vector<double>& grid,
                               const std::vector<DetectionDirection>& directions, int ensemble,
                               std::uint64_t seed, const ThreadPool* pool = nullptr,
                               SpectrumMetadata meta = {}) {
  if (grid.empty()) throw ConfigError("sweep grid must be non-empty");
  if (ensemble < 1) throw ConfigError("ensemble must be >= 1");
  const std::size_t n_points = grid.size();
  const std::size_t n_dirs = directions.size();
  const std::size_t n_tasks = n_points * static_cast<std::size_t>(ensemble);
  std::vector<std::vector<double>> task_values(n_tasks);
  std::vector<std::string> task_errors(n_tasks);

  auto run_task = [&](std::size_t t) {
    const int point = static_cast<int>(t / ensemble);
    const int member = static_cast<int>(t % ensemble);
    try {
      task_values[t] = evaluator(grid[point], point, member);
      if (task_values[t].size() != n_dirs)
        throw ConfigError("point evaluator returned wrong number of directions");
    } catch (const std::exception& e) {
      task_errors[t] = e.what();
    }
  };
  if (pool)
    pool->parallel_for(n_tasks, run_task);
  else
    for (std::size_t t = 0; t < n_tasks; ++t) run_task(t);

  for (std::size_t t = 0; t < n_tasks; ++t)
    if (!task_errors[t].empty())
      throw SolverError("sweep point " + std::to_string(t / ensemble) + " member " +
                            std::to_string(t % ensemble) + " (seed " + std::to_string(seed) +
                            "): " + task_errors[t],
                        {});

  Spectrum spectrum;
  spectrum.detunings = grid;
  spectrum.directions = directions;
  spectrum.meta = std::move(meta);
  spectrum.meta.ensemble = ensemble;
  spectrum.meta.seed = seed;
  spectrum.intensities.assign(n_dirs, std::vector<double>(n_points, 0.0));
  spectrum.stderrs.assign(n_dirs, std::vector<double>(n_points, 0.0));
  for (std::size_t p = 0; p < n_points; ++p) {
    for (std::size_t d = 0; d < n_dirs; ++d) {
      double mean = 0.0;
      for (int e = 0; e < ensemble; ++e) mean += task_values[p * ensemble + e][d];
      mean /= ensemble;
      double var = 0.0;
      for (int e = 0; e < ensemble; ++e) {
        const double dv = task_values[p * ensemble + e][d] - mean;
        var += dv * dv;
      }
      spectrum.intensities[d][p] = mean;
      spectrum.stderrs[d][p] =
          ensemble > 1 ? std::sqrt(var / (ensemble - 1.0) / ensemble) : 0.0;
    }
  }
  return spectrum;
}

// --- line summary ---------------------------------------------------------

struct LineSummary {
  double fwhm = 0.0;           // full width at half of the global maximum
  bool fwhm_resolved = false;  // false when a half-max crossing is off-grid
  double center = 0.0;         // maximizer of a local quadratic fit
  double peak = 0.0;
  double lorentzian_r2 = 0.0;
  double lorentzian_center = 0.0;  // fitted center, reported separately
  bool is_double_peaked = false;
  std::string note;
};

namespace detail {

// Least-squares parabola through points (x_i, y_i); returns the vertex x.
inline std::optional<double> parabola_vertex(const std::vector<double>& x,
                                             const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 3) return std::nullopt;
  // Normal equations for y = a x^2 + b x + c, shifted for conditioning.
  const double x0 = x[n / 2];
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, t0 = 0, t1 = 0, t2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = x[i] - x0;
    const double u2 = u * u;
    s0 += 1;
    s1 += u;
    s2 += u2;
    s3 += u2 * u;
    s4 += u2 * u2;
    t0 += y[i];
    t1 += u * y[i];
    t2 += u2 * y[i];
  }
  Eigen::Matrix3d m;
  m << s4, s3, s2, s3, s2, s1, s2, s1, s0;
  const Eigen::Vector3d rhs(t2, t1, t0);
  const Eigen::Vector3d abc = m.fullPivLu().solve(rhs);
  if (!(abc(0) < 0)) return std::nullopt;  // not a maximum
  return x0 - abc(1) / (2.0 * abc(0));
}

struct LorentzianFit {
  double amplitude = 0, center = 0, width = 0, r2 = 0;
};

// Three-parameter Lorentzian A / (1 + 4 (x-c)^2 / w^2) by damped Gauss-Newton.
inline LorentzianFit fit_lorentzian(const std::vector<double>& x, const std::vector<double>& y,
                                    double c0, double w0, double a0) {
  LorentzianFit fit;
  fit.amplitude = a0;
  fit.center = c0;
  fit.width = std::max(w0, 1e-6);
  const std::size_t n = x.size();
  auto sse = [&](double a, double c, double w) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = 2.0 * (x[i] - c) / w;
      const double r = y[i] - a / (1.0 + u * u);
      s += r * r;
    }
    return s;
  };
  double current = sse(fit.amplitude, fit.center, fit.width);
  for (int iter = 0; iter < 60; ++iter) {
    Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
    Eigen::Vector3d jtr = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      const double u = 2.0 * (x[i] - fit.center) / fit.width;
      const double den = 1.0 + u * u;
      const double model = fit.amplitude / den;
      const double resid = y[i] - model;
      Eigen::Vector3d grad;
      grad(0) = 1.0 / den;
      grad(1) = fit.amplitude * 2.0 * u * (2.0 / fit.width) / (den * den);
      grad(2) = fit.amplitude * 2.0 * u * u / fit.width / (den * den);
      jtj += grad * grad.transpose();
      jtr += grad * resid;
    }
    jtj.diagonal().array() += 1e-12;
    Eigen::Vector3d step = jtj.ldlt().solve(jtr);
    double scale = 1.0;
    for (int half = 0; half < 12; ++half, scale *= 0.5) {
      const double a = fit.amplitude + scale * step(0);
      const double c = fit.center + scale * step(1);
      const double w = fit.width + scale * step(2);
      if (w <= 0) continue;
      const double trial = sse(a, c, w);
      if (trial < current) {
        fit.amplitude = a;
        fit.center = c;
        fit.width = w;
        current = trial;
        break;
      }
    }
  }
  double mean = 0;
  for (double v : y) mean += v;
  mean /= n;
  double ss_tot = 0;
  for (double v : y) ss_tot += (v - mean) * (v - mean);
  fit.r2 = ss_tot > 0 ? 1.0 - current / ss_tot : 0.0;
  return fit;
}

}  // namespace detail

inline LineSummary summarize_line(const std::vector<double>& grid,
                                  const std::vector<double>& values,
                                  const std::vector<double>& errors = {}) {
  if (grid.size() != values.size() || grid.size() < 3)
    throw ConfigError("summarize_line: need matching grid/values with >= 3 points");
  LineSummary out;
  const std::size_t n = grid.size();
  std::size_t imax = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (values[i] > values[imax]) imax = i;
  out.peak = values[imax];

  // Quadratic center from the 5 samples around the maximum.
  {
    const std::size_t lo = imax >= 2 ? imax - 2 : 0;
    const std::size_t hi = std::min(n - 1, imax + 2);
    std::vector<double> xs(grid.begin() + lo, grid.begin() + hi + 1);
    std::vector<double> ys(values.begin() + lo, values.begin() + hi + 1);
    const auto vertex = detail::parabola_vertex(xs, ys);
    out.center = vertex ? std::clamp(*vertex, xs.front(), xs.back()) : grid[imax];
  }

  // FWHM from the outermost half-maximum crossings, linearly interpolated.
  const double half = 0.5 * out.peak;
  std::optional<double> left, right;
  for (std::size_t i = 0; i + 1 <= imax && i + 1 < n; ++i) {
    if (values[i] <= half && values[i + 1] > half) {
      left = grid[i] + (half - values[i]) / (values[i + 1] - values[i]) *
                           (grid[i + 1] - grid[i]);
      break;
    }
  }
  for (std::size_t i = n - 1; i > imax; --i) {
    if (values[i] <= half && values[i - 1] > half) {
      right = grid[i] - (half - values[i]) / (values[i - 1] - values[i]) *
                            (grid[i] - grid[i - 1]);
      break;
    }
  }
  if (left && right) {
    out.fwhm = *right - *left;
    out.fwhm_resolved = true;
  } else {
    out.note = "unresolved: half-maximum crossing outside grid";
  }

  // Lorentzian goodness of fit; the fitted center is reported separately
  // from the profile maximizer.
  const double w0 = out.fwhm_resolved ? out.fwhm : (grid.back() - grid.front()) / 4.0;
  const auto fit = detail::fit_lorentzian(grid, values, out.center, w0, out.peak);
  out.lorentzian_r2 = fit.r2;
  out.lorentzian_center = fit.center;

  // Double peak: two local maxima that both exceed the valley between them
  // by more than three standard errors.
  std::vector<std::size_t> maxima;
  for (std::size_t i = 1; i + 1 < n; ++i)
    if (values[i] > values[i - 1] && values[i] >= values[i + 1]) maxima.push_back(i);
  if (maxima.size() >= 2) {
    std::sort(maxima.begin(), maxima.end(),
              [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
    const std::size_t p1 = std::min(maxima[0], maxima[1]);
    const std::size_t p2 = std::max(maxima[0], maxima[1]);
    std::size_t ivalley = p1;
    for (std::size_t i = p1; i <= p2; ++i)
      if (values[i] < values[ivalley]) ivalley = i;
    const double err = ivalley < errors.size() ? errors[ivalley] : 0.0;
    const double margin = std::max(3.0 * err, 1e-9 * out.peak);
    if (values[p1] - values[ivalley] > margin && values[p2] - values[ivalley] > margin)
      out.is_double_peaked = true;
  }
  return out;
}

inline LineSummary summarize_line(const Spectrum& spectrum, std::size_t direction = 0) {
  return summarize_line(spectrum.detunings, spectrum.intensities.at(direction),
                        spectrum.stderrs.at(direction));
}

// --- serialization ----------------------------------------------------------

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline std::string spectrum_filename(const Spectrum& s, std::size_t direction) {
  const auto& d = s.directions.at(direction);
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s_N%d_OD%.4g_n0%.4g_th%.4g_ph%.4g.csv",
                s.meta.model.c_str(), s.meta.cloud.n_atoms, s.meta.od, s.meta.density,
                d.theta * 180.0 / kPi, d.phi * 180.0 / kPi);
  return buf;
}

inline void write_spectrum_csv(const Spectrum& s, std::size_t direction, std::ostream& os) {
  const auto& d = s.directions.at(direction);
  os << "# model=" << s.meta.model << " n_atoms=" << s.meta.cloud.n_atoms
     << " od=" << format_double(s.meta.od) << " density=" << format_double(s.meta.density)
     << " theta_rad=" << format_double(d.theta) << " phi_rad=" << format_double(d.phi)
     << " bin_halfwidth_rad=" << format_double(d.bin_halfwidth)
     << " ensemble=" << s.meta.ensemble << " seed=" << s.meta.seed << "\n";
  os << "# units: " << s.meta.sweep_axis
     << " in Gamma (lengths in 1/k0); intensity normalized to " << s.meta.normalization
     << "\n";
  os << s.meta.sweep_axis << ",intensity,stderr\n";
  for (std::size_t i = 0; i < s.detunings.size(); ++i)
    os << format_double(s.detunings[i]) << ',' << format_double(s.intensities[direction][i])
       << ',' << format_double(s.stderrs[direction][i]) << "\n";
}

}  // namespace coldscat
