#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "coldscat/coherent_dipole.hpp"
#include "coldscat/common.hpp"
#include "coldscat/geometry.hpp"
#include "coldscat/observables.hpp"
#include "coldscat/rng.hpp"
#include "coldscat/thread_pool.hpp"

namespace coldscat::rw {

using Stokes = Eigen::Vector4d;
using Matrix4 = Eigen::Matrix4d;

// Rayleigh scattering matrix for the degenerate J=0 -> J'=1 transition.
inline Matrix4 mueller_matrix(double theta) {
  const double c = std::cos(theta);
  const double cc = c * c;
  Matrix4 m = Matrix4::Zero();
  m(0, 0) = cc + 1;
  m(0, 1) = cc - 1;
  m(1, 0) = cc - 1;
  m(1, 1) = cc + 1;
  m(2, 2) = 2 * c;
  m(3, 3) = 2 * c;
  return 0.75 * m;
}

// Rotation of the Stokes reference frame by phi about the propagation axis.
inline Matrix4 rotation_matrix(double phi) {
  const double c2 = std::cos(2 * phi), s2 = std::sin(2 * phi);
  Matrix4 r = Matrix4::Identity();
  r(1, 1) = c2;
  r(1, 2) = s2;
  r(2, 1) = -s2;
  r(2, 2) = c2;
  return r;
}

struct StokesPhoton {
  Vec3 position = Vec3::Zero();
  Vec3 e3 = Vec3(1, 0, 0);  // propagation direction
  Vec3 el = Vec3(0, 0, 1);  // polarization reference axis
  Vec3 er = Vec3(0, -1, 0); // el x er = e3 (right-handed)
  Stokes stokes = Stokes(1, 1, 0, 0);
  int n_scatters = 0;
};

inline StokesPhoton make_photon(const Vec3& position, const Vec3& direction, const Vec3& el,
                                const Stokes& stokes) {
  StokesPhoton p;
  p.position = position;
  p.e3 = direction.normalized();
  p.el = (el - el.dot(p.e3) * p.e3).normalized();
  p.er = p.e3.cross(p.el);
  p.stokes = stokes;
  return p;
}

inline bool stokes_physical(const Stokes& s, double tol = 1e-10) {
  return s(0) >= 0 &&
         s(1) * s(1) + s(2) * s(2) + s(3) * s(3) <= s(0) * s(0) * (1 + tol) + tol;
}

// Angular density of a scattering event for an incident Stokes vector,
// p(theta, phi) = S0''(theta, phi) / S0_in up to normalization:
//   p ~ (1 + cos^2 theta) + (cos^2 theta - 1) (q cos 2phi + u sin 2phi),
// with (q, u) the linear-polarization fractions. Normalized over
// sin(theta) dtheta dphi it integrates to 4 pi / (phase-function norm).
inline double scatter_density(const Stokes& s, double theta, double phi) {
  const double c = std::cos(theta);
  const double q = s(1) / s(0), u = s(2) / s(0);
  return 0.75 * ((1 + c * c) + (c * c - 1) * (q * std::cos(2 * phi) + u * std::sin(2 * phi)));
}

struct ScatterAngles {
  double theta = 0;
  double phi = 0;
};

// Exact inverse-CDF sampling: the phi marginal ~ 2 - P cos 2(phi - phi0)
// and the theta conditional ~ (1+K) c^2 + (1-K) are both inverted by
// safeguarded Newton iterations (monotone CDFs, no tabulation error).
inline ScatterAngles sample_scatter_angles(const Stokes& s, CounterRng& rng) {
  const double q = s(1) / s(0), u = s(2) / s(0);
  const double pol = std::sqrt(q * q + u * u);
  const double phi0 = 0.5 * std::atan2(u, q);

  // phi from F(phi) = [2 phi - P (sin 2(phi-phi0) + sin 2 phi0) / 2] / (4 pi).
  const double target_phi = rng.uniform();
  double lo = 0.0, hi = 2 * kPi;
  double phi = target_phi * 2 * kPi;
  for (int it = 0; it < 80; ++it) {
    const double f = (2 * phi - 0.5 * pol * (std::sin(2 * (phi - phi0)) + std::sin(2 * phi0))) /
                         (4 * kPi) -
                     target_phi;
    if (f > 0)
      hi = phi;
    else
      lo = phi;
    const double df = (2 - pol * std::cos(2 * (phi - phi0))) / (4 * kPi);
    double next = phi - f / df;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - phi) < 1e-14) {
      phi = next;
      break;
    }
    phi = next;
  }

  // theta | phi from the cubic CDF of (1+K) c^2 + (1-K) on c in [-1, 1].
  const double k = pol * std::cos(2 * (phi - phi0));
  const double norm = (8 - 4 * k) / 3.0;
  const double target_c = rng.uniform() * norm;
  double clo = -1.0, chi = 1.0, c = 0.0;
  for (int it = 0; it < 80; ++it) {
    const double g = (1 + k) * (c * c * c + 1) / 3.0 + (1 - k) * (c + 1) - target_c;
    if (g > 0)
      chi = c;
    else
      clo = c;
    const double dg = (1 + k) * c * c + (1 - k);
    double next = dg > 1e-14 ? c - g / dg : 0.5 * (clo + chi);
    if (!(next > clo && next < chi)) next = 0.5 * (clo + chi);
    if (std::abs(next - c) < 1e-14) {
      c = next;
      break;
    }
    c = next;
  }
  return {std::acos(std::clamp(c, -1.0, 1.0)), phi};
}

// Applies one scattering event with given angles: Stokes chain
// S_out = R(psi) M(theta) R(phi) S_in, frame moved by parallel transport
// along the great circle from e3 to the scattered direction. The vector
// construction of psi is regular for all theta (forward limit psi -> -phi).
inline void apply_scatter(StokesPhoton& photon, double theta, double phi) {
  const double ct = std::cos(theta), st = std::sin(theta);
  const double cp = std::cos(phi), sp = std::sin(phi);

  const Vec3 el_rot = cp * photon.el + sp * photon.er;   // in scattering plane
  const Vec3 er_rot = -sp * photon.el + cp * photon.er;  // normal to plane
  const Vec3 e3_new = ct * photon.e3 + st * el_rot;
  const Vec3 el_scat = ct * el_rot - st * photon.e3;     // scattering-plane basis

  // Parallel transport of the old frame: rotation about er_rot by theta.
  auto rotate = [&](const Vec3& v) {
    return v * ct + er_rot.cross(v) * st + er_rot * er_rot.dot(v) * (1 - ct);
  };
  Vec3 el_pt = rotate(photon.el);
  const double cos_psi = el_pt.dot(el_scat);
  const double sin_psi = el_pt.dot(er_rot);
  const double psi = std::atan2(sin_psi, cos_psi);

  Stokes out = rotation_matrix(psi) * (mueller_matrix(theta) * (rotation_matrix(phi) * photon.stokes));
  if (!(out(0) > 0)) out = Stokes(1, 0, 0, 0);  // forbidden-direction guard
  photon.stokes = out / out(0);

  photon.e3 = e3_new.normalized();
  el_pt -= el_pt.dot(photon.e3) * photon.e3;
  photon.el = el_pt.normalized();
  photon.er = photon.e3.cross(photon.el);
  ++photon.n_scatters;
}

inline void scatter(StokesPhoton& photon, CounterRng& rng) {
  const ScatterAngles angles = sample_scatter_angles(photon.stokes, rng);
  apply_scatter(photon, angles.theta, angles.phi);
}

// --- media ------------------------------------------------------------------

// Resonant scattering cross section sigma0 = (6 pi / k0^2) / (1 + 4 Delta^2).
inline double cross_section(double detuning) {
  return 6.0 * kPi / (kWavevector * kWavevector) /
         (1.0 + 4.0 * detuning * detuning / (kGamma * kGamma));
}

namespace detail {

// Newton inversion of erf, used for closed-form path sampling.
inline double erf_inverse(double y) {
  double x = 0.0;
  // Crude start from the leading Gaussian behaviour.
  if (std::abs(y) < 0.999) x = y * 0.8862269254527580;  // sqrt(pi)/2 * y
  else x = (y > 0 ? 2.5 : -2.5);
  for (int it = 0; it < 60; ++it) {
    const double err = std::erf(x) - y;
    const double deriv = 2.0 / std::sqrt(kPi) * std::exp(-x * x);
    if (deriv < 1e-300) break;
    const double next = x - err / deriv;
    if (std::abs(next - x) < 1e-15 * (1 + std::abs(x))) return next;
    x = next;
  }
  return x;
}

}  // namespace detail

// Gaussian-density medium with the closed-form (erf) line integral.
class GaussianMedium {
 public:
  GaussianMedium(const CloudSpec& spec, double detuning)
      : radii_(spec.radii),
        coefficient_(peak_density(spec) * cross_section(detuning)) {}

  // Optical depth from `pos` along `dir` out to infinity, and the free path
  // for a target depth (nullopt when the photon escapes first).
  double remaining_depth(const Vec3& pos, const Vec3& dir) const {
    double alpha = 0, beta = 0, gamma = 0;
    quadratic(pos, dir, alpha, beta, gamma);
    const double u0 = std::sqrt(alpha) * (beta / (2 * alpha));
    return prefactor(alpha, beta, gamma) * (1.0 - std::erf(u0));
  }

  std::optional<double> path_for_depth(const Vec3& pos, const Vec3& dir, double tau) const {
    double alpha = 0, beta = 0, gamma = 0;
    quadratic(pos, dir, alpha, beta, gamma);
    const double k = prefactor(alpha, beta, gamma);
    const double u0 = std::sqrt(alpha) * (beta / (2 * alpha));
    const double target = std::erf(u0) + tau / k;
    if (target >= 1.0 - 1e-16) return std::nullopt;
    const double u = detail::erf_inverse(target);
    return u / std::sqrt(alpha) - beta / (2 * alpha);
  }

 private:
  void quadratic(const Vec3& pos, const Vec3& dir, double& alpha, double& beta,
                 double& gamma) const {
    alpha = beta = gamma = 0;
    for (int a = 0; a < 3; ++a) {
      const double inv2 = 1.0 / (2.0 * radii_[a] * radii_[a]);
      alpha += dir[a] * dir[a] * inv2;
      beta += 2.0 * pos[a] * dir[a] * inv2;
      gamma += pos[a] * pos[a] * inv2;
    }
  }

  double prefactor(double alpha, double beta, double gamma) const {
    return coefficient_ * 0.5 * std::sqrt(kPi / alpha) *
           std::exp(beta * beta / (4 * alpha) - gamma);
  }

  Vec3 radii_;
  double coefficient_;  // n0 * sigma0(Delta)
};

// Samples the free path by inverting tau(s) = -ln(u); returns the new
// position or nullopt when the photon leaves the cloud.
template <typename Medium>
std::optional<Vec3> free_path(const StokesPhoton& photon, const Medium& medium,
                              CounterRng& rng) {
  double u = rng.uniform();
  while (u <= 0.0) u = rng.uniform();
  const double tau = -std::log(u);
  const auto s = medium.path_for_depth(photon.position, photon.e3, tau);
  if (!s) return std::nullopt;
  return photon.position + *s * photon.e3;
}

// --- tracing and tallies ------------------------------------------------

struct TraceResult {
  Vec3 direction = Vec3::Zero();
  Stokes stokes = Stokes::Zero();
  int n_scatters = 0;
  bool truncated = false;  // hit the max_scatters guard
};

struct RwConfig {
  double beam_sigma = 0.0;   // transverse Gaussian width of the beam (1/k0)
  int max_scatters = 100000;
  std::int64_t photons = 100000;
};

template <typename Medium>
TraceResult trace_photon(const Medium& medium, const DriveSpec& drive, const CloudSpec& spec,
                         const RwConfig& cfg, CounterRng& rng) {
  const Vec3 forward = drive.wavevector.normalized();
  const Vec3 pol = drive.polarization.normalized();
  const Vec3 side = forward.cross(pol);
  const double start = 10.0 * spec.radii.maxCoeff();
  Vec3 entry = -start * forward;
  if (cfg.beam_sigma > 0)
    entry += cfg.beam_sigma * (rng.normal() * pol + rng.normal() * side);
  StokesPhoton photon = make_photon(entry, forward, pol, Stokes(1, 1, 0, 0));

  for (;;) {
    const auto next = free_path(photon, medium, rng);
    if (!next) {
      TraceResult out;
      out.direction = photon.e3;
      out.stokes = photon.stokes;
      out.n_scatters = photon.n_scatters;
      return out;
    }
    if (photon.n_scatters >= cfg.max_scatters) {
      TraceResult out;
      out.direction = photon.e3;
      out.stokes = photon.stokes;
      out.n_scatters = photon.n_scatters;
      out.truncated = true;
      return out;
    }
    photon.position = *next;
    scatter(photon, rng);
  }
}

// Per-run tallies: scattered photons (n >= 1) binned by detector, ballistic
// and truncated photons counted separately, full n_scatters histogram.
struct RunTallies {
  std::vector<double> scattered;         // per detector bin
  std::vector<double> single_scattered;  // per detector bin, n == 1
  std::int64_t ballistic = 0;
  std::int64_t truncated = 0;
  std::int64_t photons = 0;
  double scatter_count_sum = 0.0;
  std::vector<std::int64_t> histogram;  // index n (clamped to size-1)

  explicit RunTallies(std::size_t bins = 0, std::size_t histogram_size = 64)
      : scattered(bins, 0.0), single_scattered(bins, 0.0), histogram(histogram_size, 0) {}

  void merge(const RunTallies& other) {
    for (std::size_t i = 0; i < scattered.size(); ++i) {
      scattered[i] += other.scattered[i];
      single_scattered[i] += other.single_scattered[i];
    }
    ballistic += other.ballistic;
    truncated += other.truncated;
    photons += other.photons;
    scatter_count_sum += other.scatter_count_sum;
    for (std::size_t i = 0; i < histogram.size(); ++i) histogram[i] += other.histogram[i];
  }
};

struct DetectorBin {
  Vec3 axis;
  double cos_half;
  double solid_angle;
};

inline std::vector<DetectorBin> make_detector_bins(const std::vector<DetectionDirection>& dirs,
                                                   const DriveSpec& drive) {
  std::vector<DetectorBin> bins;
  bins.reserve(dirs.size());
  for (const auto& d : dirs) {
    if (!(d.bin_halfwidth > 0))
      throw ConfigError("random walk detectors need bin_halfwidth > 0");
    bins.push_back({detection_unit(d, drive), std::cos(d.bin_halfwidth),
                    2 * kPi * (1 - std::cos(d.bin_halfwidth))});
  }
  return bins;
}

template <typename Medium>
RunTallies run_photons(const Medium& medium, const DriveSpec& drive, const CloudSpec& spec,
                       const RwConfig& cfg, const std::vector<DetectorBin>& bins,
                       std::uint64_t seed, std::uint64_t stream, const ThreadPool* pool) {
  const int shards = pool ? pool->workers() : 1;
  std::vector<RunTallies> partial(static_cast<std::size_t>(shards),
                                  RunTallies(bins.size()));
  auto work = [&](std::size_t shard) {
    RunTallies& t = partial[shard];
    for (std::int64_t p = static_cast<std::int64_t>(shard); p < cfg.photons; p += shards) {
      CounterRng rng(seed, stream, static_cast<std::uint64_t>(p));
      const TraceResult r = trace_photon(medium, drive, spec, cfg, rng);
      ++t.photons;
      if (r.truncated) {
        ++t.truncated;
        continue;
      }
      const std::size_t h =
          std::min<std::size_t>(static_cast<std::size_t>(r.n_scatters), t.histogram.size() - 1);
      ++t.histogram[h];
      t.scatter_count_sum += r.n_scatters;
      if (r.n_scatters == 0) {
        ++t.ballistic;
        continue;
      }
      for (std::size_t b = 0; b < bins.size(); ++b) {
        if (r.direction.dot(bins[b].axis) >= bins[b].cos_half) {
          t.scattered[b] += 1.0;
          if (r.n_scatters == 1) t.single_scattered[b] += 1.0;
        }
      }
    }
  };
  if (pool)
    pool->parallel_for(static_cast<std::size_t>(shards), work);
  else
    work(0);
  RunTallies total(bins.size());
  for (const auto& t : partial) total.merge(t);
  return total;
}

struct RwPointStats {
  double ballistic_fraction = 0.0;
  double mean_scatters = 0.0;
  std::int64_t truncated = 0;
  std::vector<std::int64_t> histogram;
};

struct RwSweepResult {
  Spectrum spectrum;                  // scattered-only intensity per bin
  std::vector<RwPointStats> stats;    // per grid point
};

// Detuning sweep of the random walk engine. Intensities are scattered-photon
// rates per unit solid angle per launched photon; the peak optical depth
// quoted in metadata is the on-axis value at zero detuning.
inline RwSweepResult sweep_rw_spectrum(const CloudSpec& spec, const DriveSpec& drive,
                                       const std::vector<double>& grid,
                                       const std::vector<DetectionDirection>& directions,
                                       const RwConfig& cfg, std::uint64_t seed,
                                       const ThreadPool* pool = nullptr,
                                       std::uint64_t stream_offset = 0) {
  if (grid.empty()) throw ConfigError("sweep grid must be non-empty");
  spec.validate();
  drive.validate();
  const auto bins = make_detector_bins(directions, drive);
  RwSweepResult out;
  out.spectrum.detunings = grid;
  out.spectrum.directions = directions;
  out.spectrum.meta.model = "rw";
  out.spectrum.meta.cloud = spec;
  out.spectrum.meta.seed = seed;
  out.spectrum.meta.ensemble = static_cast<int>(cfg.photons);
  out.spectrum.meta.normalization = "scattered photons per launched photon per steradian";
  out.spectrum.meta.od = optical_depth_peak(spec, Axis::x, 0.0);
  out.spectrum.meta.density = peak_density(spec);
  out.spectrum.intensities.assign(bins.size(), std::vector<double>(grid.size(), 0.0));
  out.spectrum.stderrs.assign(bins.size(), std::vector<double>(grid.size(), 0.0));
  out.stats.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const GaussianMedium medium(spec, grid[i]);
    const RunTallies t = run_photons(medium, drive, spec, cfg, bins, seed,
                                     stream_offset + static_cast<std::uint64_t>(i), pool);
    for (std::size_t b = 0; b < bins.size(); ++b) {
      const double norm = 1.0 / (static_cast<double>(t.photons) * bins[b].solid_angle);
      out.spectrum.intensities[b][i] = t.scattered[b] * norm;
      out.spectrum.stderrs[b][i] = std::sqrt(std::max(1.0, t.scattered[b])) * norm;
    }
    auto& s = out.stats[i];
    s.ballistic_fraction = static_cast<double>(t.ballistic) / t.photons;
    s.mean_scatters = t.scatter_count_sum / t.photons;
    s.truncated = t.truncated;
    s.histogram = t.histogram;
  }
  return out;
}

}  // namespace coldscat::rw
