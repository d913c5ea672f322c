#pragma once

#include <cmath>
#include <vector>

#include "coldscat/common.hpp"
#include "coldscat/dipole_kernel.hpp"
#include "coldscat/geometry.hpp"
#include "coldscat/rng.hpp"

namespace coldscat {

struct DriveSpec {
  double rabi = 0.01;                   // Omega, units Gamma
  double detuning = 0.0;                // laser detuning Delta, units Gamma
  Vec3 wavevector = Vec3(1, 0, 0);      // khat0, |k0| = 1 in k0 units
  Vec3 polarization = Vec3(0, 0, 1);    // gammahat, orthogonal to khat0
  Vec3 zeeman_splittings = Vec3::Zero();  // per-level splittings (x, y, z)

  void validate() const {
    if (rabi < 0) throw ConfigError("drive.rabi must be >= 0");
    if (std::abs(wavevector.norm() - 1.0) > 1e-9)
      throw ConfigError("drive.wavevector must be a unit vector");
    if (std::abs(polarization.norm() - 1.0) > 1e-9)
      throw ConfigError("drive.polarization must be a unit vector");
    if (std::abs(polarization.dot(wavevector)) >= 1e-12)
      throw ConfigError("drive.polarization must be orthogonal to the wavevector");
  }

  // Effective detuning of level alpha; degenerate excited levels by default.
  double level_detuning(int alpha) const { return detuning - zeeman_splittings[alpha]; }
};

// --- Krylov solver ----------------------------------------------------------

struct KrylovOptions {
  double tolerance = 1e-8;  // relative residual
  int max_iterations = 600;
};

struct KrylovResult {
  Eigen::VectorXcd x;
  std::vector<double> residual_history;
  int iterations = 0;
  bool converged = false;
};

// Jacobi-preconditioned BiCGSTAB for a generic matrix-vector product.
// Records the residual after every iteration so non-convergence can be
// reported with its history.
template <typename MatVec>
KrylovResult bicgstab(const MatVec& apply, const Eigen::VectorXcd& rhs,
                      const Eigen::VectorXcd& inv_diagonal, const KrylovOptions& opts) {
  using Eigen::VectorXcd;
  KrylovResult result;
  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) {
    result.x = VectorXcd::Zero(rhs.size());
    result.converged = true;
    return result;
  }
  VectorXcd x = inv_diagonal.cwiseProduct(rhs);
  VectorXcd r = rhs - apply(x);
  VectorXcd rhat = r;
  VectorXcd p = VectorXcd::Zero(rhs.size());
  VectorXcd v = VectorXcd::Zero(rhs.size());
  Complex rho(1, 0), alpha(1, 0), omega(1, 0);
  double res_norm = r.norm() / rhs_norm;
  result.residual_history.push_back(res_norm);
  for (int it = 0; it < opts.max_iterations && res_norm > opts.tolerance; ++it) {
    const Complex rho_next = rhat.dot(r);
    if (std::abs(rho_next) < 1e-300) break;  // breakdown
    const Complex beta = (rho_next / rho) * (alpha / omega);
    rho = rho_next;
    p = r + beta * (p - omega * v);
    const VectorXcd phat = inv_diagonal.cwiseProduct(p);
    v = apply(phat);
    alpha = rho / rhat.dot(v);
    const VectorXcd s = r - alpha * v;
    const VectorXcd shat = inv_diagonal.cwiseProduct(s);
    const VectorXcd t = apply(shat);
    const double tt = t.squaredNorm();
    omega = tt > 0 ? t.dot(s) / Complex(tt, 0) : Complex(0, 0);
    x += alpha * phat + omega * shat;
    r = s - omega * t;
    res_norm = r.norm() / rhs_norm;
    result.iterations = it + 1;
    result.residual_history.push_back(res_norm);
  }
  result.x = std::move(x);
  result.converged = res_norm <= opts.tolerance;
  return result;
}

// --- full J=0 -> J'=1 system ------------------------------------------------

// Steady-state coupled-dipole equations rearranged to standard linear form:
//   (Delta^a - dnu_j + i Gamma/2) b_j^a - sum_{n!=j,a'} G_jn^{aa'} b_n^a'
//       = (Omega/2) gammahat^a exp(i k0 . r_j).
struct DipoleSystem {
  Eigen::MatrixXcd matrix;  // 3N x 3N
  Eigen::VectorXcd rhs;     // 3N
  const AtomicCloud* cloud = nullptr;
  DriveSpec drive;
};

struct SteadyState {
  Eigen::MatrixX3cd coherences;  // N x 3, b_j^alpha
  double residual_norm = 0.0;
};

enum class SolveMethod { direct, iterative };

inline void check_separations(const AtomicCloud& cloud) {
  const double floor = cloud.spec.min_separation;
  const double floor2 = floor * floor * (1.0 - 1e-12);
  const int n = cloud.size();
  for (int j = 0; j < n; ++j)
    for (int l = j + 1; l < n; ++l)
      if ((cloud.positions[l] - cloud.positions[j]).squaredNorm() < floor2)
        throw SamplingError("cloud pair separation below the regularization floor");
}

inline DipoleSystem build_system(const AtomicCloud& cloud, const DriveSpec& drive) {
  drive.validate();
  check_separations(cloud);
  const int n = cloud.size();
  DipoleSystem sys;
  sys.cloud = &cloud;
  sys.drive = drive;
  sys.matrix = Eigen::MatrixXcd::Zero(3 * n, 3 * n);
  sys.rhs.resize(3 * n);
  for (int j = 0; j < n; ++j) {
    const Complex phase =
        std::exp(Complex(0, drive.wavevector.dot(cloud.positions[j])));
    for (int a = 0; a < 3; ++a) {
      sys.matrix(3 * j + a, 3 * j + a) =
          Complex(drive.level_detuning(a) - cloud.detunings[j], 0.5 * kGamma);
      sys.rhs(3 * j + a) = 0.5 * drive.rabi * drive.polarization[a] * phase;
    }
    for (int l = j + 1; l < n; ++l) {
      const GreenTensor g = green_tensor(cloud.positions[j] - cloud.positions[l]);
      sys.matrix.block<3, 3>(3 * j, 3 * l) = -g.value;
      sys.matrix.block<3, 3>(3 * l, 3 * j) = -g.value;  // G is even in r_jl
    }
  }
  if (!sys.matrix.allFinite() || !sys.rhs.allFinite())
    throw SamplingError("build_system: non-finite entries (separation below floor?)");
  return sys;
}

namespace detail {

inline SteadyState pack_steady_state(const Eigen::VectorXcd& x, double residual) {
  SteadyState state;
  const int n = static_cast<int>(x.size()) / 3;
  state.coherences.resize(n, 3);
  for (int j = 0; j < n; ++j)
    for (int a = 0; a < 3; ++a) state.coherences(j, a) = x(3 * j + a);
  state.residual_norm = residual;
  return state;
}

}  // namespace detail

inline SteadyState solve_steady_state(const DipoleSystem& sys,
                                      SolveMethod method = SolveMethod::direct,
                                      double tol = 1e-8) {
  if (method == SolveMethod::direct) {
    const Eigen::VectorXcd x = sys.matrix.partialPivLu().solve(sys.rhs);
    const double residual = (sys.matrix * x - sys.rhs).norm() / sys.rhs.norm();
    return detail::pack_steady_state(x, residual);
  }
  KrylovOptions opts;
  opts.tolerance = tol;
  const Eigen::VectorXcd inv_diag = sys.matrix.diagonal().cwiseInverse();
  auto apply = [&sys](const Eigen::VectorXcd& v) -> Eigen::VectorXcd {
    return sys.matrix * v;
  };
  KrylovResult res = bicgstab(apply, sys.rhs, inv_diag, opts);
  if (!res.converged)
    throw SolverError("solve_steady_state: BiCGSTAB did not converge",
                      res.residual_history);
  return detail::pack_steady_state(res.x, res.residual_history.back());
}

// Cached pair couplings for one realization: lets a detuning sweep reuse the
// O(N^2) Green tensor work, and provides the matrix-free product for large N
// where the dense 3N x 3N matrix would not fit.
class VectorPairCache {
 public:
  VectorPairCache(const AtomicCloud& cloud, std::size_t cache_limit_bytes = std::size_t(2) << 30)
      : n_(cloud.size()), positions_(&cloud.positions) {
    check_separations(cloud);
    const std::size_t pairs = static_cast<std::size_t>(n_) * (n_ - 1) / 2;
    if (pairs * sizeof(Eigen::Matrix3cd) <= cache_limit_bytes) {
      blocks_.reserve(pairs);
      for (int j = 0; j < n_; ++j)
        for (int l = j + 1; l < n_; ++l)
          blocks_.push_back(green_tensor((*positions_)[j] - (*positions_)[l]).value);
    }
  }

  int n_atoms() const { return n_; }
  bool cached() const { return !blocks_.empty(); }

  // out = G v with G the off-diagonal interaction operator.
  void apply_interaction(const Eigen::VectorXcd& v, Eigen::VectorXcd& out) const {
    out.setZero(3 * n_);
    if (cached()) {
      std::size_t idx = 0;
      for (int j = 0; j < n_; ++j) {
        for (int l = j + 1; l < n_; ++l, ++idx) {
          const Eigen::Matrix3cd& blk = blocks_[idx];
          out.segment<3>(3 * j) += blk * v.segment<3>(3 * l);
          out.segment<3>(3 * l) += blk * v.segment<3>(3 * j);
        }
      }
    } else {
      for (int j = 0; j < n_; ++j) {
        for (int l = j + 1; l < n_; ++l) {
          const Eigen::Matrix3cd blk =
              green_tensor((*positions_)[j] - (*positions_)[l]).value;
          out.segment<3>(3 * j) += blk * v.segment<3>(3 * l);
          out.segment<3>(3 * l) += blk * v.segment<3>(3 * j);
        }
      }
    }
  }

 private:
  int n_;
  const std::vector<Vec3>* positions_;
  std::vector<Eigen::Matrix3cd> blocks_;
};

inline Eigen::VectorXcd vector_drive_rhs(const AtomicCloud& cloud, const DriveSpec& drive) {
  const int n = cloud.size();
  Eigen::VectorXcd rhs(3 * n);
  for (int j = 0; j < n; ++j) {
    const Complex phase = std::exp(Complex(0, drive.wavevector.dot(cloud.positions[j])));
    for (int a = 0; a < 3; ++a)
      rhs(3 * j + a) = 0.5 * drive.rabi * drive.polarization[a] * phase;
  }
  return rhs;
}

inline SteadyState solve_steady_state(const VectorPairCache& cache, const AtomicCloud& cloud,
                                      const DriveSpec& drive, double tol = 1e-8,
                                      int max_iterations = 600) {
  drive.validate();
  const int n = cache.n_atoms();
  Eigen::VectorXcd diag(3 * n);
  for (int j = 0; j < n; ++j)
    for (int a = 0; a < 3; ++a)
      diag(3 * j + a) = Complex(drive.level_detuning(a) - cloud.detunings[j], 0.5 * kGamma);
  const Eigen::VectorXcd rhs = vector_drive_rhs(cloud, drive);
  Eigen::VectorXcd scratch;
  auto apply = [&](const Eigen::VectorXcd& v) -> Eigen::VectorXcd {
    Eigen::VectorXcd out;
    cache.apply_interaction(v, out);
    return diag.cwiseProduct(v) - out;
  };
  KrylovOptions opts;
  opts.tolerance = tol;
  opts.max_iterations = max_iterations;
  KrylovResult res = bicgstab(apply, rhs, diag.cwiseInverse(), opts);
  if (!res.converged)
    throw SolverError("solve_steady_state (matrix-free): BiCGSTAB did not converge",
                      res.residual_history);
  return detail::pack_steady_state(res.x, res.residual_history.back());
}

// --- two-level reduction ----------------------------------------------------
// Retains only the driven polarization; used by the semiclassical
// cross-checks and by large sweeps where the physics is polarization
// insensitive. The coupling is the gammahat-projected tensor, equal to
// g - i f of the scalar kernels.

enum class DriveForm {
  travelling,  // (Omega/2) exp(i k0 . r)
  standing,    // Omega cos(k0 . r), two counter-propagating beams
};

struct TwoLevelSystem {
  Eigen::MatrixXcd matrix;  // N x N
  Eigen::VectorXcd rhs;
  const AtomicCloud* cloud = nullptr;
  DriveSpec drive;
  DriveForm form = DriveForm::travelling;
};

struct TwoLevelState {
  Eigen::VectorXcd coherences;
  double residual_norm = 0.0;
};

inline Complex two_level_drive(const DriveSpec& drive, const Vec3& r, DriveForm form) {
  const double kr = drive.wavevector.dot(r);
  if (form == DriveForm::travelling)
    return 0.5 * drive.rabi * std::exp(Complex(0, kr));
  return Complex(drive.rabi * std::cos(kr), 0);
}

inline TwoLevelSystem build_two_level_system(const AtomicCloud& cloud, const DriveSpec& drive,
                                             DriveForm form = DriveForm::travelling) {
  drive.validate();
  check_separations(cloud);
  const int n = cloud.size();
  TwoLevelSystem sys;
  sys.cloud = &cloud;
  sys.drive = drive;
  sys.form = form;
  sys.matrix = Eigen::MatrixXcd::Zero(n, n);
  sys.rhs.resize(n);
  for (int j = 0; j < n; ++j) {
    sys.matrix(j, j) = Complex(drive.detuning - cloud.detunings[j], 0.5 * kGamma);
    sys.rhs(j) = two_level_drive(drive, cloud.positions[j], form);
    for (int l = j + 1; l < n; ++l) {
      const Complex coupling = green_tensor_projected(
          cloud.positions[j] - cloud.positions[l], drive.polarization);
      sys.matrix(j, l) = -coupling;
      sys.matrix(l, j) = -coupling;
    }
  }
  if (!sys.matrix.allFinite()) throw SamplingError("build_two_level_system: non-finite entries");
  return sys;
}

inline TwoLevelState solve_two_level(const TwoLevelSystem& sys,
                                     SolveMethod method = SolveMethod::direct,
                                     double tol = 1e-8) {
  TwoLevelState state;
  if (method == SolveMethod::direct) {
    state.coherences = sys.matrix.partialPivLu().solve(sys.rhs);
    state.residual_norm = (sys.matrix * state.coherences - sys.rhs).norm() / sys.rhs.norm();
    return state;
  }
  KrylovOptions opts;
  opts.tolerance = tol;
  auto apply = [&sys](const Eigen::VectorXcd& v) -> Eigen::VectorXcd {
    return sys.matrix * v;
  };
  KrylovResult res = bicgstab(apply, sys.rhs, sys.matrix.diagonal().cwiseInverse(), opts);
  if (!res.converged)
    throw SolverError("solve_two_level: BiCGSTAB did not converge", res.residual_history);
  state.coherences = std::move(res.x);
  state.residual_norm = res.residual_history.back();
  return state;
}

class TwoLevelPairCache {
 public:
  TwoLevelPairCache(const AtomicCloud& cloud, const Vec3& polarization,
                    std::size_t cache_limit_bytes = std::size_t(2) << 30)
      : n_(cloud.size()), positions_(&cloud.positions), axis_(polarization.normalized()) {
    check_separations(cloud);
    const std::size_t pairs = static_cast<std::size_t>(n_) * (n_ - 1) / 2;
    if (pairs * sizeof(Complex) <= cache_limit_bytes) {
      coupling_.reserve(pairs);
      for (int j = 0; j < n_; ++j)
        for (int l = j + 1; l < n_; ++l)
          coupling_.push_back(
              green_tensor_projected((*positions_)[j] - (*positions_)[l], axis_));
    }
  }

  int n_atoms() const { return n_; }

  void apply_interaction(const Eigen::VectorXcd& v, Eigen::VectorXcd& out) const {
    out.setZero(n_);
    if (!coupling_.empty()) {
      std::size_t idx = 0;
      for (int j = 0; j < n_; ++j)
        for (int l = j + 1; l < n_; ++l, ++idx) {
          out(j) += coupling_[idx] * v(l);
          out(l) += coupling_[idx] * v(j);
        }
    } else {
      for (int j = 0; j < n_; ++j)
        for (int l = j + 1; l < n_; ++l) {
          const Complex c = green_tensor_projected((*positions_)[j] - (*positions_)[l], axis_);
          out(j) += c * v(l);
          out(l) += c * v(j);
        }
    }
  }

 private:
  int n_;
  const std::vector<Vec3>* positions_;
  Vec3 axis_;
  std::vector<Complex> coupling_;
};

inline TwoLevelState solve_two_level(const TwoLevelPairCache& cache, const AtomicCloud& cloud,
                                     const DriveSpec& drive, DriveForm form,
                                     double tol = 1e-8, int max_iterations = 600) {
  drive.validate();
  const int n = cache.n_atoms();
  Eigen::VectorXcd diag(n), rhs(n);
  for (int j = 0; j < n; ++j) {
    diag(j) = Complex(drive.detuning - cloud.detunings[j], 0.5 * kGamma);
    rhs(j) = two_level_drive(drive, cloud.positions[j], form);
  }
  auto apply = [&](const Eigen::VectorXcd& v) -> Eigen::VectorXcd {
    Eigen::VectorXcd out;
    cache.apply_interaction(v, out);
    return diag.cwiseProduct(v) - out;
  };
  KrylovOptions opts;
  opts.tolerance = tol;
  opts.max_iterations = max_iterations;
  KrylovResult res = bicgstab(apply, rhs, diag.cwiseInverse(), opts);
  if (!res.converged)
    throw SolverError("solve_two_level (matrix-free): BiCGSTAB did not converge",
                      res.residual_history);
  TwoLevelState state;
  state.coherences = std::move(res.x);
  state.residual_norm = res.residual_history.back();
  return state;
}

// --- perturbative expansion -------------------------------------------------

// Order-n coherences of the multiple-scattering expansion:
// b^(0) is the drive-only response, b^(m) = D^-1 G b^(m-1). The partial sums
// converge to the exact steady state when the spectral radius of D^-1 G is
// below one (dilute clouds).
inline Eigen::MatrixX3cd perturbative_order(const AtomicCloud& cloud, const DriveSpec& drive,
                                            int order) {
  drive.validate();
  if (order < 0 || order > 4)
    throw ConfigError("perturbative_order: supported orders are 0..4");
  const int n = cloud.size();
  Eigen::VectorXcd diag_inv(3 * n);
  for (int j = 0; j < n; ++j)
    for (int a = 0; a < 3; ++a)
      diag_inv(3 * j + a) =
          1.0 / Complex(drive.level_detuning(a) - cloud.detunings[j], 0.5 * kGamma);
  Eigen::VectorXcd b = diag_inv.cwiseProduct(vector_drive_rhs(cloud, drive));
  if (order > 0) {
    VectorPairCache cache(cloud);
    Eigen::VectorXcd scattered;
    for (int m = 0; m < order; ++m) {
      cache.apply_interaction(b, scattered);
      b = diag_inv.cwiseProduct(scattered);
    }
  }
  return detail::pack_steady_state(b, 0.0).coherences;
}

inline Eigen::MatrixX3cd perturbative_partial_sum(const AtomicCloud& cloud,
                                                  const DriveSpec& drive, int max_order) {
  Eigen::MatrixX3cd sum = perturbative_order(cloud, drive, 0);
  for (int m = 1; m <= max_order; ++m) sum += perturbative_order(cloud, drive, m);
  return sum;
}

// Realization average Gbar = sum_{i!=j} G_ij^{gg} e^{-i k0 . r_ij} / (N Gamma);
// sets the first-order Lorentzian center (Gamma Re) and width
// (Gamma - 2 Gamma Im, the imaginary part being negative for a driven cloud).
inline Complex mean_pair_coupling(const AtomicCloud& cloud, const DriveSpec& drive) {
  const int n = cloud.size();
  Complex sum(0, 0);
  for (int j = 0; j < n; ++j)
    for (int l = 0; l < n; ++l) {
      if (l == j) continue;
      const Vec3 r = cloud.positions[j] - cloud.positions[l];
      sum += green_tensor_projected(r, drive.polarization) *
             std::exp(Complex(0, -drive.wavevector.dot(r)));
    }
  return sum / (n * kGamma);
}

// --- modified frozen dipole model -------------------------------------------

// Draws static per-atom detunings from the Maxwell-Boltzmann Doppler
// distribution with FWHM doppler_width (standard deviation
// doppler_width / sqrt(8 ln 2)).
inline AtomicCloud assign_doppler_detunings(const AtomicCloud& cloud, double doppler_width,
                                            CounterRng& rng) {
  if (doppler_width < 0) throw ConfigError("doppler width must be >= 0");
  AtomicCloud out = cloud;
  const double sigma = doppler_width * kFwhmToSigma;
  for (auto& detuning : out.detunings) detuning = sigma * rng.normal();
  return out;
}

namespace detail {

// Scaled complementary error function erfcx(x) = exp(x^2) erfc(x), x >= 0.
inline double erfcx(double x) {
  if (x < 6.0) return std::exp(x * x) * std::erfc(x);
  // Asymptotic series, accurate to ~1e-14 for x >= 6.
  const double inv2 = 1.0 / (2.0 * x * x);
  double term = 1.0, sum = 1.0;
  for (int k = 1; k <= 6; ++k) {
    term *= -(2.0 * k - 1.0) * inv2;
    sum += term;
  }
  return sum / (x * std::sqrt(kPi));
}

}  // namespace detail

// On-resonance coherent/incoherent enhancement ratio of the frozen-Doppler
// ensemble as a closed form in d = doppler_width / (sqrt(8 ln 2) Gamma);
// tends to 1 as the Doppler width vanishes.
inline double enhancement_ratio(double doppler_width) {
  if (doppler_width < 0) throw ConfigError("doppler width must be >= 0");
  const double d = doppler_width * kFwhmToSigma / kGamma;
  if (d == 0.0) return 1.0;
  const double x = 1.0 / (2.0 * std::sqrt(2.0) * d);
  return std::sqrt(kPi / 2.0) * detail::erfcx(x) / (2.0 * d);
}

}  // namespace coldscat
