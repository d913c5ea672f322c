#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "coldscat/coherent_dipole.hpp"
#include "coldscat/common.hpp"
#include "coldscat/dipole_kernel.hpp"
#include "coldscat/geometry.hpp"
#include "coldscat/observables.hpp"
#include "coldscat/rng.hpp"
#include "coldscat/thread_pool.hpp"

namespace coldscat::sc {

// Two-level semiclassical dynamics in the laser rotating frame, driven by two
// counter-propagating beams along +-khat0:
//   db_j/dt = (i Delta - Gamma/2) b_j + i s_j sum_l (g_jl - i f_jl) b_l
//             + i Omega cos(k0.r_j) s_j
//   ds_j/dt = -Gamma (s_j + 1) + 4 sum_l [g_jl Im(b_j* b_l) - f_jl Re(b_j* b_l)]
//             - 4 Omega cos(k0.r_j) Im b_j
//   dp_j/dt = sum_l [-grad g * 2 Re(b_j b_l*) - grad f * 2 Im(b_j b_l*)]
//             + 2 Omega sin(k0.r_j) Re b_j khat0
//   dr_j/dt = 2 omega_r p_j
// (units: hbar = k0 = Gamma = 1, momenta in hbar k0, m = 1/(2 omega_r)).
// The drive signs close the single-atom optical Bloch equations with positive
// excitation and, with the force term, derive from one drive Hamiltonian;
// red-detuned beams then cool a moving atom (verified in tests).

struct MotionSpec {
  double recoil = 0.0;         // omega_r, units Gamma
  double doppler_width = 0.0;  // Delta_D (FWHM) for initial momenta, units Gamma
  int dims = 3;                // 1 restricts motion to the beam axis
  bool noise = false;          // momentum diffusion on/off
  double dt = 0.002;           // step, units 1/Gamma
  bool forces = true;          // pair + laser forces on the momenta
  double separation_floor = 0.05;  // kernel clamp radius, units 1/k0

  void validate() const {
    if (recoil < 0) throw ConfigError("motion.recoil must be >= 0");
    if (doppler_width < 0) throw ConfigError("motion.doppler_width must be >= 0");
    if (doppler_width > 0 && recoil <= 0)
      throw ConfigError("motion.doppler_width needs recoil > 0 to map onto momenta");
    if (dims != 1 && dims != 3) throw ConfigError("motion.dims must be 1 or 3");
    if (!(dt > 0)) throw ConfigError("motion.dt must be > 0");
    if (!(separation_floor > 0)) throw ConfigError("motion.separation_floor must be > 0");
  }
};

struct SemiClassicalState {
  Eigen::VectorXcd b;          // coherences, laser frame
  Eigen::VectorXd s;           // inversions in [-1, 1]
  Eigen::MatrixX3d positions;  // units 1/k0
  Eigen::MatrixX3d momenta;    // units hbar k0
  double t = 0.0;

  int size() const { return static_cast<int>(b.size()); }

  double excitation() const { return 0.5 * (s.array() + 1.0).sum(); }
};

inline SemiClassicalState make_ground_state(const AtomicCloud& cloud, const DriveSpec& drive,
                                            const MotionSpec& motion, CounterRng& rng) {
  drive.validate();
  motion.validate();
  const int n = cloud.size();
  SemiClassicalState state;
  state.b = Eigen::VectorXcd::Zero(n);
  state.s = Eigen::VectorXd::Constant(n, -1.0);
  state.positions.resize(n, 3);
  for (int j = 0; j < n; ++j) state.positions.row(j) = cloud.positions[j].transpose();
  state.momenta = Eigen::MatrixX3d::Zero(n, 3);
  if (motion.doppler_width > 0) {
    // Maxwell-Boltzmann momenta: the Doppler shift k0.v = 2 omega_r p has
    // standard deviation Delta_D / sqrt(8 ln 2).
    const double sigma_p = motion.doppler_width * kFwhmToSigma / (2.0 * motion.recoil);
    const Vec3 forward = drive.wavevector.normalized();
    for (int j = 0; j < n; ++j) {
      if (motion.dims == 1) {
        state.momenta.row(j) = (sigma_p * rng.normal()) * forward.transpose();
      } else {
        state.momenta.row(j) = (sigma_p * rng.normal3()).transpose();
      }
    }
  }
  return state;
}

struct Derivative {
  Eigen::VectorXcd db;
  Eigen::VectorXd ds;
  Eigen::MatrixX3d dr;
  Eigen::MatrixX3d dp;
};

namespace detail {

struct PairTable {
  std::vector<ScalarKernel> kernels;  // packed upper triangle j < l
  bool valid = false;
};

inline ScalarKernel clamped_kernel(Vec3 r, const Vec3& axis, double floor, long& clamps) {
  const double dist = r.norm();
  if (dist < floor) {
    ++clamps;
    r = (dist > 0 ? (r / dist) : Vec3(1, 0, 0)) * floor;
  }
  return scalar_kernel(r, axis);
}

}  // namespace detail

// Time derivative of the full state; `clamp_events` counts pair evaluations
// frozen at the separation floor. A prebuilt kernel table may be supplied
// when positions are static.
inline Derivative eom_derivative(const SemiClassicalState& state, const DriveSpec& drive,
                                 const MotionSpec& motion, long* clamp_events = nullptr,
                                 const detail::PairTable* table = nullptr) {
  const int n = state.size();
  const Vec3 forward = drive.wavevector.normalized();
  const Vec3 axis = drive.polarization.normalized();
  Derivative d;
  d.db.resize(n);
  d.ds.resize(n);
  d.dr.setZero(n, 3);
  d.dp.setZero(n, 3);

  long clamps = 0;
  for (int j = 0; j < n; ++j) {
    const double kr = forward.dot(state.positions.row(j));
    const double cos_kr = std::cos(kr);
    const Complex b = state.b(j);
    d.db(j) = (Complex(0, drive.detuning) - 0.5 * kGamma) * b +
              Complex(0, drive.rabi * cos_kr * state.s(j));
    d.ds(j) = -kGamma * (state.s(j) + 1.0) - 4.0 * drive.rabi * cos_kr * b.imag();
    if (motion.forces)
      d.dp.row(j) =
          (2.0 * drive.rabi * std::sin(kr) * b.real()) * forward.transpose();
    d.dr.row(j) = 2.0 * motion.recoil * state.momenta.row(j);
  }

  std::size_t idx = 0;
  for (int j = 0; j < n; ++j) {
    for (int l = j + 1; l < n; ++l, ++idx) {
      ScalarKernel k;
      if (table && table->valid) {
        k = table->kernels[idx];
      } else {
        const Vec3 rjl = (state.positions.row(j) - state.positions.row(l)).transpose();
        k = detail::clamped_kernel(rjl, axis, motion.separation_floor, clamps);
      }
      const Complex coupling(k.g, -k.f);
      d.db(j) += Complex(0, 1) * state.s(j) * coupling * state.b(l);
      d.db(l) += Complex(0, 1) * state.s(l) * coupling * state.b(j);
      const Complex cross = std::conj(state.b(j)) * state.b(l);  // b_j* b_l
      d.ds(j) += 4.0 * (k.g * cross.imag() - k.f * cross.real());
      d.ds(l) += 4.0 * (-k.g * cross.imag() - k.f * cross.real());
      if (motion.forces) {
        const Complex w = state.b(j) * std::conj(state.b(l));  // b_j b_l*
        const Vec3 fj = -2.0 * w.real() * k.grad_g - 2.0 * w.imag() * k.grad_f;
        const Vec3 fl = 2.0 * w.real() * k.grad_g - 2.0 * w.imag() * k.grad_f;
        d.dp.row(j) += fj.transpose();
        d.dp.row(l) += fl.transpose();
      }
    }
  }
  if (motion.dims == 1) {
    // Keep only the beam-axis component of the external dynamics.
    for (int j = 0; j < n; ++j) {
      d.dp.row(j) = d.dp.row(j).dot(forward.transpose()) * forward.transpose();
      d.dr.row(j) = d.dr.row(j).dot(forward.transpose()) * forward.transpose();
    }
  }
  if (clamp_events) *clamp_events += clamps;
  return d;
}

// Momentum diffusion matrix (units hbar^2 k0^2 Gamma): single-atom blocks are
// diagonal with the dipole-pattern anisotropy (2 - delta_{alpha,axis})/20
// times Gamma (s+1); pair blocks are -hess f(r_ij) Re[b_i* b_j].
inline Eigen::MatrixXd diffusion_matrix(const SemiClassicalState& state,
                                        const DriveSpec& drive) {
  const int n = state.size();
  const Vec3 axis = drive.polarization.normalized();
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(3 * n, 3 * n);
  // (2 - delta_{alpha,axis})/20: recoil variance along the dipole axis is
  // half the transverse one, following the dipole emission pattern.
  for (int i = 0; i < n; ++i) {
    Eigen::Matrix3d block = Eigen::Matrix3d::Zero();
    for (int a = 0; a < 3; ++a)
      block(a, a) = (2.0 - axis[a] * axis[a]) / 20.0 * kGamma * (state.s(i) + 1.0);
    d.block<3, 3>(3 * i, 3 * i) = block;
    for (int j = i + 1; j < n; ++j) {
      const Vec3 rij = (state.positions.row(i) - state.positions.row(j)).transpose();
      const Eigen::Matrix3d cross =
          -hessian_f(rij, axis) * (std::conj(state.b(i)) * state.b(j)).real();
      d.block<3, 3>(3 * i, 3 * j) = cross;
      d.block<3, 3>(3 * j, 3 * i) = cross.transpose();
    }
  }
  return d;
}

struct IntegrationResult {
  SemiClassicalState state;
  long clamp_events = 0;
  double dt_used = 0.0;
  int steps = 0;
};

using SnapshotObserver = std::function<void(const SemiClassicalState&)>;

namespace detail {

inline void axpy(SemiClassicalState& out, const SemiClassicalState& base, const Derivative& d,
                 double h) {
  out.b = base.b + h * d.db;
  out.s = base.s + h * d.ds;
  out.positions = base.positions + h * d.dr;
  out.momenta = base.momenta + h * d.dp;
  out.t = base.t + h;
}

inline void check_bloch(const SemiClassicalState& state, double tol) {
  for (int j = 0; j < state.size(); ++j) {
    const double s = state.s(j);
    if (s < -1.0 - tol || s > 1.0 + tol)
      throw IntegrationError("inversion left [-1,1] at t=" + std::to_string(state.t) +
                             " atom " + std::to_string(j) + " s=" + std::to_string(s));
    const double bound = 0.25 * (1.0 - s * s) + tol;
    if (std::norm(state.b(j)) > bound)
      throw IntegrationError("Bloch bound violated at t=" + std::to_string(state.t) +
                             " atom " + std::to_string(j));
  }
}

}  // namespace detail

// Fixed-step RK4 (reproducible trajectories), dt capped by the strongest
// coupling of the initial configuration. Optional Euler-Maruyama momentum
// noise on top of the deterministic step.
inline IntegrationResult integrate(const SemiClassicalState& initial, const DriveSpec& drive,
                                   const MotionSpec& motion, double t_end,
                                   CounterRng* noise_rng = nullptr,
                                   const SnapshotObserver& observer = {},
                                   int observer_stride = 1) {
  drive.validate();
  motion.validate();
  if (motion.noise && !noise_rng)
    throw ConfigError("integrate: noise enabled but no rng supplied");

  const int n = initial.size();
  const Vec3 axis = drive.polarization.normalized();

  // Step control: resolve Gamma, the drive, the detuning and the strongest
  // pair coupling of the initial configuration.
  double max_coupling = std::max({kGamma, drive.rabi, std::abs(drive.detuning)});
  long ignored = 0;
  for (int j = 0; j < n; ++j)
    for (int l = j + 1; l < n; ++l) {
      const Vec3 rjl = (initial.positions.row(j) - initial.positions.row(l)).transpose();
      const ScalarKernel k =
          detail::clamped_kernel(rjl, axis, motion.separation_floor, ignored);
      max_coupling = std::max({max_coupling, std::abs(k.g), std::abs(k.f)});
    }
  const double dt = std::min(motion.dt, 0.1 / max_coupling);

  // Static positions (no motion, no recoil): reuse the pair kernels.
  const bool frozen = motion.recoil == 0.0 && !motion.noise;
  detail::PairTable table;
  long clamp_events = 0;
  if (frozen && n > 1) {
    table.kernels.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
    for (int j = 0; j < n; ++j)
      for (int l = j + 1; l < n; ++l) {
        const Vec3 rjl = (initial.positions.row(j) - initial.positions.row(l)).transpose();
        table.kernels.push_back(
            detail::clamped_kernel(rjl, axis, motion.separation_floor, clamp_events));
      }
    table.valid = true;
  }
  const detail::PairTable* table_ptr = table.valid ? &table : nullptr;

  IntegrationResult result;
  result.state = initial;
  result.dt_used = dt;
  SemiClassicalState stage;
  while (result.state.t < t_end - 1e-12) {
    const double h = std::min(dt, t_end - result.state.t);
    const SemiClassicalState& y = result.state;
    const Derivative k1 = eom_derivative(y, drive, motion, &clamp_events, table_ptr);
    detail::axpy(stage, y, k1, 0.5 * h);
    const Derivative k2 = eom_derivative(stage, drive, motion, &clamp_events, table_ptr);
    detail::axpy(stage, y, k2, 0.5 * h);
    const Derivative k3 = eom_derivative(stage, drive, motion, &clamp_events, table_ptr);
    detail::axpy(stage, y, k3, h);
    const Derivative k4 = eom_derivative(stage, drive, motion, &clamp_events, table_ptr);

    SemiClassicalState next;
    next.b = y.b + (h / 6.0) * (k1.db + 2.0 * k2.db + 2.0 * k3.db + k4.db);
    next.s = y.s + (h / 6.0) * (k1.ds + 2.0 * k2.ds + 2.0 * k3.ds + k4.ds);
    next.positions =
        y.positions + (h / 6.0) * (k1.dr + 2.0 * k2.dr + 2.0 * k3.dr + k4.dr);
    next.momenta = y.momenta + (h / 6.0) * (k1.dp + 2.0 * k2.dp + 2.0 * k3.dp + k4.dp);
    next.t = y.t + h;

    if (motion.noise) {
      Eigen::MatrixXd diffusion = diffusion_matrix(y, drive);
      diffusion.diagonal().array() += 1e-14;
      Eigen::LLT<Eigen::MatrixXd> llt(diffusion);
      if (llt.info() != Eigen::Success)
        throw IntegrationError("diffusion matrix not positive definite at t=" +
                               std::to_string(y.t));
      Eigen::VectorXd z(3 * n);
      for (int i = 0; i < 3 * n; ++i) z(i) = noise_rng->normal();
      Eigen::VectorXd kick = llt.matrixL() * z;
      kick *= std::sqrt(h);
      const Vec3 forward = drive.wavevector.normalized();
      for (int j = 0; j < n; ++j) {
        Vec3 dp = kick.segment<3>(3 * j);
        if (motion.dims == 1) dp = dp.dot(forward) * forward;
        next.momenta.row(j) += dp.transpose();
      }
    }

    detail::check_bloch(next, 1e-6);
    result.state = std::move(next);
    ++result.steps;
    if (observer && result.steps % observer_stride == 0) observer(result.state);
  }
  result.clamp_events = clamp_events;
  return result;
}

// Snapshot in the plain-text atom-table format with b and s appended.
inline void write_snapshot(const SemiClassicalState& state, std::ostream& os) {
  os.precision(17);
  os << "# coldscat semiclassical snapshot t=" << state.t << " n_atoms=" << state.size()
     << "\n# columns: x y z px py pz Re_b Im_b s\n";
  for (int j = 0; j < state.size(); ++j) {
    os << state.positions(j, 0) << ' ' << state.positions(j, 1) << ' '
       << state.positions(j, 2) << ' ' << state.momenta(j, 0) << ' ' << state.momenta(j, 1)
       << ' ' << state.momenta(j, 2) << ' ' << state.b(j).real() << ' ' << state.b(j).imag()
       << ' ' << state.s(j) << "\n";
  }
}

// Finite-time excitation lineshape: mean total excited population at t_eval,
// averaged over cloud realizations and Maxwell-Boltzmann initial momenta.
inline Spectrum excitation_lineshape(const CloudSpec& cloud_spec, const DriveSpec& drive,
                                     const std::vector<double>& grid, const MotionSpec& motion,
                                     int ensemble, double t_eval, std::uint64_t seed,
                                     const ThreadPool* pool = nullptr) {
  auto evaluate = [&](double delta, int point, int member) -> std::vector<double> {
    (void)point;
    CounterRng cloud_rng(seed, static_cast<std::uint64_t>(member));
    const AtomicCloud cloud = sample_cloud(cloud_spec, cloud_rng);
    CounterRng momentum_rng(seed, static_cast<std::uint64_t>(member), 1);
    DriveSpec d = drive;
    d.detuning = delta;
    SemiClassicalState state = make_ground_state(cloud, d, motion, momentum_rng);
    CounterRng noise_rng(seed, static_cast<std::uint64_t>(member),
                         2 + static_cast<std::uint64_t>(point));
    const IntegrationResult result =
        integrate(state, d, motion, t_eval, motion.noise ? &noise_rng : nullptr);
    return {result.state.excitation()};
  };
  SpectrumMetadata meta;
  meta.model = "semiclassical";
  meta.cloud = cloud_spec;
  meta.normalization = "total excited population";
  meta.od = optical_depth(cloud_spec, Axis::x);
  meta.density = peak_density(cloud_spec);
  // The single placeholder direction records that this observable is the
  // angle-integrated excitation.
  std::vector<DetectionDirection> dirs = {{kPi / 2, kPi / 2, 0.0}};
  return sweep_spectrum(evaluate, grid, dirs, ensemble, seed, pool, meta);
}

}  // namespace coldscat::sc
