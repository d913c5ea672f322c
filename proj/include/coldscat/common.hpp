#pragma once

#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

// Working units throughout the library: lengths in 1/k0, rates and
// frequencies in Gamma, momenta in hbar*k0, time in 1/Gamma. The constants
// below exist so formulas read like the physics, not so they can be changed.
namespace coldscat {

using Vec3 = Eigen::Vector3d;
using Complex = std::complex<double>;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kGamma = 1.0;  // natural linewidth
inline constexpr double kWavevector = 1.0;  // k0

// FWHM -> standard deviation of a Gaussian.
inline constexpr double kFwhmToSigma = 0.42466090014400953;  // 1/sqrt(8 ln 2)

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IntegrationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when an iterative solve does not reach tolerance; keeps the
// residual trace so a caller can tell stagnation from divergence.
struct SolverError : std::runtime_error {
  std::vector<double> residual_history;
  SolverError(const std::string& what, std::vector<double> history)
      : std::runtime_error(what), residual_history(std::move(history)) {}
};

inline bool nearly_equal(double a, double b, double rel, double abs = 0.0) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return std::abs(a - b) <= std::max(abs, rel * scale);
}

}  // namespace coldscat
