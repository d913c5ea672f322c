#pragma once

#include <cmath>

#include "coldscat/common.hpp"

namespace coldscat {

// Vector dipole-dipole coupling for a J=0 -> J'=1 transition,
//   G^{aa'}(r) = (3 Gamma / 4) [ delta_aa' A(k0 r) + rhat^a rhat^a' B(k0 r) ],
// with the far- (1/x), intermediate- (1/x^2) and near-field (1/x^3) parts in
// A and B. Real part = dispersive coupling, imaginary part = dissipative.
struct GreenTensor {
  Eigen::Matrix3cd value;  // symmetric in the Cartesian indices
};

namespace detail {

inline Complex green_a(double x) {
  const Complex phase(std::cos(x), std::sin(x));
  const double inv = 1.0 / x;
  return phase * Complex(-inv + inv * inv * inv, -inv * inv);
}

inline Complex green_b(double x) {
  const Complex phase(std::cos(x), std::sin(x));
  const double inv = 1.0 / x;
  return phase * Complex(inv - 3.0 * inv * inv * inv, 3.0 * inv * inv);
}

}  // namespace detail

inline GreenTensor green_tensor(const Vec3& r) {
  const double x = kWavevector * r.norm();
  if (!(x > 0.0))
    throw ConfigError("green_tensor: zero separation (self-interaction lives on the system diagonal)");
  const Vec3 rhat = r / r.norm();
  const Complex a = detail::green_a(x);
  const Complex b = detail::green_b(x);
  GreenTensor g;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      g.value(i, j) = 0.75 * kGamma * ((i == j ? a : Complex(0, 0)) + rhat[i] * rhat[j] * b);
  return g;
}

// Projection of the vector tensor onto a fixed dipole orientation; equals the
// two-level scalar coupling g - i f below.
inline Complex green_tensor_projected(const Vec3& r, const Vec3& axis) {
  const double x = kWavevector * r.norm();
  if (!(x > 0.0)) throw ConfigError("green_tensor_projected: zero separation");
  const double c = r.dot(axis) / r.norm();
  return 0.75 * kGamma * (detail::green_a(x) + c * c * detail::green_b(x));
}

// Two-level kernels of the semiclassical equations, for dipoles pinned along
// a quantization axis. theta is the angle between r and that axis,
//   g(r) = -(3G/4) ( z1 cos(x)/x + z2 [cos(x)/x^3 + sin(x)/x^2] )
//   f(r) =  (3G/4) ( z1 sin(x)/x + z2 [sin(x)/x^3 - cos(x)/x^2] )
// with z1 = sin^2 theta, z2 = 3 cos^2 theta - 1. Gradients are analytic;
// they feed the pair forces inside the integrator loops.
struct ScalarKernel {
  double g = 0.0;   // dispersive, units Gamma
  double f = 0.0;   // dissipative, units Gamma
  Vec3 grad_g = Vec3::Zero();  // units Gamma * k0
  Vec3 grad_f = Vec3::Zero();
};

// Dissipative self-term convention quoted with the equations of motion.
// The dynamics never evaluate the kernels at r=0: single-atom decay enters
// as Gamma/2 (coherence) and Gamma (population) terms.
inline double scalar_self_term_f() { return kGamma; }

inline ScalarKernel scalar_kernel(const Vec3& r, const Vec3& quantization_axis) {
  const double dist = r.norm();
  const double x = kWavevector * dist;
  if (!(x > 0.0)) throw ConfigError("scalar_kernel: zero separation");
  const Vec3 rhat = r / dist;
  const Vec3 axis = quantization_axis.normalized();
  const double c = rhat.dot(axis);
  const double z1 = 1.0 - c * c;
  const double z2 = 3.0 * c * c - 1.0;

  const double sx = std::sin(x), cx = std::cos(x);
  const double inv = 1.0 / x, inv2 = inv * inv, inv3 = inv2 * inv, inv4 = inv2 * inv2;

  const double p1 = cx * inv;
  const double p2 = cx * inv3 + sx * inv2;
  const double q1 = sx * inv;
  const double q2 = sx * inv3 - cx * inv2;

  const double dp1 = -sx * inv - cx * inv2;
  const double dp2 = cx * inv2 - 3.0 * sx * inv3 - 3.0 * cx * inv4;
  const double dq1 = cx * inv - sx * inv2;
  const double dq2 = sx * inv2 + 3.0 * cx * inv3 - 3.0 * sx * inv4;

  ScalarKernel k;
  k.g = -0.75 * kGamma * (z1 * p1 + z2 * p2);
  k.f = 0.75 * kGamma * (z1 * q1 + z2 * q2);

  // Chain rule through x = k0 |r| and c = rhat . axis.
  const double dg_dx = -0.75 * kGamma * (z1 * dp1 + z2 * dp2);
  const double dg_dc = -0.75 * kGamma * (-2.0 * c * p1 + 6.0 * c * p2);
  const double df_dx = 0.75 * kGamma * (z1 * dq1 + z2 * dq2);
  const double df_dc = 0.75 * kGamma * (-2.0 * c * q1 + 6.0 * c * q2);

  const Vec3 grad_x = kWavevector * rhat;
  const Vec3 grad_c = (axis - c * rhat) / dist;
  k.grad_g = dg_dx * grad_x + dg_dc * grad_c;
  k.grad_f = df_dx * grad_x + df_dc * grad_c;
  return k;
}

// Hessian of f by central differences of the analytic gradient. Only the
// (optional) momentum-diffusion matrix needs second derivatives, so this
// stays out of the hot path.
inline Eigen::Matrix3d hessian_f(const Vec3& r, const Vec3& axis, double step = 1e-5) {
  Eigen::Matrix3d h;
  for (int j = 0; j < 3; ++j) {
    Vec3 dr = Vec3::Zero();
    dr[j] = step;
    const Vec3 hi = scalar_kernel(r + dr, axis).grad_f;
    const Vec3 lo = scalar_kernel(r - dr, axis).grad_f;
    h.col(j) = (hi - lo) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

}  // namespace coldscat
