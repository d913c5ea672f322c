#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "coldscat/common.hpp"
#include "coldscat/rng.hpp"

namespace coldscat {

// Gaussian cloud n(r) = n0 exp(-x^2/2Rx^2 - y^2/2Ry^2 - z^2/2Rz^2).
struct CloudSpec {
  int n_atoms = 1;
  Vec3 radii = Vec3(10.0, 10.0, 10.0);   // units of 1/k0
  double min_separation = 0.05;          // regularization floor, units 1/k0
  std::uint64_t seed = 1;

  void validate() const {
    if (n_atoms < 1) throw ConfigError("cloud.n_atoms must be >= 1");
    if (!(radii.x() > 0 && radii.y() > 0 && radii.z() > 0))
      throw ConfigError("cloud radii must be > 0");
    if (min_separation < 0) throw ConfigError("cloud.min_separation must be >= 0");
  }

  static CloudSpec spherical(int n, double radius, std::uint64_t seed = 1,
                             double min_sep = 0.05) {
    CloudSpec s;
    s.n_atoms = n;
    s.radii = Vec3(radius, radius, radius);
    s.min_separation = min_sep;
    s.seed = seed;
    return s;
  }
};

struct AtomicCloud {
  std::vector<Vec3> positions;
  std::vector<double> detunings;  // per-atom static detunings, units of Gamma
  CloudSpec spec;

  int size() const { return static_cast<int>(positions.size()); }
};

enum class Axis { x = 0, y = 1, z = 2 };

enum class RescaleMode { constant_od, constant_density };

// Column-density-averaged optical depth along `axis` (zero detuning value
// 3N / (2 k0^2 Ra Rb) over the two transverse radii, Lorentzian-reduced
// off resonance).
inline double optical_depth(const CloudSpec& spec, Axis axis, double detuning = 0.0) {
  spec.validate();
  const int a = (static_cast<int>(axis) + 1) % 3;
  const int b = (static_cast<int>(axis) + 2) % 3;
  const double on_resonance =
      3.0 * spec.n_atoms / (2.0 * kWavevector * kWavevector * spec.radii[a] * spec.radii[b]);
  return on_resonance / (1.0 + 4.0 * detuning * detuning / (kGamma * kGamma));
}

// Peak (on-axis, line-through-center) optical depth used by the random walk
// model; twice the column-averaged value for a spherical cloud.
inline double optical_depth_peak(const CloudSpec& spec, Axis axis, double detuning = 0.0) {
  return 2.0 * optical_depth(spec, axis, detuning);
}

// Dimensionless peak density n0 k0^-3 = N / (2 pi sqrt(2 pi) Rx Ry Rz).
inline double peak_density(const CloudSpec& spec) {
  spec.validate();
  const double vol = spec.radii.x() * spec.radii.y() * spec.radii.z();
  return spec.n_atoms / (2.0 * kPi * std::sqrt(2.0 * kPi) * vol);
}

// Rescales the cloud to target_N atoms keeping either the optical depth
// (times eta) or the peak density fixed; aspect ratio is preserved.
inline CloudSpec rescale_cloud(const CloudSpec& spec, int target_n, RescaleMode mode,
                               double eta = 1.0) {
  spec.validate();
  if (target_n < 1) throw ConfigError("rescale target_N must be >= 1");
  if (!(eta > 0)) throw ConfigError("rescale eta must be > 0");
  CloudSpec out = spec;
  out.n_atoms = target_n;
  const double ratio = static_cast<double>(target_n) / spec.n_atoms;
  double scale = 1.0;
  switch (mode) {
    case RescaleMode::constant_od:
      // OD ~ N / R^2, target OD = eta * OD  =>  R' = R sqrt(N'/(eta N)).
      scale = std::sqrt(ratio / eta);
      break;
    case RescaleMode::constant_density:
      // n0 ~ N / R^3.
      scale = std::cbrt(ratio);
      break;
  }
  out.radii *= scale;
  return out;
}

// Draws N positions from the anisotropic Gaussian, redrawing any atom that
// lands closer than min_separation to an already placed one. The retry
// budget bounds pathological specs (floor comparable to the cloud size).
inline AtomicCloud sample_cloud(const CloudSpec& spec, CounterRng& rng,
                                int max_retries_per_atom = 1000) {
  spec.validate();
  AtomicCloud cloud;
  cloud.spec = spec;
  cloud.positions.reserve(spec.n_atoms);
  const double floor2 = spec.min_separation * spec.min_separation;
  for (int i = 0; i < spec.n_atoms; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < max_retries_per_atom; ++attempt) {
      const Vec3 candidate = rng.normal3().cwiseProduct(spec.radii);
      bool ok = true;
      for (const Vec3& other : cloud.positions) {
        if ((candidate - other).squaredNorm() < floor2) {
          ok = false;
          break;
        }
      }
      if (ok) {
        cloud.positions.push_back(candidate);
        placed = true;
        break;
      }
    }
    if (!placed)
      throw SamplingError(
          "sample_cloud: could not satisfy min_separation after retry budget "
          "(density too high for the chosen floor)");
  }
  cloud.detunings.assign(spec.n_atoms, 0.0);
  return cloud;
}

inline AtomicCloud sample_cloud(const CloudSpec& spec) {
  CounterRng rng(spec.seed);
  return sample_cloud(spec, rng);
}

// --- plain-text atom table -------------------------------------------------
// One atom per line: x y z detuning (units 1/k0 and Gamma), with a header
// recording the generating spec and seed.

inline void save_cloud(const AtomicCloud& cloud, std::ostream& os) {
  os.precision(17);
  os << "# coldscat cloud n_atoms=" << cloud.spec.n_atoms
     << " radii=" << cloud.spec.radii.x() << ' ' << cloud.spec.radii.y() << ' '
     << cloud.spec.radii.z() << " min_separation=" << cloud.spec.min_separation
     << " seed=" << cloud.spec.seed << "\n";
  os << "# columns: x y z detuning\n";
  for (int i = 0; i < cloud.size(); ++i) {
    const Vec3& r = cloud.positions[static_cast<std::size_t>(i)];
    os << r.x() << ' ' << r.y() << ' ' << r.z() << ' '
       << cloud.detunings[static_cast<std::size_t>(i)] << "\n";
  }
}

inline AtomicCloud load_cloud(std::istream& is) {
  AtomicCloud cloud;
  std::string line;
  bool have_header = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (!have_header && line.find("coldscat cloud") != std::string::npos) {
        std::istringstream hs(line);
        std::string token;
        while (hs >> token) {
          auto eq = token.find('=');
          if (eq == std::string::npos) continue;
          const std::string key = token.substr(0, eq);
          const std::string value = token.substr(eq + 1);
          if (key == "n_atoms") cloud.spec.n_atoms = std::stoi(value);
          else if (key == "radii") {
            cloud.spec.radii.x() = std::stod(value);
            hs >> cloud.spec.radii.y() >> cloud.spec.radii.z();
          } else if (key == "min_separation") cloud.spec.min_separation = std::stod(value);
          else if (key == "seed") cloud.spec.seed = std::stoull(value);
        }
        have_header = true;
      }
      continue;
    }
    std::istringstream ls(line);
    Vec3 r;
    double detuning = 0.0;
    if (!(ls >> r.x() >> r.y() >> r.z() >> detuning))
      throw ConfigError("load_cloud: malformed atom line: " + line);
    cloud.positions.push_back(r);
    cloud.detunings.push_back(detuning);
  }
  if (!have_header) throw ConfigError("load_cloud: missing cloud header line");
  if (cloud.size() != cloud.spec.n_atoms)
    throw ConfigError("load_cloud: header n_atoms does not match row count");
  return cloud;
}

}  // namespace coldscat
