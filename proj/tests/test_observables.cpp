#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "coldscat/observables.hpp"

using namespace coldscat;

namespace {

DriveSpec default_drive(double rabi = 0.01, double detuning = 0.0) {
  DriveSpec d;
  d.rabi = rabi;
  d.detuning = detuning;
  return d;
}

// Brute-force evaluation of the far-field double sum, kept deliberately
// naive as the oracle for the optimized projected-field form.
double brute_force_intensity(const Eigen::MatrixX3cd& b, const std::vector<Vec3>& r,
                             const Vec3& rhat) {
  Complex total(0, 0);
  const int n = static_cast<int>(r.size());
  for (int j = 0; j < n; ++j)
    for (int m = 0; m < n; ++m) {
      const Vec3 rjm = r[j] - r[m];
      const Complex phase = std::exp(Complex(0, -rhat.dot(rjm)));
      for (int a = 0; a < 3; ++a)
        for (int ap = 0; ap < 3; ++ap) {
          const double projector = (a == ap ? 1.0 : 0.0) - rhat[a] * rhat[ap];
          total += phase * projector * b(j, ap) * std::conj(b(m, a));
        }
    }
  return total.real();
}

// Gauss-Legendre nodes on [-1, 1] by Newton iteration.
void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  nodes.resize(n);
  weights.resize(n);
  for (int i = 0; i < n; ++i) {
    double x = std::cos(kPi * (i + 0.75) / (n + 0.5));
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      const double dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) {
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        break;
      }
    }
    nodes[i] = x;
  }
}

// Integral of the raw (unnormalized) intensity over the full sphere.
double total_power(const Eigen::MatrixX3cd& b, const std::vector<Vec3>& r) {
  std::vector<double> nodes, weights;
  gauss_legendre(24, nodes, weights);
  const int n_phi = 48;
  double total = 0.0;
  for (int i = 0; i < 24; ++i) {
    const double ct = nodes[i], st = std::sqrt(1 - ct * ct);
    for (int k = 0; k < n_phi; ++k) {
      const double phi = 2 * kPi * k / n_phi;
      const Vec3 rhat(st * std::cos(phi), st * std::sin(phi), ct);
      total += weights[i] * (2 * kPi / n_phi) * brute_force_intensity(b, r, rhat);
    }
  }
  return total;
}

}  // namespace

TEST_CASE("single dipole radiates nothing along its own axis") {
  AtomicCloud cloud;
  cloud.spec = CloudSpec::spherical(1, 1.0);
  cloud.positions = {Vec3::Zero()};
  cloud.detunings = {0.0};
  const DriveSpec drive = default_drive(0.05);
  const SteadyState state = solve_steady_state(build_system(cloud, drive));
  // Polarization is z: theta = pi/2, phi = 0 looks straight down the dipole.
  CHECK(far_field_intensity(state, cloud, {kPi / 2, 0.0, 0.0}, drive) < 1e-24);
  // On resonance the transverse direction normalizes to exactly one.
  CHECK_THAT(far_field_intensity(state, cloud, {kPi / 2, kPi / 2, 0.0}, drive),
             Catch::Matchers::WithinRel(1.0, 1e-12));
}

TEST_CASE("projected-field intensity equals the brute-force double sum") {
  CounterRng rng(77);
  AtomicCloud cloud;
  cloud.spec = CloudSpec::spherical(2, 1.0);
  cloud.positions = {Vec3(0.3, 0.1, -0.6), Vec3(-1.1, 0.8, 0.4)};
  cloud.detunings = {0.0, 0.0};
  const DriveSpec drive = default_drive(1.0);
  for (int trial = 0; trial < 25; ++trial) {
    SteadyState state;
    state.coherences.resize(2, 3);
    for (int j = 0; j < 2; ++j)
      for (int a = 0; a < 3; ++a) state.coherences(j, a) = Complex(rng.normal(), rng.normal());
    const DetectionDirection dir{rng.uniform(0, kPi), rng.uniform(0, 2 * kPi), 0.0};
    const Vec3 rhat = detection_unit(dir, drive);
    const double expected = brute_force_intensity(state.coherences, cloud.positions, rhat);
    const double fast = far_field_intensity(state, cloud, dir, drive);
    CHECK_THAT(fast, Catch::Matchers::WithinRel(expected, 1e-12));
    CHECK(fast >= 0.0);
  }
}

TEST_CASE("zeroth-order interference structure") {
  const int n = 60;
  const double radius = 18.0;
  const DriveSpec drive = default_drive(0.02);

  SECTION("forward intensity is exactly N^2 on resonance") {
    const AtomicCloud cloud = sample_cloud(CloudSpec::spherical(n, radius, 5));
    SteadyState state;
    state.coherences = perturbative_order(cloud, drive, 0);
    const double forward = far_field_intensity(state, cloud, {0.0, 0.0, 0.0}, drive);
    CHECK_THAT(forward, Catch::Matchers::WithinRel(double(n) * n, 1e-10));
  }

  SECTION("off-forward ensemble mean approaches the incoherent floor N") {
    double mean = 0.0;
    const int k_ens = 80;
    for (int e = 0; e < k_ens; ++e) {
      const AtomicCloud cloud =
          sample_cloud(CloudSpec::spherical(n, radius, 100 + static_cast<std::uint64_t>(e)));
      SteadyState state;
      state.coherences = perturbative_order(cloud, drive, 0);
      mean += far_field_intensity(state, cloud, {kPi / 2, kPi / 2, 0.0}, drive);
    }
    mean /= k_ens;
    CHECK_THAT(mean, Catch::Matchers::WithinRel(double(n), 0.25));
  }

  SECTION("forward cone confined to ~ 1/(k0 R)") {
    // Ensemble mean: a single realization at a point direction carries
    // full-contrast speckle.
    double forward = 0.0, off_cone = 0.0;
    const int k_ens = 40;
    for (int e = 0; e < k_ens; ++e) {
      const AtomicCloud cloud =
          sample_cloud(CloudSpec::spherical(n, radius, 500 + static_cast<std::uint64_t>(e)));
      SteadyState state;
      state.coherences = perturbative_order(cloud, drive, 0);
      const auto scan = angular_scan(state, cloud, drive, {0.0, 5.0 / radius}, kPi / 2);
      forward += scan[0].second / k_ens;
      off_cone += scan[1].second / k_ens;
    }
    // Five cone widths out the enhancement has collapsed to the incoherent
    // floor (within a factor of two of N).
    CHECK(off_cone < 2.0 * n);
    CHECK(forward > 0.5 * n * n);
  }
}

TEST_CASE("line summary on synthetic profiles") {
  SECTION("exact Lorentzian is recovered to the grid limit") {
    std::vector<double> grid, vals;
    for (double d = -5.0; d <= 5.0 + 1e-9; d += 0.05) {
      grid.push_back(d);
      vals.push_back(1.0 / (1.0 + 4.0 * d * d));
    }
    const LineSummary line = summarize_line(grid, vals);
    CHECK(line.fwhm_resolved);
    CHECK_THAT(line.fwhm, Catch::Matchers::WithinRel(1.0, 0.005));
    CHECK_THAT(line.center, Catch::Matchers::WithinAbs(0.0, 1e-6));
    CHECK(line.lorentzian_r2 > 0.99999);
    CHECK_FALSE(line.is_double_peaked);
  }

  SECTION("shifted Lorentzian center via the quadratic fit") {
    std::vector<double> grid, vals;
    for (double d = -4.0; d <= 4.0 + 1e-9; d += 0.05) {
      grid.push_back(d);
      vals.push_back(2.5 / (1.0 + 4.0 * (d - 0.613) * (d - 0.613) / 1.44));
    }
    const LineSummary line = summarize_line(grid, vals);
    CHECK_THAT(line.center, Catch::Matchers::WithinAbs(0.613, 2e-3));
    CHECK_THAT(line.lorentzian_center, Catch::Matchers::WithinAbs(0.613, 1e-4));
    CHECK_THAT(line.fwhm, Catch::Matchers::WithinRel(1.2, 0.01));
  }

  SECTION("squared Lorentzian has the subradiant width") {
    std::vector<double> grid, vals;
    for (double d = -3.0; d <= 3.0 + 1e-9; d += 0.01) {
      grid.push_back(d);
      const double l = 1.0 / (d * d + 0.25);
      vals.push_back(l * l);
    }
    const LineSummary line = summarize_line(grid, vals);
    CHECK_THAT(line.fwhm, Catch::Matchers::WithinRel(0.6435942529055826, 0.002));
    CHECK(line.lorentzian_r2 < 0.999);
  }

  SECTION("double peak detection and outermost crossings") {
    std::vector<double> grid, vals;
    for (double d = -6.0; d <= 6.0 + 1e-9; d += 0.05) {
      grid.push_back(d);
      vals.push_back(1.0 / (1.0 + 4.0 * (d - 2) * (d - 2)) +
                     1.0 / (1.0 + 4.0 * (d + 2) * (d + 2)));
    }
    const LineSummary line = summarize_line(grid, vals);
    CHECK(line.is_double_peaked);
    CHECK(line.fwhm > 4.0);
  }

  SECTION("unresolved when the grid misses the crossings") {
    std::vector<double> grid, vals;
    for (double d = -0.2; d <= 0.2 + 1e-9; d += 0.02) {
      grid.push_back(d);
      vals.push_back(1.0 / (1.0 + 4.0 * d * d));
    }
    const LineSummary line = summarize_line(grid, vals);
    CHECK_FALSE(line.fwhm_resolved);
    CHECK(line.note.find("unresolved") != std::string::npos);
  }
}

TEST_CASE("first-order line reproduces the mean-coupling Lorentzian") {
  // Strictly first-order intensity |b0|^2 + 2 Re(b0* b1), evaluated as
  // I(b0+b1) - I(b1); the mean pair coupling of the same realization sets
  // the line center and width.
  const int n = 300;
  const double od = 0.12;
  const double radius = std::sqrt(3.0 * n / (2.0 * od));
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const AtomicCloud cloud = sample_cloud(CloudSpec::spherical(n, radius, seed, 0.8));
    const DriveSpec drive = default_drive(0.01);
    const Complex gbar = mean_pair_coupling(cloud, drive);
    const DetectionDirection dir{kPi / 2, kPi / 2, 0.0};
    std::vector<double> grid, vals;
    for (double d = -1.4; d <= 1.4 + 1e-9; d += 0.004) grid.push_back(d);
    for (double d : grid) {
      DriveSpec dd = drive;
      dd.detuning = d;
      SteadyState first, sum01;
      first.coherences = perturbative_order(cloud, dd, 1);
      sum01.coherences = perturbative_order(cloud, dd, 0) + first.coherences;
      vals.push_back(far_field_incoherent(sum01, cloud, dir, dd) -
                     far_field_incoherent(first, cloud, dir, dd));
    }
    const LineSummary line = summarize_line(grid, vals);
    const double oracle_center = kGamma * gbar.real();
    const double oracle_width = kGamma - 2.0 * kGamma * gbar.imag();
    REQUIRE(line.fwhm_resolved);
    CHECK_THAT(line.center, Catch::Matchers::WithinAbs(oracle_center, 0.01 * kGamma));
    CHECK_THAT(line.fwhm, Catch::Matchers::WithinRel(oracle_width, 0.01));
  }
}

TEST_CASE("total radiated power scales with the summed coherences") {
  // Zeroth-order dilute cloud: the sphere integral of the raw double sum is
  // (8 pi / 3) sum_j |b_j|^2 up to small pair interference corrections.
  const AtomicCloud cloud = sample_cloud(CloudSpec::spherical(25, 30.0, 9));
  const DriveSpec drive = default_drive(0.02);
  const Eigen::MatrixX3cd b = perturbative_order(cloud, drive, 0);
  const double power = total_power(b, cloud.positions);
  CHECK_THAT(power, Catch::Matchers::WithinRel(8.0 * kPi / 3.0 * b.squaredNorm(), 0.05));

  AtomicCloud single;
  single.spec = CloudSpec::spherical(1, 1.0);
  single.positions = {Vec3::Zero()};
  single.detunings = {0.0};
  const Eigen::MatrixX3cd b1 = perturbative_order(single, drive, 0);
  CHECK_THAT(total_power(b1, single.positions),
             Catch::Matchers::WithinRel(8.0 * kPi / 3.0 * b1.squaredNorm(), 1e-6));
}

TEST_CASE("vector model with a large Zeeman splitting reduces to two levels") {
  const AtomicCloud cloud = sample_cloud(CloudSpec::spherical(25, 4.0, 14));
  DriveSpec drive = default_drive(0.01, 0.3);
  const TwoLevelState two_level = solve_two_level(build_two_level_system(cloud, drive));
  drive.zeeman_splittings = Vec3(5e5, 5e5, 0.0);
  const SteadyState vector_state = solve_steady_state(build_system(cloud, drive));
  double max_err = 0.0;
  for (int j = 0; j < cloud.size(); ++j)
    max_err =
        std::max(max_err, std::abs(vector_state.coherences(j, 2) - two_level.coherences(j)));
  CHECK(max_err < 1e-5 * two_level.coherences.norm() / std::sqrt(double(cloud.size())));
}

TEST_CASE("sweep machinery") {
  // Single atom swept over detuning through the generic evaluator: Lorentzian
  // of width Gamma, deterministic across repeats and pool sizes.
  const DriveSpec drive = default_drive(0.05);
  std::vector<double> grid;
  for (double d = -5.0; d <= 5.0 + 1e-9; d += 0.05) grid.push_back(d);
  const std::vector<DetectionDirection> dirs = {{kPi / 2, kPi / 2, 0.0}};
  auto evaluate = [&](double delta, int point, int member) -> std::vector<double> {
    (void)point;
    AtomicCloud cloud;
    cloud.spec = CloudSpec::spherical(1, 1.0, 1);
    CounterRng rng(cloud.spec.seed, static_cast<std::uint64_t>(member));
    cloud.positions = {rng.normal3()};
    cloud.detunings = {0.0};
    DriveSpec dd = drive;
    dd.detuning = delta;
    const SteadyState state = solve_steady_state(build_system(cloud, dd));
    return {far_field_intensity(state, cloud, dirs[0], dd)};
  };

  SpectrumMetadata meta;
  meta.model = "cd";
  meta.cloud = CloudSpec::spherical(1, 1.0, 1);
  const ThreadPool pool(2);
  const Spectrum spectrum = sweep_spectrum(evaluate, grid, dirs, 4, 99, &pool, meta);
  spectrum.validate();
  const LineSummary line = summarize_line(spectrum);
  CHECK_THAT(line.fwhm, Catch::Matchers::WithinRel(1.0, 0.005));

  const Spectrum repeat = sweep_spectrum(evaluate, grid, dirs, 4, 99, nullptr, meta);
  CHECK(repeat.intensities[0] == spectrum.intensities[0]);

  SECTION("csv serialization") {
    std::ostringstream os;
    write_spectrum_csv(spectrum, 0, os);
    const std::string text = os.str();
    CHECK(text.find("detuning,intensity,stderr\n") != std::string::npos);
    CHECK(text.find("units") != std::string::npos);
    std::size_t rows = 0;
    for (char c : text)
      if (c == '\n') ++rows;
    CHECK(rows == grid.size() + 3);
    CHECK(spectrum_filename(spectrum, 0).find("cd_N1") == 0);
  }
}
