#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "coldscat/geometry.hpp"

using namespace coldscat;

TEST_CASE("optical depth matches the Gaussian-cloud formula") {
  // Spherical cloud sized so the on-resonance OD is exactly 2.
  const double radius = std::sqrt(3.0 * 500 / 4.0);
  const CloudSpec spec = CloudSpec::spherical(500, radius);
  CHECK_THAT(optical_depth(spec, Axis::x), Catch::Matchers::WithinRel(2.0, 1e-12));

  SECTION("detuning by Gamma/2 halves the on-resonance value") {
    CHECK_THAT(optical_depth(spec, Axis::x, 0.5),
               Catch::Matchers::WithinRel(optical_depth(spec, Axis::x) / 2.0, 1e-12));
  }
  SECTION("doubling N doubles the OD") {
    CloudSpec doubled = spec;
    doubled.n_atoms = 1000;
    CHECK_THAT(optical_depth(doubled, Axis::y),
               Catch::Matchers::WithinRel(2.0 * optical_depth(spec, Axis::y), 1e-12));
  }
  SECTION("transverse radii are the ones that enter") {
    CloudSpec aniso = spec;
    aniso.radii = Vec3(5.0, 10.0, 20.0);
    CHECK_THAT(optical_depth(aniso, Axis::x),
               Catch::Matchers::WithinRel(3.0 * 500 / (2.0 * 10.0 * 20.0), 1e-12));
  }
  SECTION("peak OD is twice the column-averaged one") {
    CHECK_THAT(optical_depth_peak(spec, Axis::x),
               Catch::Matchers::WithinRel(2.0 * optical_depth(spec, Axis::x), 1e-12));
  }
}

TEST_CASE("peak density") {
  const CloudSpec spec = CloudSpec::spherical(1000, 10.0);
  CHECK_THAT(peak_density(spec), Catch::Matchers::WithinRel(0.06349363593424098, 1e-10));

  CloudSpec doubled_radii = spec;
  doubled_radii.radii *= 2.0;
  CHECK_THAT(peak_density(doubled_radii), Catch::Matchers::WithinRel(peak_density(spec) / 8.0, 1e-12));

  CloudSpec doubled_n = spec;
  doubled_n.n_atoms = 2000;
  CHECK_THAT(peak_density(doubled_n), Catch::Matchers::WithinRel(2.0 * peak_density(spec), 1e-12));
}

TEST_CASE("rescale_cloud") {
  const CloudSpec spec = CloudSpec::spherical(250, 12.0);

  SECTION("constant OD with 4x atoms doubles the radii") {
    const CloudSpec out = rescale_cloud(spec, 1000, RescaleMode::constant_od);
    CHECK_THAT(out.radii.x(), Catch::Matchers::WithinRel(24.0, 1e-12));
    CHECK_THAT(optical_depth(out, Axis::z),
               Catch::Matchers::WithinRel(optical_depth(spec, Axis::z), 1e-12));
  }
  SECTION("constant density with 8x atoms doubles the radii") {
    const CloudSpec out = rescale_cloud(spec, 2000, RescaleMode::constant_density);
    CHECK_THAT(out.radii.y(), Catch::Matchers::WithinRel(24.0, 1e-12));
    CHECK_THAT(peak_density(out), Catch::Matchers::WithinRel(peak_density(spec), 1e-12));
  }
  SECTION("eta=0.5 at fixed N scales radii by sqrt(2), halving the OD") {
    const CloudSpec out = rescale_cloud(spec, 250, RescaleMode::constant_od, 0.5);
    CHECK_THAT(out.radii.x(), Catch::Matchers::WithinRel(12.0 * std::sqrt(2.0), 1e-12));
    CHECK_THAT(optical_depth(out, Axis::x),
               Catch::Matchers::WithinRel(0.5 * optical_depth(spec, Axis::x), 1e-12));
  }
  SECTION("OD invariance under repeated constant-od rescales") {
    CloudSpec current = spec;
    for (int n : {100, 700, 1300}) current = rescale_cloud(current, n, RescaleMode::constant_od);
    CHECK_THAT(optical_depth(current, Axis::y),
               Catch::Matchers::WithinRel(optical_depth(spec, Axis::y), 1e-12));
  }
}

TEST_CASE("cloud sampling") {
  SECTION("single atom needs no pair constraint") {
    const AtomicCloud cloud = sample_cloud(CloudSpec::spherical(1, 3.0, 42));
    REQUIRE(cloud.size() == 1);
    CHECK(cloud.detunings[0] == 0.0);
  }

  SECTION("per-axis sample variance matches the generating widths") {
    CloudSpec spec;
    spec.n_atoms = 10000;
    spec.radii = Vec3(20.0, 20.0, 20.0);
    spec.min_separation = 0.01;
    spec.seed = 7;
    const AtomicCloud cloud = sample_cloud(spec);
    for (int axis = 0; axis < 3; ++axis) {
      double mean = 0.0;
      for (const Vec3& r : cloud.positions) mean += r[axis];
      mean /= spec.n_atoms;
      double var = 0.0;
      for (const Vec3& r : cloud.positions) var += (r[axis] - mean) * (r[axis] - mean);
      var /= (spec.n_atoms - 1);
      CHECK_THAT(var, Catch::Matchers::WithinRel(400.0, 0.05));
      CHECK(std::abs(mean) < 5.0 * 20.0 / std::sqrt(double(spec.n_atoms)));
    }
  }

  SECTION("pairwise separations respect the floor") {
    CloudSpec spec = CloudSpec::spherical(200, 2.0, 3);
    spec.min_separation = 0.5;
    const AtomicCloud cloud = sample_cloud(spec);
    double min_dist = 1e30;
    for (int i = 0; i < cloud.size(); ++i)
      for (int j = i + 1; j < cloud.size(); ++j)
        min_dist = std::min(min_dist, (cloud.positions[i] - cloud.positions[j]).norm());
    CHECK(min_dist >= 0.5);
  }

  SECTION("infeasible floor errors out after the retry budget") {
    CloudSpec spec = CloudSpec::spherical(2, 1.0, 5);
    spec.min_separation = 50.0;
    CHECK_THROWS_AS(sample_cloud(spec), SamplingError);
  }
}

TEST_CASE("cloud text round trip") {
  CloudSpec spec = CloudSpec::spherical(25, 4.0, 11);
  AtomicCloud cloud = sample_cloud(spec);
  cloud.detunings[3] = -1.25;
  std::stringstream ss;
  save_cloud(cloud, ss);
  const AtomicCloud loaded = load_cloud(ss);
  REQUIRE(loaded.size() == cloud.size());
  CHECK(loaded.spec.n_atoms == spec.n_atoms);
  CHECK(loaded.spec.seed == spec.seed);
  CHECK_THAT(loaded.spec.radii.z(), Catch::Matchers::WithinRel(4.0, 1e-15));
  for (int i = 0; i < cloud.size(); ++i) {
    CHECK((loaded.positions[i] - cloud.positions[i]).norm() < 1e-14);
    CHECK(loaded.detunings[i] == Catch::Approx(cloud.detunings[i]).margin(1e-15));
  }
}

TEST_CASE("counter rng streams are independent of draw interleaving") {
  CounterRng a(123, 4, 5);
  CounterRng b(123, 4, 5);
  std::vector<double> direct;
  for (int i = 0; i < 8; ++i) direct.push_back(a.uniform());
  for (int i = 0; i < 8; ++i) CHECK(b.uniform() == direct[static_cast<std::size_t>(i)]);
  CounterRng c(123, 4, 6);
  bool all_equal = true;
  for (int i = 0; i < 8; ++i) all_equal = all_equal && (c.uniform() == direct[static_cast<std::size_t>(i)]);
  CHECK_FALSE(all_equal);
}
