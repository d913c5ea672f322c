#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "coldscat/harness.hpp"

using namespace coldscat;
namespace fs = std::filesystem;

namespace {

std::string small_cd_config(const std::string& out_dir) {
  return "model = cd\n"
         "cloud.n_atoms = 1          # single atom\n"
         "cloud.radius = 0.5\n"
         "drive.rabi = 0.05\n"
         "sweep.axis = detuning\n"
         "sweep.min = -5\n"
         "sweep.max = 5\n"
         "sweep.steps = 41\n"
         "directions = 90:90:0\n"
         "ensemble = 2\n"
         "seed = 7\n"
         "output_dir = " + out_dir + "\n";
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config parsing") {
  SECTION("full round trip of fields") {
    const ExperimentConfig cfg = parse_config(
        "model = frozen_doppler\n"
        "cloud.n_atoms = 120\n"
        "cloud.rx = 4\ncloud.ry = 4\ncloud.rz = 2\n"
        "cloud.min_separation = 0.1\n"
        "drive.rabi = 0.02\n"
        "drive.detuning = 0.5\n"
        "sweep.axis = detuning\n"
        "sweep.values = -1 0 1\n"
        "directions = 0:0:5, 90:0:5\n"
        "ensemble = 3\n"
        "seed = 99\n"
        "eta = 0.9\n"
        "fd.doppler_width = 6\n");
    CHECK(cfg.model == Model::frozen_doppler);
    CHECK(cfg.cloud.n_atoms == 120);
    CHECK(cfg.cloud.radii.z() == 2.0);
    CHECK(cfg.sweep_values == std::vector<double>{-1, 0, 1});
    REQUIRE(cfg.directions.size() == 2);
    CHECK_THAT(cfg.directions[1].theta, Catch::Matchers::WithinRel(kPi / 2, 1e-12));
    CHECK_THAT(cfg.directions[0].bin_halfwidth,
               Catch::Matchers::WithinRel(5.0 * kPi / 180.0, 1e-12));
    CHECK(cfg.eta == 0.9);
    CHECK(cfg.fd_doppler_width == 6.0);
    validate_config(cfg);
  }

  SECTION("errors name the offending field") {
    CHECK_THROWS_WITH(parse_config("model = warp\n"),
                      Catch::Matchers::ContainsSubstring("model"));
    CHECK_THROWS_WITH(parse_config("cloud.n_atoms = many\n"),
                      Catch::Matchers::ContainsSubstring("cloud.n_atoms"));
    CHECK_THROWS_WITH(parse_config("bogus.key = 1\n"),
                      Catch::Matchers::ContainsSubstring("bogus.key"));
    ExperimentConfig cfg = parse_config("model = cd\n");
    CHECK_THROWS_WITH(validate_config(cfg), Catch::Matchers::ContainsSubstring("sweep.values"));
    cfg = parse_config("model = cd\nsweep.values = 0\n");
    CHECK_THROWS_WITH(validate_config(cfg), Catch::Matchers::ContainsSubstring("directions"));
    cfg = parse_config(
        "model = rw\nsweep.values = 0\ndirections = 0:0:0\nrw.photons = 100\n");
    CHECK_THROWS_WITH(validate_config(cfg), Catch::Matchers::ContainsSubstring("halfwidth"));
  }
}

TEST_CASE("run produces deterministic outputs and a valid manifest") {
  TempDir dir_a("coldscat_test_run_a");
  TempDir dir_b("coldscat_test_run_b");
  ExperimentConfig cfg = parse_config(small_cd_config(dir_a.path.string()));
  const RunResult result = run_experiment(cfg, 2);

  SECTION("single-atom line has width Gamma") {
    const LineSummary line = summarize_line(result.spectrum);
    REQUIRE(line.fwhm_resolved);
    CHECK_THAT(line.fwhm, Catch::Matchers::WithinRel(1.0, 0.005));
  }

  SECTION("csv bodies are byte-identical across reruns and worker counts") {
    ExperimentConfig cfg_b = parse_config(small_cd_config(dir_b.path.string()));
    run_experiment(cfg_b, 1);
    REQUIRE(result.csv_files.size() == 1);
    const std::string a = read_file(dir_a.path / result.csv_files[0]);
    const std::string b = read_file(dir_b.path / result.csv_files[0]);
    CHECK(a == b);
    CHECK(a.find("detuning,intensity,stderr\n") != std::string::npos);
    CHECK(a.find('\r') == std::string::npos);  // LF only
  }

  SECTION("manifest carries config echo, hash, timings and stderr columns") {
    json manifest;
    std::ifstream is(dir_a.path / "manifest.json");
    is >> manifest;
    CHECK(manifest.at("config_hash").get<std::string>() ==
          content_hash(cfg.raw_text));
    CHECK(manifest.at("wall_seconds").get<double>() >= 0.0);
    CHECK(manifest.at("stderrs")[0].size() == cfg.sweep_values.size());
    CHECK(manifest.at("member_values").size() == cfg.sweep_values.size());
  }

  SECTION("replay reproduces stored member values bit for bit") {
    const ReplayResult r = replay((dir_a.path / "manifest.json").string(), 41);  // point 20, member 1
    CHECK(r.point == 20);
    CHECK(r.member == 1);
    CHECK(r.match);
    CHECK_FALSE(r.hash_mismatch);
  }

  SECTION("a different seed changes the values") {
    ExperimentConfig other = cfg;
    other.seed = 8;
    other.output_dir = dir_b.path.string();
    const RunResult alt = run_experiment(other, 1);
    CHECK(alt.spectrum.intensities[0] != result.spectrum.intensities[0]);
  }
}

TEST_CASE("rw sweep through the harness writes stats and replays") {
  TempDir dir("coldscat_test_rw");
  ExperimentConfig cfg = parse_config(
      "model = rw\n"
      "cloud.n_atoms = 400\n"
      "cloud.radius = 17.3\n"
      "drive.rabi = 0.01\n"
      "sweep.axis = od\n"
      "sweep.values = 0.5 2\n"
      "directions = 90:90:6\n"
      "rw.photons = 20000\n"
      "rw.beam_sigma_factor = 0\n"
      "seed = 13\n"
      "output_dir = " + dir.path.string() + "\n");
  const RunResult result = run_experiment(cfg, 2);
  REQUIRE(result.rw_stats.size() == 2);
  // On-axis launches: transmission = exp(-OD_p) at the swept peak depths.
  for (std::size_t i = 0; i < 2; ++i) {
    const double expected = std::exp(-cfg.sweep_values[i]);
    const double err = 3.5 * std::sqrt(expected * (1 - expected) / cfg.rw_config.photons);
    CHECK(std::abs(result.rw_stats[i].ballistic_fraction - expected) < err);
  }
  CHECK(fs::exists(dir.path / "rw_stats.csv"));
  CHECK(fs::exists(dir.path / "rw_scatter_histogram.csv"));

  const ReplayResult r = replay((dir.path / "manifest.json").string(), 1);
  CHECK(r.match);
}

TEST_CASE("n_atoms sweep applies the rescale mode") {
  TempDir dir("coldscat_test_nsweep");
  ExperimentConfig cfg = parse_config(
      "model = cd\n"
      "cloud.n_atoms = 20\n"
      "cloud.radius = 8\n"
      "cd.two_level = true\n"
      "drive.rabi = 0.01\n"
      "drive.detuning = 0\n"
      "sweep.axis = n_atoms\n"
      "sweep.values = 10 40\n"
      "sweep.rescale = constant_od\n"
      "directions = 90:90:0\n"
      "cd.observable = incoherent\n"
      "ensemble = 2\n"
      "seed = 3\n"
      "output_dir = " + dir.path.string() + "\n");
  const RunResult result = run_experiment(cfg, 2);
  // Constant OD with the incoherent observable: intensity scales ~ N.
  const double ratio = result.spectrum.intensities[0][1] / result.spectrum.intensities[0][0];
  CHECK(ratio > 2.0);
  CHECK(ratio < 8.0);
}

TEST_CASE("seed independence of ensemble means") {
  // Doubling the ensemble at a fresh seed moves the means by less than
  // three pooled standard errors (statistical regression guard).
  TempDir dir("coldscat_test_seeds");
  const std::string base =
      "model = cd\n"
      "cloud.n_atoms = 30\n"
      "cloud.radius = 10\n"
      "drive.rabi = 0.02\n"
      "sweep.axis = detuning\n"
      "sweep.values = -0.5 0 0.5\n"
      "directions = 90:90:0\n"
      "cd.observable = incoherent\n"
      "output_dir = " + dir.path.string() + "\n";
  ExperimentConfig a = parse_config(base + "ensemble = 24\nseed = 1\n");
  ExperimentConfig b = parse_config(base + "ensemble = 48\nseed = 1234\n");
  const RunResult ra = run_experiment(a, 2);
  const RunResult rb = run_experiment(b, 2);
  for (std::size_t p = 0; p < 3; ++p) {
    const double pooled = std::hypot(ra.spectrum.stderrs[0][p], rb.spectrum.stderrs[0][p]);
    CHECK(std::abs(ra.spectrum.intensities[0][p] - rb.spectrum.intensities[0][p]) <
          3.0 * pooled);
  }
}
