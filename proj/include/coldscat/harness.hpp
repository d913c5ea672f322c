#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldscat/coherent_dipole.hpp"
#include "coldscat/common.hpp"
#include "coldscat/geometry.hpp"
#include "coldscat/observables.hpp"
#include "coldscat/random_walk.hpp"
#include "coldscat/semiclassical.hpp"
#include "coldscat/thread_pool.hpp"

namespace coldscat {

// nlohmann/json ships a "json.hpp" at the vendor root; keep the alias local.
using json = nlohmann::json;

enum class Model { cd, rw, frozen_doppler, semiclassical };
enum class SweepAxis { detuning, n_atoms, od };

struct ExperimentConfig {
  Model model = Model::cd;
  CloudSpec cloud;
  DriveSpec drive;
  sc::MotionSpec motion;       // semiclassical only
  double motion_t_eval = 5.0;  // evaluation time, units 1/Gamma

  SweepAxis sweep_axis = SweepAxis::detuning;
  std::vector<double> sweep_values;
  RescaleMode n_sweep_rescale = RescaleMode::constant_od;

  std::vector<DetectionDirection> directions;
  int ensemble = 1;
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  double eta = 1.0;  // OD correction factor applied to od sweeps

  // cd / frozen_doppler options
  bool two_level = false;
  DriveForm drive_form = DriveForm::travelling;
  std::string solver = "auto";  // auto | direct | iterative
  double solver_tolerance = 1e-8;
  std::string observable = "intensity";  // intensity | incoherent
  double fd_doppler_width = 0.0;         // frozen_doppler only

  // rw options
  rw::RwConfig rw_config;
  double rw_beam_sigma_factor = 5.0;  // beam width / transverse cloud width

  std::string raw_text;  // config file echo for the manifest
};

// --- flat key=value config --------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out[key] = value;
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("field '" + key + "': not a number: '" + value + "'");
  }
}

inline long to_long(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long v = std::stol(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("field '" + key + "': not an integer: '" + value + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError("field '" + key + "': not a boolean: '" + value + "'");
}

// Directions are "theta:phi[:halfwidth]" in degrees, comma separated.
inline std::vector<DetectionDirection> parse_directions(const std::string& value) {
  std::vector<DetectionDirection> dirs;
  std::istringstream is(value);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    DetectionDirection d;
    double theta = 90, phi = 0, half = 0;
    const int fields = std::sscanf(item.c_str(), "%lf:%lf:%lf", &theta, &phi, &half);
    if (fields < 2) throw ConfigError("field 'directions': bad entry '" + item + "'");
    d.theta = theta * kPi / 180.0;
    d.phi = phi * kPi / 180.0;
    d.bin_halfwidth = half * kPi / 180.0;
    dirs.push_back(d);
  }
  if (dirs.empty()) throw ConfigError("field 'directions': no valid entries");
  return dirs;
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  auto kv = detail::parse_key_values(text);
  ExperimentConfig cfg;
  cfg.raw_text = text;
  auto take = [&kv](const std::string& key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    std::string v = it->second;
    kv.erase(it);
    return v;
  };

  if (auto v = take("model")) {
    if (*v == "cd") cfg.model = Model::cd;
    else if (*v == "rw") cfg.model = Model::rw;
    else if (*v == "frozen_doppler") cfg.model = Model::frozen_doppler;
    else if (*v == "semiclassical") cfg.model = Model::semiclassical;
    else throw ConfigError("field 'model': unknown model '" + *v + "'");
  }

  if (auto v = take("cloud.n_atoms")) cfg.cloud.n_atoms = static_cast<int>(detail::to_long("cloud.n_atoms", *v));
  if (auto v = take("cloud.radius")) {
    const double r = detail::to_double("cloud.radius", *v);
    cfg.cloud.radii = Vec3(r, r, r);
  }
  if (auto v = take("cloud.rx")) cfg.cloud.radii.x() = detail::to_double("cloud.rx", *v);
  if (auto v = take("cloud.ry")) cfg.cloud.radii.y() = detail::to_double("cloud.ry", *v);
  if (auto v = take("cloud.rz")) cfg.cloud.radii.z() = detail::to_double("cloud.rz", *v);
  if (auto v = take("cloud.min_separation"))
    cfg.cloud.min_separation = detail::to_double("cloud.min_separation", *v);

  if (auto v = take("drive.rabi")) cfg.drive.rabi = detail::to_double("drive.rabi", *v);
  if (auto v = take("drive.detuning")) cfg.drive.detuning = detail::to_double("drive.detuning", *v);
  if (auto v = take("drive.zeeman_x")) cfg.drive.zeeman_splittings.x() = detail::to_double("drive.zeeman_x", *v);
  if (auto v = take("drive.zeeman_y")) cfg.drive.zeeman_splittings.y() = detail::to_double("drive.zeeman_y", *v);
  if (auto v = take("drive.zeeman_z")) cfg.drive.zeeman_splittings.z() = detail::to_double("drive.zeeman_z", *v);

  if (auto v = take("sweep.axis")) {
    if (*v == "detuning") cfg.sweep_axis = SweepAxis::detuning;
    else if (*v == "n_atoms") cfg.sweep_axis = SweepAxis::n_atoms;
    else if (*v == "od") cfg.sweep_axis = SweepAxis::od;
    else throw ConfigError("field 'sweep.axis': unknown axis '" + *v + "'");
  }
  {
    std::optional<double> lo, hi;
    std::optional<long> steps;
    if (auto v = take("sweep.min")) lo = detail::to_double("sweep.min", *v);
    if (auto v = take("sweep.max")) hi = detail::to_double("sweep.max", *v);
    if (auto v = take("sweep.steps")) steps = detail::to_long("sweep.steps", *v);
    if (auto v = take("sweep.values")) {
      std::istringstream is(*v);
      double x;
      while (is >> x) cfg.sweep_values.push_back(x);
    } else if (lo && hi && steps) {
      if (*steps < 1) throw ConfigError("field 'sweep.steps': must be >= 1");
      for (long i = 0; i < *steps; ++i)
        cfg.sweep_values.push_back(*steps == 1 ? *lo
                                               : *lo + (*hi - *lo) * i / double(*steps - 1));
    }
  }
  if (auto v = take("sweep.rescale")) {
    if (*v == "constant_od") cfg.n_sweep_rescale = RescaleMode::constant_od;
    else if (*v == "constant_density") cfg.n_sweep_rescale = RescaleMode::constant_density;
    else throw ConfigError("field 'sweep.rescale': unknown mode '" + *v + "'");
  }

  if (auto v = take("directions")) cfg.directions = detail::parse_directions(*v);
  if (auto v = take("ensemble")) cfg.ensemble = static_cast<int>(detail::to_long("ensemble", *v));
  if (auto v = take("seed")) cfg.seed = static_cast<std::uint64_t>(detail::to_long("seed", *v));
  if (auto v = take("output_dir")) cfg.output_dir = *v;
  if (auto v = take("eta")) cfg.eta = detail::to_double("eta", *v);

  if (auto v = take("cd.two_level")) cfg.two_level = detail::to_bool("cd.two_level", *v);
  if (auto v = take("cd.drive_form")) {
    if (*v == "travelling") cfg.drive_form = DriveForm::travelling;
    else if (*v == "standing") cfg.drive_form = DriveForm::standing;
    else throw ConfigError("field 'cd.drive_form': unknown form '" + *v + "'");
  }
  if (auto v = take("cd.solver")) {
    if (*v != "auto" && *v != "direct" && *v != "iterative")
      throw ConfigError("field 'cd.solver': unknown solver '" + *v + "'");
    cfg.solver = *v;
  }
  if (auto v = take("cd.tolerance")) cfg.solver_tolerance = detail::to_double("cd.tolerance", *v);
  if (auto v = take("cd.observable")) {
    if (*v != "intensity" && *v != "incoherent")
      throw ConfigError("field 'cd.observable': unknown observable '" + *v + "'");
    cfg.observable = *v;
  }
  if (auto v = take("fd.doppler_width"))
    cfg.fd_doppler_width = detail::to_double("fd.doppler_width", *v);

  if (auto v = take("rw.photons")) cfg.rw_config.photons = detail::to_long("rw.photons", *v);
  if (auto v = take("rw.max_scatters"))
    cfg.rw_config.max_scatters = static_cast<int>(detail::to_long("rw.max_scatters", *v));
  if (auto v = take("rw.beam_sigma_factor"))
    cfg.rw_beam_sigma_factor = detail::to_double("rw.beam_sigma_factor", *v);

  if (auto v = take("motion.recoil")) cfg.motion.recoil = detail::to_double("motion.recoil", *v);
  if (auto v = take("motion.doppler_width"))
    cfg.motion.doppler_width = detail::to_double("motion.doppler_width", *v);
  if (auto v = take("motion.dims")) cfg.motion.dims = static_cast<int>(detail::to_long("motion.dims", *v));
  if (auto v = take("motion.noise")) cfg.motion.noise = detail::to_bool("motion.noise", *v);
  if (auto v = take("motion.dt")) cfg.motion.dt = detail::to_double("motion.dt", *v);
  if (auto v = take("motion.forces")) cfg.motion.forces = detail::to_bool("motion.forces", *v);
  if (auto v = take("motion.t_eval")) cfg.motion_t_eval = detail::to_double("motion.t_eval", *v);

  if (!kv.empty()) throw ConfigError("unknown config field '" + kv.begin()->first + "'");
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::stringstream buffer;
  buffer << is.rdbuf();
  return parse_config(buffer.str());
}

inline void validate_config(const ExperimentConfig& cfg) {
  cfg.cloud.validate();
  cfg.drive.validate();
  if (cfg.model == Model::semiclassical) cfg.motion.validate();
  if (cfg.sweep_values.empty())
    throw ConfigError("field 'sweep.values': sweep grid is empty (set sweep.values or sweep.min/max/steps)");
  for (std::size_t i = 1; i < cfg.sweep_values.size(); ++i)
    if (!(cfg.sweep_values[i] > cfg.sweep_values[i - 1]))
      throw ConfigError("field 'sweep.values': grid must be strictly increasing");
  if (cfg.directions.empty() && cfg.model != Model::semiclassical)
    throw ConfigError("field 'directions': at least one detection direction required");
  for (const auto& d : cfg.directions) d.validate();
  if (cfg.ensemble < 1) throw ConfigError("field 'ensemble': must be >= 1");
  if (!(cfg.eta > 0)) throw ConfigError("field 'eta': must be > 0");
  if (cfg.model == Model::rw) {
    if (cfg.rw_config.photons < 1) throw ConfigError("field 'rw.photons': must be >= 1");
    for (const auto& d : cfg.directions)
      if (!(d.bin_halfwidth > 0))
        throw ConfigError("field 'directions': rw detectors need a bin halfwidth > 0");
  }
  if (cfg.sweep_axis == SweepAxis::n_atoms || cfg.sweep_axis == SweepAxis::od) {
    for (double v : cfg.sweep_values)
      if (!(v > 0)) throw ConfigError("field 'sweep.values': values must be > 0 for this axis");
  }
  if (cfg.model == Model::frozen_doppler && cfg.fd_doppler_width < 0)
    throw ConfigError("field 'fd.doppler_width': must be >= 0");
}

// --- content hash -----------------------------------------------------------

inline std::string content_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[24];
  std::snprintf(buf, sizeof buf, "fnv1a64:%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// --- per-model evaluators -----------------------------------------------

namespace detail {

// Cloud spec for one sweep point: detuning sweeps reuse the base cloud,
// n_atoms sweeps rescale, od sweeps rescale the radii at fixed N with the
// eta correction folded in.
inline CloudSpec point_cloud_spec(const ExperimentConfig& cfg, double value) {
  switch (cfg.sweep_axis) {
    case SweepAxis::detuning:
      return cfg.cloud;
    case SweepAxis::n_atoms: {
      const int n = static_cast<int>(std::lround(value));
      return rescale_cloud(cfg.cloud, n, cfg.n_sweep_rescale,
                           cfg.n_sweep_rescale == RescaleMode::constant_od ? cfg.eta : 1.0);
    }
    case SweepAxis::od: {
      CloudSpec spec = cfg.cloud;
      const double od_now = optical_depth(spec, Axis::x);
      spec.radii *= std::sqrt(od_now / (cfg.eta * value));
      return spec;
    }
  }
  throw ConfigError("unreachable sweep axis");
}

inline double point_detuning(const ExperimentConfig& cfg, double value) {
  return cfg.sweep_axis == SweepAxis::detuning ? value : cfg.drive.detuning;
}

// One coherent-dipole (or frozen-Doppler) realization: returns the
// per-direction intensities. Shared verbatim between run and replay so a
// member can be reproduced bit for bit.
inline std::vector<double> evaluate_cd_member(const ExperimentConfig& cfg, double value,
                                              int member) {
  const CloudSpec spec = point_cloud_spec(cfg, value);
  CounterRng cloud_rng(cfg.seed, static_cast<std::uint64_t>(member));
  AtomicCloud cloud = sample_cloud(spec, cloud_rng);
  if (cfg.model == Model::frozen_doppler) {
    CounterRng doppler_rng(cfg.seed, static_cast<std::uint64_t>(member), 1);
    cloud = assign_doppler_detunings(cloud, cfg.fd_doppler_width, doppler_rng);
  }
  DriveSpec drive = cfg.drive;
  drive.detuning = point_detuning(cfg, value);

  const bool direct = cfg.solver == "direct" ||
                      (cfg.solver == "auto" && cloud.size() * (cfg.two_level ? 1 : 3) <= 2400);
  std::vector<double> out;
  out.reserve(cfg.directions.size());
  if (cfg.two_level) {
    TwoLevelState state;
    if (direct) {
      state = solve_two_level(build_two_level_system(cloud, drive, cfg.drive_form),
                              SolveMethod::direct, cfg.solver_tolerance);
    } else {
      const TwoLevelPairCache cache(cloud, drive.polarization);
      state = solve_two_level(cache, cloud, drive, cfg.drive_form, cfg.solver_tolerance);
    }
    for (const auto& dir : cfg.directions)
      out.push_back(cfg.observable == "incoherent"
                        ? far_field_incoherent(state, cloud, dir, drive)
                        : far_field_intensity(state, cloud, dir, drive));
  } else {
    SteadyState state;
    if (direct) {
      state = solve_steady_state(build_system(cloud, drive), SolveMethod::direct,
                                 cfg.solver_tolerance);
    } else {
      const VectorPairCache cache(cloud);
      state = solve_steady_state(cache, cloud, drive, cfg.solver_tolerance);
    }
    for (const auto& dir : cfg.directions)
      out.push_back(cfg.observable == "incoherent"
                        ? far_field_incoherent(state, cloud, dir, drive)
                        : far_field_intensity(state, cloud, dir, drive));
  }
  return out;
}

inline std::vector<double> evaluate_sc_member(const ExperimentConfig& cfg, double value,
                                              int member) {
  const CloudSpec spec = point_cloud_spec(cfg, value);
  CounterRng cloud_rng(cfg.seed, static_cast<std::uint64_t>(member));
  const AtomicCloud cloud = sample_cloud(spec, cloud_rng);
  DriveSpec drive = cfg.drive;
  drive.detuning = point_detuning(cfg, value);
  CounterRng momentum_rng(cfg.seed, static_cast<std::uint64_t>(member), 1);
  sc::SemiClassicalState state = sc::make_ground_state(cloud, drive, cfg.motion, momentum_rng);
  CounterRng noise_rng(cfg.seed, static_cast<std::uint64_t>(member), 2);
  const sc::IntegrationResult result = sc::integrate(
      state, drive, cfg.motion, cfg.motion_t_eval, cfg.motion.noise ? &noise_rng : nullptr);
  return {result.state.excitation()};
}

// One random-walk sweep point. The RNG stream is keyed by the point index so
// a replayed point reproduces the run bit for bit.
inline rw::RwSweepResult evaluate_rw_point(const ExperimentConfig& cfg, double value,
                                           std::uint64_t point_stream, const ThreadPool* pool) {
  CloudSpec spec = cfg.cloud;
  double detuning = cfg.drive.detuning;
  switch (cfg.sweep_axis) {
    case SweepAxis::detuning:
      detuning = value;
      break;
    case SweepAxis::n_atoms:
      spec = rescale_cloud(spec, static_cast<int>(std::lround(value)), cfg.n_sweep_rescale,
                           cfg.n_sweep_rescale == RescaleMode::constant_od ? cfg.eta : 1.0);
      break;
    case SweepAxis::od: {
      // sweep value = on-axis peak optical depth at zero detuning
      const double odp_now = optical_depth_peak(spec, Axis::x);
      spec.radii *= std::sqrt(odp_now / (cfg.eta * value));
      break;
    }
  }
  rw::RwConfig rw_cfg = cfg.rw_config;
  rw_cfg.beam_sigma =
      cfg.rw_beam_sigma_factor * std::sqrt(spec.radii.y() * spec.radii.z());
  return rw::sweep_rw_spectrum(spec, cfg.drive, {detuning}, cfg.directions, rw_cfg, cfg.seed,
                               pool, point_stream);
}

}  // namespace detail

// --- run / replay -----------------------------------------------------------

struct RunResult {
  Spectrum spectrum;
  std::vector<rw::RwPointStats> rw_stats;  // rw model only
  // member_values[point][member][direction]; empty for rw.
  std::vector<std::vector<std::vector<double>>> member_values;
  std::vector<std::string> csv_files;
  std::string manifest_file;
  double wall_seconds = 0.0;
};

inline RunResult run_experiment(const ExperimentConfig& cfg, int workers = 1) {
  validate_config(cfg);
  const auto t_start = std::chrono::steady_clock::now();
  const ThreadPool pool(workers);
  RunResult result;

  SpectrumMetadata meta;
  meta.cloud = cfg.cloud;
  meta.od = optical_depth(cfg.cloud, Axis::x);
  meta.density = peak_density(cfg.cloud);
  switch (cfg.sweep_axis) {
    case SweepAxis::detuning: meta.sweep_axis = "detuning"; break;
    case SweepAxis::n_atoms: meta.sweep_axis = "n_atoms"; break;
    case SweepAxis::od: meta.sweep_axis = "od"; break;
  }

  if (cfg.model == Model::rw) {
    result.spectrum.detunings = cfg.sweep_values;
    result.spectrum.directions = cfg.directions;
    result.spectrum.meta = meta;
    result.spectrum.meta.model = "rw";
    result.spectrum.meta.ensemble = static_cast<int>(cfg.rw_config.photons);
    result.spectrum.meta.seed = cfg.seed;
    result.spectrum.meta.normalization = "scattered photons per launched photon per steradian";
    result.spectrum.intensities.assign(cfg.directions.size(),
                                       std::vector<double>(cfg.sweep_values.size(), 0.0));
    result.spectrum.stderrs = result.spectrum.intensities;
    result.rw_stats.resize(cfg.sweep_values.size());
    for (std::size_t i = 0; i < cfg.sweep_values.size(); ++i) {
      const rw::RwSweepResult point = detail::evaluate_rw_point(
          cfg, cfg.sweep_values[i], static_cast<std::uint64_t>(i), &pool);
      for (std::size_t b = 0; b < cfg.directions.size(); ++b) {
        result.spectrum.intensities[b][i] = point.spectrum.intensities[b][0];
        result.spectrum.stderrs[b][i] = point.spectrum.stderrs[b][0];
      }
      result.rw_stats[i] = point.stats[0];
    }
  } else {
    const bool semiclassical = cfg.model == Model::semiclassical;
    meta.model = semiclassical ? "semiclassical"
                               : (cfg.model == Model::cd ? "cd" : "frozen_doppler");
    if (semiclassical) meta.normalization = "total excited population";
    std::vector<DetectionDirection> dirs = cfg.directions;
    if (semiclassical && dirs.empty()) dirs.push_back({kPi / 2, kPi / 2, 0.0});

    // Evaluate every (point, member) once; keep the per-member values for
    // the manifest so any one of them can be replayed.
    const std::size_t n_points = cfg.sweep_values.size();
    const std::size_t ensemble = static_cast<std::size_t>(cfg.ensemble);
    result.member_values.assign(n_points, std::vector<std::vector<double>>(ensemble));
    std::vector<std::string> task_errors(n_points * ensemble);
    pool.parallel_for(n_points * ensemble, [&](std::size_t t) {
      const std::size_t p = t / ensemble;
      const int e = static_cast<int>(t % ensemble);
      try {
        result.member_values[p][static_cast<std::size_t>(e)] =
            semiclassical
                ? detail::evaluate_sc_member(cfg, cfg.sweep_values[p], e)
                : detail::evaluate_cd_member(cfg, cfg.sweep_values[p], e);
      } catch (const std::exception& err) {
        task_errors[t] = err.what();
      }
    });
    for (std::size_t t = 0; t < task_errors.size(); ++t)
      if (!task_errors[t].empty())
        throw SolverError("sweep point " + std::to_string(t / ensemble) + " member " +
                              std::to_string(t % ensemble) + " (seed " +
                              std::to_string(cfg.seed) + "): " + task_errors[t],
                          {});

    result.spectrum.detunings = cfg.sweep_values;
    result.spectrum.directions = dirs;
    result.spectrum.meta = meta;
    result.spectrum.meta.ensemble = cfg.ensemble;
    result.spectrum.meta.seed = cfg.seed;
    result.spectrum.intensities.assign(dirs.size(), std::vector<double>(n_points, 0.0));
    result.spectrum.stderrs.assign(dirs.size(), std::vector<double>(n_points, 0.0));
    for (std::size_t p = 0; p < n_points; ++p) {
      for (std::size_t d = 0; d < dirs.size(); ++d) {
        double mean = 0.0;
        for (std::size_t e = 0; e < ensemble; ++e) mean += result.member_values[p][e][d];
        mean /= static_cast<double>(ensemble);
        double var = 0.0;
        for (std::size_t e = 0; e < ensemble; ++e) {
          const double dv = result.member_values[p][e][d] - mean;
          var += dv * dv;
        }
        result.spectrum.intensities[d][p] = mean;
        result.spectrum.stderrs[d][p] =
            ensemble > 1 ? std::sqrt(var / (ensemble - 1.0) / ensemble) : 0.0;
      }
    }
  }

  // Outputs: one CSV per direction plus the JSON manifest.
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  for (std::size_t d = 0; d < result.spectrum.directions.size(); ++d) {
    const std::string name = spectrum_filename(result.spectrum, d);
    std::ofstream os(fs::path(cfg.output_dir) / name, std::ios::binary);
    if (!os) throw ConfigError("cannot write output file in '" + cfg.output_dir + "'");
    write_spectrum_csv(result.spectrum, d, os);
    result.csv_files.push_back(name);
  }
  if (cfg.model == Model::rw) {
    std::ofstream os(fs::path(cfg.output_dir) / "rw_stats.csv", std::ios::binary);
    os << "# rw per-point statistics (sweep axis " << result.spectrum.meta.sweep_axis << ")\n";
    os << result.spectrum.meta.sweep_axis
       << ",transmission,mean_scatters,truncated\n";
    for (std::size_t i = 0; i < result.rw_stats.size(); ++i)
      os << format_double(cfg.sweep_values[i]) << ','
         << format_double(result.rw_stats[i].ballistic_fraction) << ','
         << format_double(result.rw_stats[i].mean_scatters) << ','
         << result.rw_stats[i].truncated << "\n";
    result.csv_files.push_back("rw_stats.csv");
    std::ofstream hs(fs::path(cfg.output_dir) / "rw_scatter_histogram.csv", std::ios::binary);
    hs << result.spectrum.meta.sweep_axis << ",n_scatters,count\n";
    for (std::size_t i = 0; i < result.rw_stats.size(); ++i)
      for (std::size_t n = 0; n < result.rw_stats[i].histogram.size(); ++n)
        if (result.rw_stats[i].histogram[n] > 0)
          hs << format_double(cfg.sweep_values[i]) << ',' << n << ','
             << result.rw_stats[i].histogram[n] << "\n";
    result.csv_files.push_back("rw_scatter_histogram.csv");
  }

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  json manifest;
  manifest["config_text"] = cfg.raw_text;
  manifest["config_hash"] = content_hash(cfg.raw_text);
  manifest["model"] = result.spectrum.meta.model;
  manifest["sweep_axis"] = result.spectrum.meta.sweep_axis;
  manifest["grid"] = cfg.sweep_values;
  manifest["ensemble"] = cfg.ensemble;
  manifest["seed"] = cfg.seed;
  manifest["eta"] = cfg.eta;
  manifest["wall_seconds"] = result.wall_seconds;
  manifest["normalization"] = result.spectrum.meta.normalization;
  json dirs = json::array();
  for (const auto& d : result.spectrum.directions)
    dirs.push_back({{"theta", d.theta}, {"phi", d.phi}, {"bin_halfwidth", d.bin_halfwidth}});
  manifest["directions"] = dirs;
  manifest["intensities"] = result.spectrum.intensities;
  manifest["stderrs"] = result.spectrum.stderrs;
  manifest["csv_files"] = result.csv_files;
  if (!result.member_values.empty()) manifest["member_values"] = result.member_values;
  if (cfg.model == Model::rw) {
    json stats = json::array();
    for (const auto& s : result.rw_stats)
      stats.push_back({{"transmission", s.ballistic_fraction},
                       {"mean_scatters", s.mean_scatters},
                       {"truncated", s.truncated}});
    manifest["rw_stats"] = stats;
  }
  const fs::path manifest_path = fs::path(cfg.output_dir) / "manifest.json";
  std::ofstream ms(manifest_path, std::ios::binary);
  ms << manifest.dump(2) << "\n";
  result.manifest_file = manifest_path.string();
  return result;
}

struct ReplayResult {
  std::size_t point = 0;
  int member = 0;
  std::vector<double> stored;
  std::vector<double> recomputed;
  bool match = false;
  bool hash_mismatch = false;
};

// Reproduces one ensemble member of one sweep point from the manifest,
// bit-identically (same counter-based seed stream). The flat index is
// point * ensemble + member.
inline ReplayResult replay(const std::string& manifest_path, std::size_t flat_index) {
  std::ifstream is(manifest_path);
  if (!is) throw ConfigError("cannot open manifest: " + manifest_path);
  json manifest;
  is >> manifest;
  const ExperimentConfig cfg = parse_config(manifest.at("config_text").get<std::string>());
  validate_config(cfg);

  ReplayResult out;
  out.hash_mismatch =
      manifest.at("config_hash").get<std::string>() != content_hash(cfg.raw_text);

  if (cfg.model == Model::rw) {
    // One replay unit is a whole sweep point (photons are the ensemble).
    const std::size_t point = flat_index;
    const auto grid = manifest.at("grid").get<std::vector<double>>();
    if (point >= grid.size()) throw ConfigError("replay index out of range");
    const rw::RwSweepResult rerun =
        detail::evaluate_rw_point(cfg, grid[point], point, nullptr);
    out.point = point;
    out.member = 0;
    for (std::size_t d = 0; d < rerun.spectrum.intensities.size(); ++d) {
      out.recomputed.push_back(rerun.spectrum.intensities[d][0]);
      out.stored.push_back(manifest.at("intensities")[d][point].get<double>());
    }
  } else {
    const std::size_t ensemble = static_cast<std::size_t>(cfg.ensemble);
    const std::size_t point = flat_index / ensemble;
    const int member = static_cast<int>(flat_index % ensemble);
    const auto grid = manifest.at("grid").get<std::vector<double>>();
    if (point >= grid.size()) throw ConfigError("replay index out of range");
    out.point = point;
    out.member = member;
    out.stored =
        manifest.at("member_values")[point][static_cast<std::size_t>(member)].get<std::vector<double>>();
    out.recomputed = cfg.model == Model::semiclassical
                         ? detail::evaluate_sc_member(cfg, grid[point], member)
                         : detail::evaluate_cd_member(cfg, grid[point], member);
  }
  out.match = out.stored.size() == out.recomputed.size();
  for (std::size_t i = 0; out.match && i < out.stored.size(); ++i)
    out.match = out.stored[i] == out.recomputed[i];
  return out;
}

}  // namespace coldscat
