// Command-line front end: runs sweep experiments from flat key=value configs,
// validates configs, and replays single ensemble members from a manifest.
// Exit codes: 0 success, 2 config error, 3 engine error.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "coldscat/harness.hpp"

namespace {

constexpr int kExitConfigError = 2;
constexpr int kExitEngineError = 3;

int do_run(const std::string& config_path, std::optional<std::uint64_t> seed,
           std::optional<std::string> out_dir, int workers) {
  coldscat::ExperimentConfig cfg = coldscat::load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (out_dir) cfg.output_dir = *out_dir;
  coldscat::validate_config(cfg);
  const coldscat::RunResult result = coldscat::run_experiment(cfg, workers);
  std::printf("wrote %zu file(s) to %s in %.2f s\n", result.csv_files.size() + 1,
              cfg.output_dir.c_str(), result.wall_seconds);
  for (const auto& f : result.csv_files) std::printf("  %s\n", f.c_str());
  std::printf("  manifest.json\n");
  return 0;
}

int do_replay(const std::string& manifest_path, std::size_t index) {
  const coldscat::ReplayResult r = coldscat::replay(manifest_path, index);
  if (r.hash_mismatch)
    std::fprintf(stderr,
                 "warning: manifest config hash does not match its config text "
                 "(manifest edited?)\n");
  std::printf("point %zu member %d\n", r.point, r.member);
  for (std::size_t d = 0; d < r.stored.size(); ++d)
    std::printf("  direction %zu: stored %.17g recomputed %.17g\n", d, r.stored[d],
                r.recomputed[d]);
  std::printf("%s\n", r.match ? "MATCH" : "MISMATCH");
  return r.match ? 0 : kExitEngineError;
}

int do_validate(const std::string& config_path) {
  const coldscat::ExperimentConfig cfg = coldscat::load_config(config_path);
  coldscat::validate_config(cfg);
  std::printf("config ok: model=%s points=%zu ensemble=%d\n",
              cfg.model == coldscat::Model::cd              ? "cd"
              : cfg.model == coldscat::Model::rw            ? "rw"
              : cfg.model == coldscat::Model::frozen_doppler ? "frozen_doppler"
                                                             : "semiclassical",
              cfg.sweep_values.size(), cfg.ensemble);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"light scattering from cold atomic clouds: coupled-dipole, "
               "random-walk, frozen-Doppler and semiclassical engines"};
  app.require_subcommand(1);

  std::string config_path, manifest_path;
  std::size_t replay_index = 0;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  int workers = 2;

  CLI::App* run = app.add_subcommand("run", "run a sweep experiment from a config file");
  run->add_option("config", config_path, "config file (flat key = value)")->required();
  run->add_option("--seed", seed, "override the config seed");
  run->add_option("--out", out_dir, "override the output directory");
  run->add_option("--workers", workers, "worker threads");

  CLI::App* replay = app.add_subcommand("replay", "re-run one ensemble member from a manifest");
  replay->add_option("manifest", manifest_path, "manifest.json from a previous run")->required();
  replay->add_option("index", replay_index, "flat index: point * ensemble + member")->required();

  CLI::App* validate = app.add_subcommand("validate", "parse and validate a config file");
  validate->add_option("config", config_path, "config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfigError;
  }

  try {
    if (run->parsed()) return do_run(config_path, seed, out_dir, workers);
    if (replay->parsed()) return do_replay(manifest_path, replay_index);
    if (validate->parsed()) return do_validate(config_path);
  } catch (const coldscat::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "engine error: %s\n", e.what());
    return kExitEngineError;
  }
  return 0;
}
