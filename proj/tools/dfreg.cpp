// dfreg: command-line front end for synthetic scenes, projection, rigid
// prealignment, multiscale registration and energy sweeps.
//
// Exit codes: 0 success, 1 usage, 2 format error, 3 numerical failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "dfreg/dfreg.hpp"

namespace fs = std::filesystem;
using namespace dfreg;

namespace {

enum Exit { ok = 0, usage = 1, format = 2, numerical = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("malformed JSON in " + p.string() + ": " + e.what(), e.byte);
  }
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + p.string() + " for writing");
  out << text;
}

PipelineConfig load_config(const std::string& path) {
  PipelineConfig cfg;
  if (path.empty()) return cfg;
  const auto j = read_json(path);
  try {
    apply_json(j, cfg);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid config " + path + ": " + e.what());
  }
  return cfg;
}

// Optional kernel overrides shared by several subcommands.
struct KernelOptions {
  std::optional<double> cone_slope;
  std::optional<double> focal;
  bool delta = false;

  void add(CLI::App* cmd, bool required = false) {
    cmd->add_option("--kernel-c", cone_slope, "cone slope c (disc radius = c * distance to focus)");
    auto* f = cmd->add_option("--focal", focal, "focal height z2 (absolute, inside the volume)");
    if (required) f->required();
    cmd->add_flag("--delta", delta, "use the delta kernel (no defocus blur)");
  }
  void apply(KernelSpec& k) const {
    if (cone_slope) k.cone_slope = *cone_slope;
    if (focal) k.focal_height = *focal;
    if (delta) k.kind = KernelSpec::Kind::delta;
  }
};

std::pair<double, double> value_range(const ScalarField2D& f) {
  const auto [lo, hi] = std::minmax_element(f.values().begin(), f.values().end());
  double a = *lo, b = *hi;
  if (!(b > a)) b = a + 1.0;
  return {a, b};
}

std::vector<double> parse_range(const std::string& spec) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() != 3) throw UsageError("--range expects start:stop:count, got " + spec);
  double a, b;
  long n;
  try {
    std::size_t used = 0;
    a = std::stod(parts[0], &used);
    if (used != parts[0].size()) throw std::invalid_argument(parts[0]);
    b = std::stod(parts[1], &used);
    if (used != parts[1].size()) throw std::invalid_argument(parts[1]);
    n = std::stol(parts[2], &used);
    if (used != parts[2].size()) throw std::invalid_argument(parts[2]);
  } catch (const std::logic_error&) {
    throw UsageError("--range expects start:stop:count, got " + spec);
  }
  if (n < 1) throw UsageError("--range needs at least one sample");
  std::vector<double> out(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) out[i] = n == 1 ? a : a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
  return out;
}

int axis_index(const std::string& a) {
  if (a == "x") return 0;
  if (a == "y") return 1;
  if (a == "z") return 2;
  throw UsageError("--axis must be x, y or z");
}

// --- subcommands ----------------------------------------------------------

struct SynthArgs {
  std::string scene;
  std::string out_dir;
  std::vector<std::string> params;
  bool small = false;
};

int run_synth(const SynthArgs& a) {
  SceneSpec spec = SceneSpec::defaults(scene_kind_from_string(a.scene), a.small);
  for (const auto& kv : a.params) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--param expects key=value, got " + kv);
    double v;
    try {
      v = std::stod(kv.substr(eq + 1));
    } catch (const std::logic_error&) {
      throw UsageError("--param value is not a number: " + kv);
    }
    spec.set(kv.substr(0, eq), v);
  }
  const Scene s = synth_scene(spec);
  const fs::path d(a.out_dir);
  write_field(d / "volume.raw", s.volume);
  write_field(d / "image.raw", s.image);
  write_field(d / "ground_truth.raw", s.ground_truth);
  const auto [lo, hi] = value_range(s.image);
  export_pgm(s.image, d / "image.pgm", lo, hi);
  nlohmann::json meta{{"scene", to_string(spec.kind)},
                      {"dims", spec.nodes},
                      {"box", spec.box},
                      {"kernel", to_json(spec.kernel)},
                      {"shift", spec.shift},
                      {"translation", spec.translation},
                      {"amplitude", spec.amplitude}};
  write_text(d / "scene.json", meta.dump(2) + "\n");
  spdlog::info("wrote {} scene to {}", to_string(spec.kind), d.string());
  return ok;
}

struct ProjectArgs {
  std::string volume, out;
  KernelOptions kernel;
};

int run_project(const ProjectArgs& a) {
  const auto u = read_volume(a.volume);
  if (!a.kernel.delta && !a.kernel.cone_slope) throw UsageError("project needs --kernel-c or --delta");
  KernelSpec k;
  a.kernel.apply(k);
  write_field(a.out, project(u, k.build(u.grid())));
  return ok;
}

struct PrealignArgs {
  std::string volume, image, out, config;
  KernelOptions kernel;
};

int run_prealign(const PrealignArgs& a) {
  auto cfg = load_config(a.config);
  a.kernel.apply(cfg.kernel);
  const auto u = read_volume(a.volume);
  const auto f = read_image(a.image);
  const auto r = rigid_prealign(u, f, cfg.kernel, cfg.energy, cfg.rigid);
  auto j = to_json(r.params);
  j["levels"] = r.levels;
  j["level_data_term"] = r.level_energy;
  j["clamped"] = r.clamped;
  write_text(a.out, j.dump(2) + "\n");
  return ok;
}

struct RegisterArgs {
  std::string volume, image, mask, config, out_dir;
  KernelOptions kernel;
};

int run_register(const RegisterArgs& a) {
  auto cfg = load_config(a.config);
  a.kernel.apply(cfg.kernel);
  const auto u = read_volume(a.volume);
  const auto f = read_image(a.image);
  std::optional<ScalarField2D> mask;
  if (!a.mask.empty()) mask = read_image(a.mask);

  const auto rep = register_images(u, f, cfg, mask);
  const fs::path d(a.out_dir);
  fs::create_directories(d);
  write_field(d / "deformation.raw", rep.deformation);
  const auto k = cfg.kernel.build(u.grid());
  const auto warped = project(compose_nodes(rep.volume, rep.deformation), k);
  write_field(d / "warped_projection.raw", warped);
  const auto [lo, hi] = value_range(f);
  auto j = to_json(rep);
  j["config"] = to_json(cfg);
  // fingerprint of the 8-bit preview, windowed like the reference
  j["warped_preview_fnv1a"] = fnv1a(encode_pgm(warped, lo, hi));
  write_text(d / "report.json", j.dump(2) + "\n");

  export_pgm(f, d / "reference.pgm", lo, hi);
  export_pgm(project(u, k), d / "initial_projection.pgm", lo, hi);
  export_pgm(warped, d / "warped_projection.pgm", lo, hi);
  spdlog::info("data term {:.6e} -> {:.6e}, min det {:.4f}", rep.initial_data_term, rep.final_data_term,
               rep.diagnostics.min_det);
  if (rep.failed) {
    spdlog::error("registration failed: {}", rep.failure);
    return numerical;
  }
  return ok;
}

struct SweepArgs {
  std::string volume, image, axis = "z", range, out, config;
  double blur = 0.0;
  int level = -1;
  KernelOptions kernel;
};

int run_sweep(const SweepArgs& a) {
  auto cfg = load_config(a.config);
  a.kernel.apply(cfg.kernel);
  const int axis = axis_index(a.axis);
  const auto ts = parse_range(a.range);
  const auto u = read_volume(a.volume);
  const auto f = read_image(a.image);
  SweepOptions opt;
  opt.blur = a.blur * u.grid().spacing(0);
  opt.level = a.level;
  const auto curve = energy_sweep_1d(u, f, cfg.kernel, cfg.energy, translation_family(axis), ts, opt);
  std::ostringstream csv;
  csv.precision(17);
  csv << "parameter,J\n";
  for (const auto& [t, J] : curve) csv << t << ',' << J << '\n';
  if (a.out.empty() || a.out == "-")
    std::cout << csv.str();
  else
    write_text(a.out, csv.str());
  const auto best = std::min_element(curve.begin(), curve.end(), [](auto& p, auto& q) { return p.second < q.second; });
  spdlog::info("minimum J = {:.6e} at {} = {:.6g}; {} interior local minima", best->second, a.axis, best->first,
               count_local_minima(curve));
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("dfreg");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");

  CLI::App app{"Deformable 3D-to-2D registration through a defocus forward model"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "write a synthetic scene (volume, image, ground truth)");
  synth->add_option("--scene", sa.scene, "cuboid_pair_inplane, two_cube_zshift or three_cuboid_translation")->required();
  synth->add_option("--out-dir", sa.out_dir, "output directory")->required();
  synth->add_option("--param", sa.params, "override a scene parameter, key=value (t, shift, c, focal, tx, ty, amplitude)");
  synth->add_flag("--small", sa.small, "reduced resolution for quick runs");

  ProjectArgs pa;
  auto* proj = app.add_subcommand("project", "apply the forward operator to a volume");
  proj->add_option("--volume", pa.volume, "input volume (.raw with .json sidecar)")->required();
  proj->add_option("--out", pa.out, "output image (.raw)")->required();
  pa.kernel.add(proj, true);

  PrealignArgs ra;
  auto* pre = app.add_subcommand("prealign", "fit translation, scaling and rotation");
  pre->add_option("--volume", ra.volume)->required();
  pre->add_option("--image", ra.image)->required();
  pre->add_option("--out", ra.out, "parameters (.json)")->required();
  pre->add_option("--config", ra.config, "JSON configuration");
  ra.kernel.add(pre);

  RegisterArgs ga;
  auto* reg = app.add_subcommand("register", "multiscale deformable registration");
  reg->add_option("--volume", ga.volume)->required();
  reg->add_option("--image", ga.image)->required();
  reg->add_option("--mask", ga.mask, "weight image in (0,1]");
  reg->add_option("--config", ga.config, "JSON configuration");
  reg->add_option("--out-dir", ga.out_dir)->required();
  ga.kernel.add(reg);

  SweepArgs wa;
  auto* sweep = app.add_subcommand("sweep", "data term along a translation");
  sweep->add_option("--volume", wa.volume)->required();
  sweep->add_option("--image", wa.image)->required();
  sweep->add_option("--axis", wa.axis, "x, y or z")->capture_default_str();
  sweep->add_option("--range", wa.range, "start:stop:count")->required();
  sweep->add_option("--out", wa.out, "CSV file, - for standard output");
  sweep->add_option("--config", wa.config, "JSON configuration");
  sweep->add_option("--blur", wa.blur, "Gaussian scale in finest spacings")->check(CLI::NonNegativeNumber);
  sweep->add_option("--level", wa.level, "grid level, -1 for the finest");
  wa.kernel.add(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*synth) return run_synth(sa);
    if (*proj) return run_project(pa);
    if (*pre) return run_prealign(ra);
    if (*reg) return run_register(ga);
    if (*sweep) return run_sweep(wa);
  } catch (const FormatError& e) {
    spdlog::error("{}", e.what());
    return format;
  } catch (const NumericalFailure& e) {
    spdlog::error("{}", e.what());
    return numerical;
  } catch (const LineSearchFailure& e) {
    spdlog::error("{}", e.what());
    return numerical;
  } catch (const SingularConfiguration& e) {
    spdlog::error("{}", e.what());
    return numerical;
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return usage;
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return usage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return format;
  }
  return usage;
}
