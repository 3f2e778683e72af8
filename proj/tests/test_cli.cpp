#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "dfreg/io.hpp"
#include "dfreg/pipeline.hpp"

using namespace dfreg;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

// Runs the CLI with stdout captured and stderr discarded.
CliRun dfreg(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt";
  const std::string cmd = std::string("\"") + DFREG_CLI_PATH + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                          (dir / "stderr.txt").string() + "\"";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::vector<std::pair<double, double>> read_csv(std::istream& in) {
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "parameter,J");
  std::vector<std::pair<double, double>> rows;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    rows.emplace_back(std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
  }
  return rows;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / (std::string("dfreg_cli_") +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string p(const std::string& name) const { return "\"" + (dir_ / name).string() + "\""; }
  CliRun run(const std::string& args) const { return dfreg(args, dir_); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("synth --out-dir " + p("s")).code, 1);
  EXPECT_EQ(run("synth --scene four_cuboids --out-dir " + p("s")).code, 1);
  EXPECT_EQ(run("synth --scene two_cube_zshift --small --param t --out-dir " + p("s")).code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, FormatErrorsExitWithTwo) {
  EXPECT_EQ(run("project --volume " + p("missing.raw") + " --delta --focal 0.5 --out " + p("f.raw")).code, 2);
  ASSERT_EQ(run("synth --scene three_cuboid_translation --small --out-dir " + p("s")).code, 0);
  fs::resize_file(dir_ / "s" / "volume.raw", 100);
  EXPECT_EQ(run("project --volume " + p("s/volume.raw") + " --delta --focal 0.5 --out " + p("f.raw")).code, 2);
  std::ofstream(dir_ / "bad.json") << "{ not json";
  EXPECT_EQ(run("sweep --volume " + p("s/volume.raw") + " --image " + p("s/image.raw") + " --range 0:1:3 --config " +
                p("bad.json"))
                .code,
            2);
}

TEST_F(Cli, SynthWritesSceneFiles) {
  ASSERT_EQ(run("synth --scene two_cube_zshift --small --out-dir " + p("s")).code, 0);
  for (const char* f : {"volume.raw", "volume.json", "image.raw", "image.json", "ground_truth.raw",
                        "ground_truth.json", "image.pgm", "scene.json"})
    EXPECT_TRUE(fs::exists(dir_ / "s" / f)) << f;
  const auto u = read_volume(dir_ / "s" / "volume.raw");
  EXPECT_EQ(u.grid().nodes(2), 33);
  const auto y = read_deformation(dir_ / "s" / "ground_truth.raw");
  EXPECT_TRUE(y.grid() == u.grid());
  // parameter overrides reach the scene
  ASSERT_EQ(run("synth --scene two_cube_zshift --small --param shift=0.25 --out-dir " + p("t")).code, 0);
  std::ifstream meta(dir_ / "t" / "scene.json");
  EXPECT_DOUBLE_EQ(nlohmann::json::parse(meta).at("shift").get<double>(), 0.25);
}

TEST_F(Cli, DeltaProjectionIsTheFocalSlice) {
  ASSERT_EQ(run("synth --scene three_cuboid_translation --small --out-dir " + p("s")).code, 0);
  ASSERT_EQ(run("project --volume " + p("s/volume.raw") + " --delta --focal 0.875 --out " + p("f.raw")).code, 0);
  const auto u = read_volume(dir_ / "s" / "volume.raw");
  const auto f = read_image(dir_ / "f.raw");
  const auto& g = u.grid();
  const int k = 7;  // z = 0.875 on 9 nodes over [0,1]
  for (int j = 0; j < g.nodes(1); ++j)
    for (int i = 0; i < g.nodes(0); ++i) EXPECT_NEAR(f[f.grid().index(i, j)], u[g.index(i, j, k)], 1e-12);
  EXPECT_EQ(run("project --volume " + p("s/volume.raw") + " --focal 0.5 --out " + p("g.raw")).code, 1);
  EXPECT_EQ(run("project --volume " + p("s/volume.raw") + " --delta --focal 3 --out " + p("g.raw")).code, 1);
}

TEST_F(Cli, SweepFindsTheInjectedTranslation) {
  ASSERT_EQ(run("synth --scene three_cuboid_translation --small --out-dir " + p("s")).code, 0);
  const std::string io = " --volume " + p("s/volume.raw") + " --image " + p("s/image.raw");
  ASSERT_EQ(run("sweep" + io + " --axis z --range 0:0.7:71 --out " + p("sweep.csv")).code, 0);
  std::ifstream in(dir_ / "sweep.csv");
  const auto rows = read_csv(in);
  ASSERT_EQ(rows.size(), 71u);
  const auto best = std::min_element(rows.begin(), rows.end(), [](auto& a, auto& b) { return a.second < b.second; });
  EXPECT_NEAR(best->first, 0.35, 0.01 + 1e-12);

  // standard output when --out is omitted; identical numbers
  const auto r = run("sweep" + io + " --axis z --range 0:0.7:71");
  ASSERT_EQ(r.code, 0);
  std::ifstream again(dir_ / "sweep.csv");
  std::stringstream file;
  file << again.rdbuf();
  EXPECT_EQ(r.out, file.str());

  EXPECT_EQ(run("sweep" + io + " --axis w --range 0:0.7:71").code, 1);
  EXPECT_EQ(run("sweep" + io + " --range 0:0.7").code, 1);
  EXPECT_EQ(run("sweep" + io + " --range 0:0.7:0").code, 1);
}

TEST_F(Cli, RegisterAlignedPairWritesReport) {
  ASSERT_EQ(run("synth --scene three_cuboid_translation --small --param t=0 --out-dir " + p("s")).code, 0);
  std::ofstream(dir_ / "cfg.json") << R"({"kernel": {"cone_slope": 1.0},
                                          "solver": {"max_iters": 40},
                                          "pipeline": {"blur_schedule": [2, 0]}})";
  const std::string io = " --volume " + p("s/volume.raw") + " --image " + p("s/image.raw");
  ASSERT_EQ(run("register" + io + " --config " + p("cfg.json") + " --out-dir " + p("r")).code, 0);
  for (const char* f : {"deformation.raw", "warped_projection.raw", "report.json", "reference.pgm",
                        "initial_projection.pgm", "warped_projection.pgm"})
    EXPECT_TRUE(fs::exists(dir_ / "r" / f)) << f;

  std::ifstream in(dir_ / "r" / "report.json");
  const auto rep = nlohmann::json::parse(in);
  for (const char* key : {"initial_data_term", "final_data_term", "failed", "failure", "rigid", "diagnostics",
                          "stages", "prealign_seconds", "total_seconds", "config", "warped_preview_fnv1a"})
    EXPECT_TRUE(rep.contains(key)) << key;
  EXPECT_FALSE(rep.at("failed").get<bool>());
  EXPECT_LE(rep.at("initial_data_term").get<double>(), 1e-15);
  EXPECT_GT(rep.at("diagnostics").at("min_det").get<double>(), 0.0);
  ASSERT_EQ(rep.at("stages").size(), 4u);  // levels 4 and 5 for each of the two scales
  EXPECT_FALSE(rep.at("stages")[0].at("energy_trace").empty());

  // the coarse stages are not exactly aligned, so the pair comes back to
  // alignment only to solver tolerance: far below a one-cell misregistration
  ASSERT_EQ(run("sweep" + io + " --axis x --range 0:0.03125:2 --out " + p("cell.csv")).code, 0);
  std::ifstream cell_in(dir_ / "cell.csv");
  const double one_cell = read_csv(cell_in).at(1).second;
  EXPECT_LE(rep.at("final_data_term").get<double>(), 1e-3 * one_cell);

  // deterministic: a second run reproduces the deformation bit for bit
  ASSERT_EQ(run("register" + io + " --config " + p("cfg.json") + " --out-dir " + p("r2")).code, 0);
  EXPECT_EQ(read_deformation(dir_ / "r" / "deformation.raw").storage(),
            read_deformation(dir_ / "r2" / "deformation.raw").storage());
}

TEST_F(Cli, PrealignWritesParameters) {
  ASSERT_EQ(run("synth --scene three_cuboid_translation --small --param t=0 --out-dir " + p("s")).code, 0);
  ASSERT_EQ(run("prealign --volume " + p("s/volume.raw") + " --image " + p("s/image.raw") +
                " --out " + p("params.json"))
                .code,
            0);
  std::ifstream in(dir_ / "params.json");
  const auto j = nlohmann::json::parse(in);
  for (int a = 0; a < 3; ++a) {
    EXPECT_NEAR(j.at("t")[a].get<double>(), 0.0, 1.0 / 64);
    EXPECT_NEAR(j.at("s")[a].get<double>(), 1.0, 0.02);
  }
  EXPECT_TRUE(j.contains("angles"));
}
