#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / "movl_test_cli"; }

  static Result run(const std::string& args, const std::string& env = "") {
    const fs::path out = root() / "stdout.txt";
    const fs::path err = root() / "stderr.txt";
    const std::string cmd = "cd '" + root().string() + "' && env -u MOVL_OUT " + env + " '" + MOVL_BIN + "' " + args +
                            " >'" + out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  static void write_config(const std::string& name, const json& patch) {
    json cfg = {{"data", "target"},
                {"backbone", "enc.ckpt"},
                {"output_root", "runs"},
                {"strategy", "mix"},
                {"epochs", 2},
                {"phase_boundary", 1},
                {"prompt", {{"image_size", 32}, {"pad_width", 4}}},
                {"optim", {{"batch_size", 16}, {"warmup_steps", 0}}}};
    cfg.merge_patch(patch);
    std::ofstream(root() / name) << cfg.dump(2);
  }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    ASSERT_EQ(run("gen-data --domain source --classes 5 --per-class 60 --size 32 --seed 1 --out source").code, 0);
    ASSERT_EQ(run("gen-data --domain target --classes 3 --per-class 130 --size 32 --seed 2 --out target").code, 0);
    const Result pre =
        run("pretrain --data source --epochs 2 --warmup 0 --seed 1 --min-accuracy 0 --input-size 32 --out enc.ckpt");
    ASSERT_EQ(pre.code, 0) << pre.err;
    write_config("base.json", json::object());
  }
};

fs::path run_dir_of(const Result& r) { return fs::path(json::parse(r.out).at("run_dir").get<std::string>()); }

}  // namespace

TEST_F(Cli, GenDataReportsSplits) {
  const Result r = run("gen-data --domain target --classes 3 --per-class 130 --size 32 --seed 2 --out again");
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_EQ(j["n"], 390);
  EXPECT_EQ(j["splits"]["train"], 30);
  EXPECT_EQ(j["splits"]["val"], 60);
  EXPECT_EQ(j["splits"]["test"], 300);
  EXPECT_EQ(slurp(root() / "again" / "images.u8"), slurp(root() / "target" / "images.u8"));
}

TEST_F(Cli, TrainWritesRunDirectory) {
  const Result r = run("train --config base.json");
  ASSERT_EQ(r.code, 0) << r.err;
  const fs::path dir = root() / run_dir_of(r);
  for (const char* f : {"config.json", "metrics.jsonl", "best.ckpt", "final.ckpt", "manifest.json", "summary.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_FALSE(fs::exists(dir / ".lock"));
  std::istringstream lines(slurp(dir / "metrics.jsonl"));
  int n = 0;
  for (std::string l; std::getline(lines, l); ++n) EXPECT_TRUE(json::parse(l).contains("val_acc"));
  EXPECT_EQ(n, 2);
}

TEST_F(Cli, SameSeedSameMetrics) {
  const Result a = run("train --config base.json --seed 4");
  const Result b = run("train --config base.json --seed 4");
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_NE(run_dir_of(a), run_dir_of(b));
  EXPECT_EQ(slurp(root() / run_dir_of(a) / "metrics.jsonl"), slurp(root() / run_dir_of(b) / "metrics.jsonl"));
}

TEST_F(Cli, EvalReproducesBestTestAccuracy) {
  const Result t = run("train --config base.json --strategy lp_then_vp");
  ASSERT_EQ(t.code, 0) << t.err;
  const Result e = run("eval --run " + run_dir_of(t).string());
  ASSERT_EQ(e.code, 0) << e.err;
  const json ev = json::parse(e.out);
  EXPECT_EQ(ev["accuracy"].get<double>(), json::parse(t.out)["best_test_acc"].get<double>());
  EXPECT_EQ(ev["confusion"].size(), 3u);
}

TEST_F(Cli, CompareGrid) {
  const Result r = run("compare --config base.json --epochs 1 --strategies lp,mix --seeds 1,2,3");
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string marker = "written to ";
  const auto pos = r.out.find(marker);
  ASSERT_NE(pos, std::string::npos);
  std::string csv_path = r.out.substr(pos + marker.size());
  csv_path.erase(csv_path.find_last_not_of('\n') + 1);
  std::istringstream csv(slurp(root() / csv_path));
  std::vector<std::string> rows;
  for (std::string l; std::getline(csv, l);) rows.push_back(l);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "strategy,seed_1,seed_2,seed_3,mean");
  EXPECT_EQ(rows[1].rfind("lp,", 0), 0u);
  EXPECT_EQ(rows[2].rfind("mix,", 0), 0u);
  for (std::size_t i = 1; i < 3; ++i) {
    std::istringstream cells(rows[i]);
    std::vector<double> v;
    std::string cell;
    std::getline(cells, cell, ',');
    while (std::getline(cells, cell, ',')) v.push_back(std::stod(cell));
    ASSERT_EQ(v.size(), 4u);
    EXPECT_NEAR(v[3], (v[0] + v[1] + v[2]) / 3.0, 1e-12);
  }
}

TEST_F(Cli, AlphaOutOfRangeIsConfigError) {
  const Result flag = run("train --config base.json --alpha 1.5");
  EXPECT_EQ(flag.code, 2);
  EXPECT_NE(flag.err.find("/loss/alpha"), std::string::npos) << flag.err;
  EXPECT_NE(flag.err.find("[0,1]"), std::string::npos) << flag.err;
  write_config("bad_alpha.json", {{"loss", {{"alpha", 1.5}}}});
  const Result file = run("train --config bad_alpha.json");
  EXPECT_EQ(file.code, 2);
  EXPECT_NE(file.err.find("[0,1]"), std::string::npos) << file.err;
}

TEST_F(Cli, MissingInputsAreConfigErrors) {
  write_config("missing.json", {{"data", "nowhere"}});
  const Result r = run("train --config missing.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nowhere"), std::string::npos) << r.err;
  EXPECT_EQ(run("train --config absent.json").code, 2);
  EXPECT_EQ(run("train").code, 2);
  EXPECT_EQ(run("train --config base.json --strategy lp+vp").code, 2);
}

TEST_F(Cli, EnvironmentRedirectsOutput) {
  const Result r = run("train --config base.json --strategy lp --out elsewhere", "MOVL_OUT=env-runs");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(run_dir_of(r).parent_path(), fs::path("env-runs"));
}

TEST_F(Cli, GradcheckPasses) {
  const Result r = run("gradcheck --config base.json --dtype float32 --entries 8 --batch 2");
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_TRUE(j["pass"].get<bool>());
  EXPECT_TRUE(j["detach"]["pass"].get<bool>());
}
