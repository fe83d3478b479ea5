#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "movl/config.hpp"
#include "movl/experiment.hpp"

using namespace movl;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

json minimal() { return {{"data", "d"}, {"backbone", "b.ckpt"}}; }

std::vector<std::string> errors_of(const json& j) {
  try {
    parse_run_config(j);
  } catch (const ConfigValidationError& e) {
    return e.errors();
  }
  return {};
}

bool any_contains(const std::vector<std::string>& errs, const std::string& needle) {
  for (const auto& e : errs) {
    if (e.find(needle) != std::string::npos) return true;
  }
  return false;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("movl_test_config_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Config, DefaultsFromMinimal) {
  const RunConfig cfg = parse_run_config(minimal());
  EXPECT_EQ(cfg.spec.plan.strategy, Strategy::kMix);
  EXPECT_DOUBLE_EQ(cfg.spec.loss.alpha, 0.5);
  EXPECT_TRUE(cfg.spec.loss.detach_clean);
  EXPECT_DOUBLE_EQ(cfg.spec.prompt.init_value, 0.001);
  EXPECT_EQ(cfg.output_root, "runs");
}

TEST(Config, AlphaOutOfRangeCitesPathAndBounds) {
  json j = minimal();
  j["loss"] = {{"alpha", 1.5}};
  const auto errs = errors_of(j);
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_NE(errs[0].find("/loss/alpha"), std::string::npos);
  EXPECT_NE(errs[0].find("[0,1]"), std::string::npos);
}

TEST(Config, CollectsEveryViolation) {
  json j = {{"backbone", 3},
            {"strategy", "lp+vp"},
            {"colour", "red"},
            {"optim", {{"lr", -1.0}, {"batch_size", 0}}},
            {"loss", {{"detach_clean", false}}}};
  const auto errs = errors_of(j);
  EXPECT_TRUE(any_contains(errs, "/data: is required"));
  EXPECT_TRUE(any_contains(errs, "/backbone: must be a string"));
  EXPECT_TRUE(any_contains(errs, "/strategy"));
  EXPECT_TRUE(any_contains(errs, "/colour: unknown key"));
  EXPECT_TRUE(any_contains(errs, "/optim/lr"));
  EXPECT_TRUE(any_contains(errs, "/optim/batch_size"));
  EXPECT_TRUE(any_contains(errs, "/loss/detach_clean"));
  EXPECT_GE(errs.size(), 7u);
}

TEST(Config, NestedUnknownKey) {
  json j = minimal();
  j["prompt"] = {{"pad", 3}};
  EXPECT_TRUE(any_contains(errors_of(j), "/prompt/pad: unknown key"));
}

TEST(Config, GeometryAndBoundary) {
  json j = minimal();
  j["prompt"] = {{"pad_width", 32}, {"image_size", 64}};
  EXPECT_TRUE(any_contains(errors_of(j), "/prompt/pad_width"));
  json k = minimal();
  k["strategy"] = "lp_then_mix";
  k["epochs"] = 4;
  k["phase_boundary"] = 4;
  EXPECT_TRUE(any_contains(errors_of(k), "/phase_boundary"));
  k["strategy"] = "mix";
  EXPECT_TRUE(errors_of(k).empty());
}

TEST(Config, EmbeddingHeadNeedsEmbeddings) {
  json j = minimal();
  j["strategy"] = "vp";
  j["vp_head"] = "embedding";
  EXPECT_TRUE(any_contains(errors_of(j), "/class_embeddings"));
}

TEST(Config, NormalizationLengths) {
  json j = minimal();
  j["normalization"] = {{"mean", {0.5, 0.5}}, {"std", {0.5, 0.5, 0.5}}};
  EXPECT_TRUE(any_contains(errors_of(j), "/normalization"));
  j["normalization"] = {{"mean", {0.5}}, {"std", {0.0}}};
  EXPECT_TRUE(any_contains(errors_of(j), "/normalization/std"));
}

TEST(Config, RoundTrip) {
  json j = minimal();
  j["strategy"] = "lp_then_vp";
  j["epochs"] = 6;
  j["phase_boundary"] = 2;
  j["seed"] = 9;
  j["prompt"] = {{"mode", "overlay"}, {"init", "random"}, {"random_half_width", 0.1}};
  j["loss"] = {{"alpha", 0.25}, {"factor_stop_gradient", true}};
  j["optim"] = {{"lr", 0.03}, {"batch_size", 16}};
  const RunConfig a = parse_run_config(j);
  const json dumped = to_json(a);
  EXPECT_EQ(to_json(parse_run_config(dumped)), dumped);
  EXPECT_EQ(dumped["strategy"], "lp_then_vp");
  EXPECT_EQ(dumped["prompt"]["mode"], "overlay");
  EXPECT_EQ(dumped["loss"]["alpha"], 0.25);
}

TEST(Config, SchemaListsEveryTopLevelKey) {
  const json schema = run_config_schema();
  const json dumped = to_json(parse_run_config(minimal()));
  for (const auto& [key, value] : dumped.items()) EXPECT_TRUE(schema["properties"].contains(key)) << key;
}

TEST(Config, CheckPathsNamesMissingFiles) {
  RunConfig cfg = parse_run_config(minimal());
  cfg.data = "/nonexistent/dataset";
  cfg.backbone = "/nonexistent/enc.ckpt";
  try {
    check_paths(cfg);
    FAIL() << "expected ConfigValidationError";
  } catch (const ConfigValidationError& e) {
    ASSERT_EQ(e.errors().size(), 2u);
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dataset"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("/nonexistent/enc.ckpt"), std::string::npos);
  }
}

TEST(Metrics, LineLayoutAndNulls) {
  EpochMetrics m;
  m.epoch = 3;
  m.phase = "lp";
  m.loss = 0.5;
  m.lr = 0.01;
  EXPECT_EQ(metrics_line(m),
            R"({"epoch":3,"phase":"lp","loss":0.5,"train_acc":0.0,"val_acc":0.0,"test_acc":0.0,"lr":0.01,)"
            R"("p_plus_mean":null,"p_minus_mean":null})");
}

TEST(Metrics, FormatNumberRoundTrips) {
  for (double x : {0.1, 1.0 / 3.0, 0.7557142857142857, 1e-300, 123456.789, 0.0}) {
    const std::string s = format_number(x);
    EXPECT_EQ(std::stod(s), x) << s;
    EXPECT_EQ(json::parse(s).get<double>(), x);
  }
}

TEST(Metrics, CsvCellsMatchJsonNumbers) {
  EpochMetrics m;
  m.val_acc = 2.0 / 7.0;
  m.test_acc = 0.1 + 0.2;
  const json line = json::parse(metrics_line(m));
  Table t{{"val", "test"}, {{format_number(m.val_acc), format_number(m.test_acc)}}};
  std::istringstream csv(t.to_csv());
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, "val,test");
  EXPECT_EQ(row, line["val_acc"].dump() + "," + line["test_acc"].dump());
  EXPECT_EQ(std::stod(row.substr(0, row.find(','))), line["val_acc"].get<double>());
}

TEST(Table, TextIsAligned) {
  Table t{{"strategy", "acc"}, {{"lp", "0.5"}, {"lp_then_mix", "0.75"}}};
  std::istringstream in(t.to_text());
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0].find("acc"), lines[2].find("0.5"));
  EXPECT_EQ(lines[0].find("acc"), lines[3].find("0.75"));
}

TEST(Output, LockIsExclusive) {
  const fs::path dir = scratch("lock");
  {
    DirLock a(dir);
    EXPECT_TRUE(fs::exists(dir / ".lock"));
    EXPECT_THROW(DirLock b(dir), std::runtime_error);
  }
  EXPECT_FALSE(fs::exists(dir / ".lock"));
  EXPECT_NO_THROW(DirLock c(dir));
}

TEST(Output, RunDirsAreDistinct) {
  const fs::path root = scratch("runs");
  const fs::path a = create_run_dir(root, "mix");
  const fs::path b = create_run_dir(root, "mix");
  EXPECT_NE(a, b);
  EXPECT_TRUE(fs::is_directory(a));
  EXPECT_TRUE(fs::is_directory(b));
  EXPECT_EQ(a.filename().string().rfind("mix-", 0), 0u);
}

TEST(Output, EnvironmentOverridesRoot) {
  RunConfig cfg = parse_run_config(minimal());
  cfg.output_root = "from-config";
  ::unsetenv("MOVL_OUT");
  EXPECT_EQ(output_root(cfg), fs::path("from-config"));
  ::setenv("MOVL_OUT", "/tmp/from-env", 1);
  EXPECT_EQ(output_root(cfg), fs::path("/tmp/from-env"));
  ::unsetenv("MOVL_OUT");
}

TEST(Config, PublishedSchemaIsCurrent) {
  std::ifstream in(fs::path(MOVL_SOURCE_DIR) / "schema" / "run_config.schema.json");
  ASSERT_TRUE(in.good());
  EXPECT_EQ(json::parse(in), run_config_schema());
}
