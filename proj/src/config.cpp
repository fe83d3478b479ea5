#include "movl/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace movl {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string join_errors(const std::vector<std::string>& errors) {
  std::ostringstream out;
  out << "invalid config (" << errors.size() << " error" << (errors.size() == 1 ? "" : "s") << ")";
  for (const auto& e : errors) out << "\n  " << e;
  return out.str();
}

// Reads typed fields from one JSON object and records every violation.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path, std::vector<std::string>& errors)
      : obj_(obj), path_(std::move(path)), errors_(errors) {
    if (!obj_.is_object()) fail("", "must be an object");
  }

  ~ObjectReader() {
    if (!obj_.is_object()) return;
    for (const auto& [key, value] : obj_.items()) {
      if (!known_.count(key)) fail(key, "unknown key");
    }
  }

  bool has(const std::string& key) {
    known_.insert(key);
    return obj_.is_object() && obj_.contains(key);
  }

  const json* child(const std::string& key) {
    if (!has(key)) return nullptr;
    return &obj_.at(key);
  }

  std::string path(const std::string& key) const { return path_ + "/" + key; }

  void string(const std::string& key, std::string& out, bool required = false) {
    if (!has(key)) {
      if (required) fail(key, "is required");
      return;
    }
    const auto& v = obj_.at(key);
    if (!v.is_string()) return fail(key, "must be a string");
    out = v.get<std::string>();
  }

  void number(const std::string& key, double& out, double lo, double hi, const char* bound_text) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number()) return fail(key, "must be a number");
    const double x = v.get<double>();
    if (!(x >= lo && x <= hi)) return fail(key, std::string("must lie in ") + bound_text + " (got " + v.dump() + ")");
    out = x;
  }

  template <typename T>
  void count(const std::string& key, T& out, std::uint64_t min_value) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      return fail(key, "must be a non-negative integer");
    }
    const auto x = v.get<std::uint64_t>();
    if (x < min_value) return fail(key, "must be >= " + std::to_string(min_value));
    out = static_cast<T>(x);
  }

  void boolean(const std::string& key, bool& out) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_boolean()) return fail(key, "must be a boolean");
    out = v.get<bool>();
  }

  void numbers(const std::string& key, std::vector<double>& out, bool positive) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_array() || v.empty()) return fail(key, "must be a non-empty array of numbers");
    std::vector<double> vals;
    for (const auto& x : v) {
      if (!x.is_number()) return fail(key, "must be a non-empty array of numbers");
      if (positive && !(x.get<double>() > 0.0)) return fail(key, "entries must be > 0");
      vals.push_back(x.get<double>());
    }
    out = std::move(vals);
  }

  template <typename Enum, typename Parse>
  void choice(const std::string& key, Enum& out, Parse parse) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_string()) return fail(key, "must be a string");
    try {
      out = parse(v.get<std::string>());
    } catch (const ConfigError& e) {
      fail(key, e.what());
    }
  }

  void fail(const std::string& key, const std::string& msg) {
    errors_.push_back((key.empty() ? (path_.empty() ? std::string("/") : path_) : path(key)) + ": " + msg);
  }

 private:
  const json& obj_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> known_;
};

}  // namespace

ConfigValidationError::ConfigValidationError(std::vector<std::string> errors)
    : ConfigError(join_errors(errors)), errors_(std::move(errors)) {}

RunConfig parse_run_config(const json& j) {
  std::vector<std::string> errors;
  RunConfig cfg;
  TrainSpec& s = cfg.spec;
  {
    ObjectReader root(j, "", errors);
    root.string("data", cfg.data, true);
    root.string("backbone", cfg.backbone, true);
    root.string("class_embeddings", cfg.class_embeddings);
    root.string("output_root", cfg.output_root);
    root.choice("strategy", s.plan.strategy, strategy_from_string);
    root.count("epochs", s.plan.total_epochs, 1);
    root.count("phase_boundary", s.plan.phase_boundary, 1);
    root.count("seed", s.optim.seed, 0);
    root.choice("vp_head", s.vp_head, vp_head_from_string);

    if (const json* p = root.child("prompt")) {
      ObjectReader r(*p, root.path("prompt"), errors);
      r.choice("mode", s.prompt.mode, prompt_mode_from_string);
      r.count("pad_width", s.prompt.pad_width, 1);
      r.count("image_size", s.prompt.image_size, 1);
      r.count("channels", s.prompt.channels, 1);
      r.choice("init", s.prompt_init, prompt_init_from_string);
      r.number("epsilon", s.prompt.init_value, -1.0, 1.0, "[-1,1]");
      r.number("random_half_width", s.random_init_half_width, 1e-12, 1.0, "(0,1]");
      if (s.prompt.mode == PromptMode::kPad && 2 * s.prompt.pad_width >= s.prompt.image_size) {
        r.fail("pad_width", "pad geometry needs 2*pad_width < image_size");
      }
    }
    if (const json* l = root.child("loss")) {
      ObjectReader r(*l, root.path("loss"), errors);
      r.number("alpha", s.loss.alpha, 0.0, 1.0, "[0,1]");
      r.boolean("detach_clean", s.loss.detach_clean);
      r.boolean("factor_stop_gradient", s.loss.factor_stop_gradient);
      if (!s.loss.detach_clean) r.fail("detach_clean", "must be true (the clean branch is always severed)");
    }
    if (const json* o = root.child("optim")) {
      ObjectReader r(*o, root.path("optim"), errors);
      r.number("lr", s.optim.lr, 1e-12, 10.0, "(0,10]");
      r.number("weight_decay", s.optim.weight_decay, 0.0, 1.0, "[0,1]");
      r.count("warmup_steps", s.optim.warmup_steps, 0);
      r.count("batch_size", s.optim.batch_size, 1);
    }
    if (const json* n = root.child("normalization")) {
      ObjectReader r(*n, root.path("normalization"), errors);
      r.numbers("mean", s.norm.mean, false);
      r.numbers("std", s.norm.std, true);
    }
    const bool two_stage = s.plan.strategy == Strategy::kLPThenVP || s.plan.strategy == Strategy::kLPThenMix;
    if (two_stage && s.plan.phase_boundary >= s.plan.total_epochs) {
      root.fail("phase_boundary", "must be < epochs for two-stage strategies");
    }
    if (s.norm.mean.size() != s.norm.std.size()) root.fail("normalization", "mean and std lengths differ");
    if (s.plan.strategy == Strategy::kVP && s.vp_head == VpHeadKind::kEmbedding && cfg.class_embeddings.empty()) {
      root.fail("class_embeddings", "is required when vp_head is 'embedding'");
    }
  }
  if (!errors.empty()) throw ConfigValidationError(std::move(errors));
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigValidationError({"config file not found: " + path.string()});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigValidationError({path.string() + ": not valid JSON: " + e.what()});
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& cfg) {
  const TrainSpec& s = cfg.spec;
  json j;
  j["data"] = cfg.data;
  j["backbone"] = cfg.backbone;
  if (!cfg.class_embeddings.empty()) j["class_embeddings"] = cfg.class_embeddings;
  j["output_root"] = cfg.output_root;
  j["strategy"] = to_string(s.plan.strategy);
  j["epochs"] = s.plan.total_epochs;
  j["phase_boundary"] = s.plan.phase_boundary;
  j["seed"] = s.optim.seed;
  j["vp_head"] = to_string(s.vp_head);
  j["prompt"] = {{"mode", to_string(s.prompt.mode)},
                 {"pad_width", s.prompt.pad_width},
                 {"image_size", s.prompt.image_size},
                 {"channels", s.prompt.channels},
                 {"init", to_string(s.prompt_init)},
                 {"epsilon", s.prompt.init_value},
                 {"random_half_width", s.random_init_half_width}};
  j["loss"] = {{"alpha", s.loss.alpha},
               {"detach_clean", s.loss.detach_clean},
               {"factor_stop_gradient", s.loss.factor_stop_gradient}};
  j["optim"] = {{"lr", s.optim.lr},
                {"weight_decay", s.optim.weight_decay},
                {"warmup_steps", s.optim.warmup_steps},
                {"batch_size", s.optim.batch_size}};
  j["normalization"] = {{"mean", s.norm.mean}, {"std", s.norm.std}};
  return j;
}

json run_config_schema() {
  const json count = {{"type", "integer"}, {"minimum", 0}};
  return {
      {"$schema", "https://json-schema.org/draft/2020-12/schema"},
      {"title", "movl run config"},
      {"type", "object"},
      {"additionalProperties", false},
      {"required", {"data", "backbone"}},
      {"properties",
       {{"data", {{"type", "string"}, {"description", "dataset directory (meta.json, images.u8, labels.u16)"}}},
        {"backbone", {{"type", "string"}, {"description", "encoder checkpoint"}}},
        {"class_embeddings", {{"type", "string"}}},
        {"output_root", {{"type", "string"}, {"default", "runs"}}},
        {"strategy", {{"enum", {"lp", "vp", "lp_then_vp", "lp_then_mix", "mix", "ff"}}, {"default", "mix"}}},
        {"epochs", {{"type", "integer"}, {"minimum", 1}, {"default", 20}}},
        {"phase_boundary", {{"type", "integer"}, {"minimum", 1}, {"default", 10}}},
        {"seed", count},
        {"vp_head", {{"enum", {"flm", "rlm", "embedding"}}, {"default", "flm"}}},
        {"prompt",
         {{"type", "object"},
          {"additionalProperties", false},
          {"properties",
           {{"mode", {{"enum", {"pad", "overlay"}}, {"default", "pad"}}},
            {"pad_width", {{"type", "integer"}, {"minimum", 1}, {"default", 8}}},
            {"image_size", {{"type", "integer"}, {"minimum", 1}, {"default", 64}}},
            {"channels", {{"type", "integer"}, {"minimum", 1}, {"default", 3}}},
            {"init", {{"enum", {"epsilon", "random"}}, {"default", "epsilon"}}},
            {"epsilon", {{"type", "number"}, {"default", 0.001}}},
            {"random_half_width", {{"type", "number"}, {"exclusiveMinimum", 0}, {"default", 0.03}}}}}}},
        {"loss",
         {{"type", "object"},
          {"additionalProperties", false},
          {"properties",
           {{"alpha", {{"type", "number"}, {"minimum", 0}, {"maximum", 1}, {"default", 0.5}}},
            {"detach_clean", {{"const", true}, {"default", true}}},
            {"factor_stop_gradient", {{"type", "boolean"}, {"default", false}}}}}}},
        {"optim",
         {{"type", "object"},
          {"additionalProperties", false},
          {"properties",
           {{"lr", {{"type", "number"}, {"exclusiveMinimum", 0}, {"default", 0.01}}},
            {"weight_decay", {{"type", "number"}, {"minimum", 0}, {"default", 0}}},
            {"warmup_steps", {{"type", "integer"}, {"minimum", 0}, {"default", 10}}},
            {"batch_size", {{"type", "integer"}, {"minimum", 1}, {"default", 128}}}}}}},
        {"normalization",
         {{"type", "object"},
          {"additionalProperties", false},
          {"properties",
           {{"mean", {{"type", "array"}, {"items", {{"type", "number"}}}, {"default", {0.5, 0.5, 0.5}}}},
            {"std", {{"type", "array"}, {"items", {{"type", "number"}, {"exclusiveMinimum", 0}}},
                     {"default", {0.5, 0.5, 0.5}}}}}}}}}}};
}

void check_paths(const RunConfig& cfg) {
  std::vector<std::string> errors;
  if (!fs::exists(fs::path(cfg.data) / "meta.json")) errors.push_back("/data: dataset not found: " + cfg.data);
  if (!fs::exists(cfg.backbone)) errors.push_back("/backbone: checkpoint not found: " + cfg.backbone);
  if (!cfg.class_embeddings.empty() && !fs::exists(cfg.class_embeddings)) {
    errors.push_back("/class_embeddings: file not found: " + cfg.class_embeddings);
  }
  if (!errors.empty()) throw ConfigValidationError(std::move(errors));
}

}  // namespace movl
