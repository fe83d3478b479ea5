#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "movl/error.hpp"
#include "movl/trainer.hpp"

namespace movl {

/// Schema violations, one entry per offending key ("/loss/alpha: ...").
class ConfigValidationError : public ConfigError {
 public:
  explicit ConfigValidationError(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

/// Full description of one training run.
struct RunConfig {
  std::string data;              // dataset directory
  std::string backbone;          // encoder checkpoint
  std::string class_embeddings;  // optional, for vp_head = embedding
  std::string output_root = "runs";
  TrainSpec spec;
};

/// Parses and validates; collects every violation before throwing.
RunConfig parse_run_config(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);

/// Fully resolved config; parse_run_config(to_json(c)) reproduces c.
nlohmann::json to_json(const RunConfig& cfg);

/// The JSON schema accepted by parse_run_config.
nlohmann::json run_config_schema();

/// Checks that every referenced file exists; throws ConfigValidationError
/// naming each missing path.
void check_paths(const RunConfig& cfg);

}  // namespace movl
