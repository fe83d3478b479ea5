#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "movl/backbone.hpp"
#include "movl/config.hpp"
#include "movl/data.hpp"
#include "movl/trainer.hpp"

namespace movl {

/// Dataset, encoder and optional class embeddings named by a config.
struct Resources {
  Dataset data;
  LoadedBackbone backbone;
  std::optional<EmbeddingHead<float>> embeddings;
};

Resources load_resources(const RunConfig& cfg);

/// Fills prompt geometry from the encoder and dataset when the config left defaults.
TrainSpec resolve_spec(const RunConfig& cfg, const Resources& res);

/// cfg.output_root unless MOVL_OUT is set.
std::filesystem::path output_root(const RunConfig& cfg);

/// Exclusive claim on an output directory through a `.lock` file.
class DirLock {
 public:
  explicit DirLock(std::filesystem::path dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path lock_;
};

/// Creates root/<label>-<UTC timestamp>[-n] and returns it.
std::filesystem::path create_run_dir(const std::filesystem::path& root, const std::string& label);

/// One metrics.jsonl line.
std::string metrics_line(const EpochMetrics& m);

/// Shortest round-trip text of a double, identical to its JSON rendering.
std::string format_number(double x);

struct RunOutcome {
  std::filesystem::path dir;
  RunRecord record;
};

/// Trains and writes config.json, metrics.jsonl, best.ckpt, final.ckpt,
/// manifest.json and summary.json into run_dir.
RunOutcome run_training(const RunConfig& cfg, const Resources& res, const std::filesystem::path& run_dir);

/// Writes a model state as a checkpoint.
void save_state(const std::filesystem::path& path, const ModelState& state, const RunConfig& cfg);

/// Reads back a model state written by save_state.
ModelState load_state(const std::filesystem::path& path);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_text() const;
  std::string to_csv() const;
  void write(const std::filesystem::path& stem) const;  // stem.txt and stem.csv
};

/// Strategy x seed grid of best-validation test accuracy plus per-strategy mean.
Table compare_strategies(const RunConfig& base, const Resources& res, const std::vector<Strategy>& strategies,
                         const std::vector<std::uint64_t>& seeds, const std::filesystem::path& dir);

/// Mix-strategy accuracy for alpha = 0 and each listed alpha, with the
/// mean delta against alpha = 0.
Table ablate_loss(const RunConfig& base, const Resources& res, const std::vector<double>& alphas,
                  const std::vector<std::uint64_t>& seeds, const std::filesystem::path& dir);

/// Two rows: epsilon-constant and random prompt initialization.
Table ablate_init(const RunConfig& base, const Resources& res, const std::vector<std::uint64_t>& seeds,
                  const std::filesystem::path& dir);

double mean(const std::vector<double>& xs);

}  // namespace movl
