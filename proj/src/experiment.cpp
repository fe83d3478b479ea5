#include "movl/experiment.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "movl/random.hpp"

namespace movl {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

Resources load_resources(const RunConfig& cfg) {
  check_paths(cfg);
  std::optional<EmbeddingHead<float>> emb;
  if (!cfg.class_embeddings.empty()) emb = load_embedding_head(read_checkpoint(cfg.class_embeddings));
  return Resources{load_dataset(cfg.data), load_backbone(cfg.backbone), std::move(emb)};
}

TrainSpec resolve_spec(const RunConfig& cfg, const Resources& res) {
  TrainSpec spec = cfg.spec;
  if (spec.prompt.image_size != res.backbone.backbone.input_size()) {
    throw ConfigValidationError({"/prompt/image_size: " + std::to_string(spec.prompt.image_size) +
                                 " does not match the encoder input size " +
                                 std::to_string(res.backbone.backbone.input_size())});
  }
  spec.prompt.channels = static_cast<Index>(res.data.meta().c);
  if (spec.norm.mean.size() != res.data.meta().c) {
    throw ConfigValidationError({"/normalization: expected " + std::to_string(res.data.meta().c) + " channels"});
  }
  return spec;
}

fs::path output_root(const RunConfig& cfg) {
  if (const char* env = std::getenv("MOVL_OUT"); env && *env) return fs::path(env);
  return fs::path(cfg.output_root);
}

DirLock::DirLock(fs::path dir) : lock_(std::move(dir) / ".lock") {
  fs::create_directories(lock_.parent_path());
  const int fd = ::open(lock_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw std::runtime_error("output directory is in use by another command (lock file " + lock_.string() + ")");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirLock::~DirLock() {
  std::error_code ec;
  fs::remove(lock_, ec);
}

fs::path create_run_dir(const fs::path& root, const std::string& label) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%dT%H%M%SZ", &tm);
  fs::create_directories(root);
  fs::path dir = root / (label + "-" + stamp);
  for (int n = 1; !fs::create_directory(dir); ++n) {
    dir = root / (label + "-" + stamp + "-" + std::to_string(n));
  }
  return dir;
}

std::string format_number(double x) { return json(x).dump(); }

std::string metrics_line(const EpochMetrics& m) {
  ordered_json j;
  j["epoch"] = m.epoch;
  j["phase"] = m.phase;
  j["loss"] = m.loss;
  j["train_acc"] = m.train_acc;
  j["val_acc"] = m.val_acc;
  j["test_acc"] = m.test_acc;
  j["lr"] = m.lr;
  j["p_plus_mean"] = m.p_plus_mean ? json(*m.p_plus_mean) : json(nullptr);
  j["p_minus_mean"] = m.p_minus_mean ? json(*m.p_minus_mean) : json(nullptr);
  return j.dump();
}

void save_state(const fs::path& path, const ModelState& state, const RunConfig& cfg) {
  Checkpoint ckpt;
  ckpt.attributes["strategy"] = to_string(cfg.spec.plan.strategy);
  ckpt.attributes["seed"] = cfg.spec.optim.seed;
  if (state.prompt) {
    ckpt.tensors.merge(state.prompt->parameters());
    ckpt.attributes["prompt"] = state.prompt->attributes();
  } else {
    ckpt.attributes["prompt"] = nullptr;
  }
  if (const auto* probe = std::get_if<LinearProbe<float>>(&state.head)) {
    ckpt.attributes["head"] = "probe";
    ckpt.tensors["probe.weight"] = to_named(probe->weight, {probe->out_features(), probe->in_features()});
    ckpt.tensors["probe.bias"] = to_named(probe->bias, {probe->out_features()});
  } else if (const auto* mapped = std::get_if<MappedHead<float>>(&state.head)) {
    ckpt.attributes["head"] = "mapped";
    ckpt.attributes["label_map"] = {{"mapping", mapped->map.mapping},
                                    {"source_classes", mapped->map.source_classes},
                                    {"method", mapped->map.method == LabelMapMethod::kFrequency ? "flm" : "rlm"},
                                    {"seed", mapped->map.seed}};
    const auto& src = mapped->source;
    ckpt.tensors["source_head.weight"] = to_named(src.weight, {src.out_features(), src.in_features()});
    ckpt.tensors["source_head.bias"] = to_named(src.bias, {src.out_features()});
  } else {
    const auto& emb = std::get<EmbeddingHead<float>>(state.head);
    ckpt.attributes["head"] = "embedding";
    ckpt.attributes["temperature"] = emb.temperature;
    ckpt.attributes["class_names"] = emb.class_names;
    ckpt.tensors["class_embeddings"] = to_named(emb.embeddings, {emb.embeddings.rows(), emb.embeddings.cols()});
    if (emb.projection.size() != 0) {
      ckpt.tensors["projection"] = to_named(emb.projection, {emb.projection.rows(), emb.projection.cols()});
    }
  }
  if (state.backbone) {
    ckpt.tensors.merge(state.backbone->parameters());
    ckpt.attributes["backbone"] = backbone_config_to_json(state.backbone->config());
  }
  write_checkpoint(path, ckpt);
}

ModelState load_state(const fs::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  ModelState st;
  const auto& attrs = ckpt.attributes;
  if (attrs.contains("prompt") && !attrs.at("prompt").is_null()) {
    st.prompt = VisualPrompt<float>::from_checkpoint(attrs.at("prompt"), ckpt.tensors);
  }
  const std::string kind = attrs.value("head", std::string("probe"));
  if (kind == "probe") {
    const auto& w = require_tensor(ckpt.tensors, "probe.weight");
    LinearProbe<float> probe;
    probe.weight = from_named<float>(w, w.shape.at(0), w.shape.at(1));
    probe.bias = from_named<float>(require_tensor(ckpt.tensors, "probe.bias"), w.shape.at(0), 1);
    st.head = probe;
  } else if (kind == "mapped") {
    MappedHead<float> m;
    const auto& w = require_tensor(ckpt.tensors, "source_head.weight");
    m.source.weight = from_named<float>(w, w.shape.at(0), w.shape.at(1));
    m.source.bias = from_named<float>(require_tensor(ckpt.tensors, "source_head.bias"), w.shape.at(0), 1);
    m.source.trainable = false;
    const auto& lm = attrs.at("label_map");
    m.map.mapping = lm.at("mapping").get<std::vector<Index>>();
    m.map.source_classes = lm.at("source_classes").get<Index>();
    m.map.method = lm.at("method").get<std::string>() == "flm" ? LabelMapMethod::kFrequency : LabelMapMethod::kRandom;
    m.map.seed = lm.value("seed", std::uint64_t{0});
    st.head = m;
  } else if (kind == "embedding") {
    st.head = load_embedding_head(ckpt);
  } else {
    throw CheckpointError("checkpoint: unknown head kind '" + kind + "'");
  }
  if (attrs.contains("backbone")) {
    st.backbone = Backbone::from_parameters(backbone_config_from_json(attrs.at("backbone")), ckpt.tensors);
  }
  return st;
}

namespace {

json record_to_json(const RunRecord& r) {
  return {{"best_epoch", r.best_epoch},
          {"best_val_acc", r.best_val_acc},
          {"best_test_acc", r.best_test_acc},
          {"final_val_acc", r.final_val_acc},
          {"final_test_acc", r.final_test_acc},
          {"trainable_params",
           {{"prompt", r.counts.prompt},
            {"probe", r.counts.probe},
            {"backbone", r.counts.backbone},
            {"total", r.counts.total()}}},
          {"backbone_hash_before", r.backbone_hash_before},
          {"backbone_hash_after", r.backbone_hash_after},
          {"wall_seconds", r.wall_seconds}};
}

json manifest(const RunConfig& cfg, const Resources& res) {
  const auto seed = cfg.spec.optim.seed;
  return {{"seed", seed},
          {"derived_streams",
           {{"shuffle", derive_seed(seed, "shuffle")},
            {"prompt_init", derive_seed(seed, "prompt_init")},
            {"rlm", derive_seed(seed, "rlm")}}},
          {"compiler", __VERSION__},
          {"cplusplus", __cplusplus},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"checkpoint_format_version", Checkpoint::kFormatVersion},
          {"backbone_sha256", backbone_hash(res.backbone.backbone)},
          {"dataset", {{"n", res.data.size()}, {"num_classes", res.data.num_classes()}}}};
}

}  // namespace

RunOutcome run_training(const RunConfig& cfg, const Resources& res, const fs::path& run_dir) {
  const TrainSpec spec = resolve_spec(cfg, res);
  fs::create_directories(run_dir);
  DirLock lock(run_dir);
  {
    std::ofstream out(run_dir / "config.json");
    out << to_json(cfg).dump(2) << '\n';
  }
  {
    std::ofstream out(run_dir / "manifest.json");
    out << manifest(cfg, res).dump(2) << '\n';
  }
  std::ofstream metrics(run_dir / "metrics.jsonl", std::ios::trunc);
  TrainInputs in;
  in.data = &res.data;
  in.backbone = &res.backbone.backbone;
  in.source_head = res.backbone.head ? &*res.backbone.head : nullptr;
  in.embedding_head = res.embeddings ? &*res.embeddings : nullptr;
  TrainResult result = train(spec, in, [&](const EpochMetrics& m) { metrics << metrics_line(m) << '\n' << std::flush; });
  save_state(run_dir / "best.ckpt", result.best_state, cfg);
  save_state(run_dir / "final.ckpt", result.final_state, cfg);
  {
    std::ofstream out(run_dir / "summary.json");
    out << record_to_json(result.record).dump(2) << '\n';
  }
  return {run_dir, std::move(result.record)};
}

double mean(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

std::string Table::to_text() const {
  std::vector<std::size_t> width(header.size(), 0);
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      out << (c ? "  " : "") << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
    }
    out << '\n';
  };
  line(header);
  std::vector<std::string> rule;
  for (auto w : width) rule.emplace_back(w, '-');
  line(rule);
  for (const auto& r : rows) line(r);
  return out.str();
}

std::string Table::to_csv() const {
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) out << (c ? "," : "") << cells[c];
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out.str();
}

void Table::write(const fs::path& stem) const {
  fs::create_directories(stem.parent_path());
  std::ofstream(fs::path(stem).concat(".txt")) << to_text();
  std::ofstream(fs::path(stem).concat(".csv")) << to_csv();
}

namespace {

std::vector<std::string> seed_header(const std::string& first, const std::vector<std::uint64_t>& seeds) {
  std::vector<std::string> h{first};
  for (auto s : seeds) h.push_back("seed_" + std::to_string(s));
  h.emplace_back("mean");
  return h;
}

std::vector<double> run_seeds(RunConfig cfg, const Resources& res, const std::vector<std::uint64_t>& seeds,
                              const fs::path& dir, const std::string& label, std::vector<std::string>& row) {
  std::vector<double> accs;
  for (auto seed : seeds) {
    cfg.spec.optim.seed = seed;
    const auto outcome = run_training(cfg, res, dir / (label + "-s" + std::to_string(seed)));
    accs.push_back(outcome.record.best_test_acc);
    row.push_back(format_number(outcome.record.best_test_acc));
  }
  row.push_back(format_number(mean(accs)));
  return accs;
}

}  // namespace

Table compare_strategies(const RunConfig& base, const Resources& res, const std::vector<Strategy>& strategies,
                         const std::vector<std::uint64_t>& seeds, const fs::path& dir) {
  Table t;
  t.header = seed_header("strategy", seeds);
  for (auto s : strategies) {
    RunConfig cfg = base;
    cfg.spec.plan.strategy = s;
    std::vector<std::string> row{to_string(s)};
    run_seeds(cfg, res, seeds, dir, to_string(s), row);
    t.rows.push_back(std::move(row));
  }
  t.write(dir / "comparison");
  return t;
}

Table ablate_loss(const RunConfig& base, const Resources& res, const std::vector<double>& alphas,
                  const std::vector<std::uint64_t>& seeds, const fs::path& dir) {
  Table t;
  t.header = seed_header("alpha", seeds);
  t.header.emplace_back("delta_vs_ce");
  std::vector<double> grid{0.0};
  for (double a : alphas) {
    if (a != 0.0) grid.push_back(a);
  }
  double ce_mean = 0.0;
  for (double a : grid) {
    RunConfig cfg = base;
    cfg.spec.plan.strategy = Strategy::kMix;
    cfg.spec.loss.alpha = a;
    validate(cfg.spec.loss);
    std::vector<std::string> row{format_number(a)};
    const double m = mean(run_seeds(cfg, res, seeds, dir, "alpha" + format_number(a), row));
    if (a == 0.0) ce_mean = m;
    row.push_back(format_number(m - ce_mean));
    t.rows.push_back(std::move(row));
  }
  t.write(dir / "ablation_loss");
  return t;
}

Table ablate_init(const RunConfig& base, const Resources& res, const std::vector<std::uint64_t>& seeds,
                  const fs::path& dir) {
  Table t;
  t.header = seed_header("init", seeds);
  for (auto init : {PromptInit::kConstant, PromptInit::kUniform}) {
    RunConfig cfg = base;
    cfg.spec.prompt_init = init;
    std::vector<std::string> row{to_string(init)};
    run_seeds(cfg, res, seeds, dir, "init-" + to_string(init), row);
    t.rows.push_back(std::move(row));
  }
  t.write(dir / "ablation_init");
  return t;
}

}  // namespace movl
