// movl: command-line driver for data generation, pretraining, training and
// the comparison/ablation grids.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "movl/backbone.hpp"
#include "movl/config.hpp"
#include "movl/data.hpp"
#include "movl/error.hpp"
#include "movl/experiment.hpp"
#include "movl/verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace movl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct ConfigFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<double> alpha;
  std::optional<std::size_t> epochs;
  std::optional<std::string> init;
  std::optional<std::string> out;

  void add_to(CLI::App* cmd, bool with_strategy = true) {
    cmd->add_option("--config", config, "run config (JSON)")->required();
    cmd->add_option("--seed", seed, "master seed");
    if (with_strategy) cmd->add_option("--strategy", strategy, "lp, vp, lp_then_vp, lp_then_mix, mix or ff");
    cmd->add_option("--alpha", alpha, "joint-loss alpha in [0,1]");
    cmd->add_option("--epochs", epochs, "total epochs");
    cmd->add_option("--init", init, "prompt init: epsilon or random");
    cmd->add_option("--out", out, "output root (MOVL_OUT takes precedence)");
  }

  // Flags are written into the JSON before validation so errors carry the key path.
  RunConfig load() const {
    std::ifstream in(config);
    if (!in) throw ConfigValidationError({"config file not found: " + config});
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigValidationError({config + ": not valid JSON: " + e.what()});
    }
    if (!j.is_object()) throw ConfigValidationError({config + ": top level must be an object"});
    if (seed) j["seed"] = *seed;
    if (strategy) j["strategy"] = *strategy;
    if (alpha) j["loss"]["alpha"] = *alpha;
    if (epochs) j["epochs"] = *epochs;
    if (init) j["prompt"]["init"] = *init;
    if (out) j["output_root"] = *out;
    return parse_run_config(j);
  }
};

template <typename T>
std::vector<T> split_list(const std::string& text, T (*parse)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse(item));
  }
  if (out.empty()) throw ConfigError("empty list: '" + text + "'");
  return out;
}

std::uint64_t parse_seed(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("not a seed: '" + s + "'");
}

double parse_alpha(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("not a number: '" + s + "'");
}

Strategy parse_strategy(const std::string& s) { return strategy_from_string(s); }

int cmd_gen_data(const std::string& domain, std::size_t classes, std::size_t per_class, std::size_t size,
                 std::uint64_t seed, std::optional<double> noise, const std::string& out) {
  SyntheticDomainSpec spec;
  if (domain == "source") {
    spec = SyntheticDomainSpec::source(classes, seed);
  } else if (domain == "target") {
    spec = SyntheticDomainSpec::target(classes, seed);
  } else {
    throw ConfigError("--domain must be source or target (got '" + domain + "')");
  }
  spec.image_size = size;
  if (noise) spec.noise_sigma = *noise;
  const Dataset d = generate_synthetic(spec, per_class, out);
  json summary{{"path", out}, {"n", d.size()}, {"num_classes", d.num_classes()}};
  for (const auto& [name, range] : d.meta().splits) summary["splits"][name] = range.length;
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_pretrain(const std::string& data_dir, const PretrainConfig& pcfg, std::size_t input_size,
                 const std::string& out) {
  const Dataset source = load_dataset(data_dir);
  BackboneConfig arch;
  arch.in_channels = static_cast<Index>(source.meta().c);
  arch.input_size = static_cast<Index>(input_size);
  const PretrainResult r = pretrain_backbone(source, arch, pcfg);
  const json extra{{"pretrain",
                    {{"seed", pcfg.seed},
                     {"epochs", pcfg.epochs},
                     {"val_accuracy", r.val_accuracy},
                     {"source_classes", source.num_classes()}}}};
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_backbone(out, r.backbone, &r.head, extra);
  std::cout << json{{"checkpoint", out},
                    {"val_accuracy", r.val_accuracy},
                    {"backbone_sha256", backbone_hash(r.backbone)}}
                   .dump(2)
            << '\n';
  return 0;
}

int cmd_train(const ConfigFlags& flags) {
  const RunConfig cfg = flags.load();
  const Resources res = load_resources(cfg);
  const std::string label = to_string(cfg.spec.plan.strategy) + "-s" + std::to_string(cfg.spec.optim.seed);
  const fs::path dir = create_run_dir(output_root(cfg), label);
  const RunOutcome o = run_training(cfg, res, dir);
  std::cout << json{{"run_dir", dir.string()},
                    {"best_epoch", o.record.best_epoch},
                    {"best_val_acc", o.record.best_val_acc},
                    {"best_test_acc", o.record.best_test_acc},
                    {"trainable_params", o.record.counts.total()}}
                   .dump(2)
            << '\n';
  return 0;
}

int cmd_eval(const std::string& run, const std::string& which, const std::string& split) {
  if (which != "best" && which != "final") throw ConfigError("--which must be best or final");
  const fs::path dir(run);
  const RunConfig cfg = load_run_config(dir / "config.json");
  const Resources res = load_resources(cfg);
  const TrainSpec spec = resolve_spec(cfg, res);
  if (!res.data.has_split(split)) throw ConfigError("dataset has no split '" + split + "'");
  const ModelState st = load_state(dir / (which + ".ckpt"));
  const Backbone& encoder = st.backbone ? *st.backbone : res.backbone.backbone;
  const EvalResult r = evaluate(encoder, st.prompt ? &*st.prompt : nullptr, st.head, res.data, split, spec.norm);
  json j{{"run", run}, {"checkpoint", which}, {"split", split}, {"accuracy", r.accuracy}, {"per_class", r.per_class}};
  std::vector<std::vector<int>> confusion(r.confusion.rows());
  for (Index i = 0; i < r.confusion.rows(); ++i) {
    for (Index k = 0; k < r.confusion.cols(); ++k) confusion[i].push_back(r.confusion(i, k));
  }
  j["confusion"] = confusion;
  std::cout << j.dump(2) << '\n';
  return 0;
}

fs::path grid_dir(const RunConfig& cfg, const std::string& label) { return create_run_dir(output_root(cfg), label); }

int cmd_compare(const ConfigFlags& flags, const std::string& strategies, const std::string& seeds) {
  const RunConfig cfg = flags.load();
  const auto strat = split_list<Strategy>(strategies, parse_strategy);
  const auto seed_list = split_list<std::uint64_t>(seeds, parse_seed);
  const Resources res = load_resources(cfg);
  const fs::path dir = grid_dir(cfg, "compare");
  const Table t = compare_strategies(cfg, res, strat, seed_list, dir);
  std::cout << t.to_text() << "written to " << (dir / "comparison.csv").string() << '\n';
  return 0;
}

int cmd_ablate_loss(const ConfigFlags& flags, const std::string& alphas, const std::string& seeds) {
  const RunConfig cfg = flags.load();
  const auto alpha_list = split_list<double>(alphas, parse_alpha);
  for (double a : alpha_list) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("--alphas: alpha must lie in [0,1] (got " + format_number(a) + ")");
  }
  const auto seed_list = split_list<std::uint64_t>(seeds, parse_seed);
  const Resources res = load_resources(cfg);
  const fs::path dir = grid_dir(cfg, "ablate-loss");
  const Table t = ablate_loss(cfg, res, alpha_list, seed_list, dir);
  std::cout << t.to_text() << "written to " << (dir / "ablation_loss.csv").string() << '\n';
  return 0;
}

int cmd_ablate_init(const ConfigFlags& flags, const std::string& seeds) {
  const RunConfig cfg = flags.load();
  const auto seed_list = split_list<std::uint64_t>(seeds, parse_seed);
  const Resources res = load_resources(cfg);
  const fs::path dir = grid_dir(cfg, "ablate-init");
  const Table t = ablate_init(cfg, res, seed_list, dir);
  std::cout << t.to_text() << "written to " << (dir / "ablation_init.csv").string() << '\n';
  return 0;
}

int cmd_gradcheck(const ConfigFlags& flags, const std::string& dtype, std::size_t entries, std::size_t batch) {
  if (dtype != "float32" && dtype != "float64" && dtype != "both") {
    throw ConfigError("--dtype must be float32, float64 or both");
  }
  const RunConfig cfg = flags.load();
  const Resources res = load_resources(cfg);
  const TrainSpec spec = resolve_spec(cfg, res);
  const auto seed = spec.optim.seed;
  const Index k = static_cast<Index>(res.data.num_classes());
  const JointProblem problem = make_joint_problem(res.backbone.backbone, spec.prompt, k,
                                                  static_cast<Index>(batch), spec.loss, derive_seed(seed, "gradcheck"));
  json report{{"config", to_json(cfg)}};
  double worst = 0.0;
  bool pass = true;
  if (dtype != "float64") {
    const auto r = gradcheck_joint<float>(problem, entries, seed);
    report["float32"] = r.to_json();
    pass = pass && r.max_rel_err() <= 1e-3;
    worst = std::max(worst, r.max_rel_err());
  }
  if (dtype != "float32") {
    const auto r = gradcheck_joint<double>(problem, entries, seed);
    report["float64"] = r.to_json();
    pass = pass && r.max_rel_err() <= 1e-6;
  }
  const DetachEvidence detach = certify_detach(problem, entries, seed);
  report["detach"] = detach.to_json();
  report["pass"] = pass && detach.pass;
  const fs::path dir = grid_dir(cfg, "gradcheck");
  std::ofstream(dir / "gradcheck.json") << report.dump(2) << '\n';
  std::cout << report.dump(2) << '\n';
  if (!(pass && detach.pass)) {
    std::cerr << "gradcheck failed (max float32 rel err " << worst << ")\n";
    return kExitRuntime;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint visual prompt and linear probe training over a frozen encoder"};
  app.require_subcommand(1);

  std::string domain = "target", out;
  std::size_t classes = 7, per_class = 220, size = 64;
  std::uint64_t seed = 0;
  std::optional<double> noise;
  auto* gen = app.add_subcommand("gen-data", "render a synthetic source or target dataset");
  gen->add_option("--domain", domain, "source or target")->capture_default_str();
  gen->add_option("--classes", classes, "number of classes (<= 10)")->capture_default_str();
  gen->add_option("--per-class", per_class, "images per class across all splits")->capture_default_str();
  gen->add_option("--size", size, "image side in pixels")->capture_default_str();
  gen->add_option("--seed", seed, "render seed")->capture_default_str();
  gen->add_option("--noise", noise, "Gaussian noise sigma (target default 0.1)");
  gen->add_option("--out", out, "dataset directory")->required();

  std::string pre_data, pre_out;
  PretrainConfig pcfg;
  std::size_t input_size = 64;
  auto* pre = app.add_subcommand("pretrain", "pretrain the toy encoder and source head");
  pre->add_option("--data", pre_data, "source dataset directory")->required();
  pre->add_option("--epochs", pcfg.epochs)->capture_default_str();
  pre->add_option("--batch-size", pcfg.batch_size)->capture_default_str();
  pre->add_option("--lr", pcfg.lr)->capture_default_str();
  pre->add_option("--warmup", pcfg.warmup_steps, "warmup steps")->capture_default_str();
  pre->add_option("--seed", pcfg.seed)->capture_default_str();
  pre->add_option("--min-accuracy", pcfg.min_accuracy, "validation accuracy gate")->capture_default_str();
  pre->add_option("--input-size", input_size, "encoder input side")->capture_default_str();
  pre->add_option("--out", pre_out, "checkpoint path")->required();

  ConfigFlags train_flags;
  auto* tr = app.add_subcommand("train", "train one strategy from a config");
  train_flags.add_to(tr);

  std::string run, which = "best", split = "test";
  auto* ev = app.add_subcommand("eval", "evaluate a saved run");
  ev->add_option("--run", run, "run directory")->required();
  ev->add_option("--which", which, "best or final")->capture_default_str();
  ev->add_option("--split", split)->capture_default_str();

  ConfigFlags cmp_flags;
  std::string strategies = "lp,lp_then_vp,lp_then_mix,mix", seeds = "1,2,3";
  auto* cmp = app.add_subcommand("compare", "strategy x seed accuracy grid");
  cmp_flags.add_to(cmp, false);
  cmp->add_option("--strategies", strategies)->capture_default_str();
  cmp->add_option("--seeds", seeds)->capture_default_str();

  ConfigFlags abl_flags;
  std::string alphas = "0.25,0.5,1.0";
  auto* abl = app.add_subcommand("ablate-loss", "mix accuracy for each alpha against alpha = 0");
  abl_flags.add_to(abl, false);
  abl->add_option("--alphas", alphas)->capture_default_str();
  abl->add_option("--seeds", seeds)->capture_default_str();

  ConfigFlags init_flags;
  auto* ini = app.add_subcommand("ablate-init", "epsilon-constant vs random prompt initialization");
  init_flags.add_to(ini);
  ini->add_option("--seeds", seeds)->capture_default_str();

  ConfigFlags gc_flags;
  std::string dtype = "both";
  std::size_t entries = 64, batch = 4;
  auto* gc = app.add_subcommand("gradcheck", "autodiff vs finite differences and detach certification");
  gc_flags.add_to(gc);
  gc->add_option("--dtype", dtype, "float32, float64 or both")->capture_default_str();
  gc->add_option("--entries", entries, "sampled entries per group")->capture_default_str();
  gc->add_option("--batch", batch)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(domain, classes, per_class, size, seed, noise, out);
    if (*pre) return cmd_pretrain(pre_data, pcfg, input_size, pre_out);
    if (*tr) return cmd_train(train_flags);
    if (*ev) return cmd_eval(run, which, split);
    if (*cmp) return cmd_compare(cmp_flags, strategies, seeds);
    if (*abl) return cmd_ablate_loss(abl_flags, alphas, seeds);
    if (*ini) return cmd_ablate_init(init_flags, seeds);
    if (*gc) return cmd_gradcheck(gc_flags, dtype, entries, batch);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
