#pragma once

// Command-line front end: run configs, flag overrides and the subcommands.
//
//   ovvad gen-synthetic | train | synth | finetune | eval | gradcheck | report
//
// Every command accepts --config (a RunConfig JSON) plus --seed, --sigma,
// --lambda, --epochs and --out, and echoes its resolved configuration into the
// output directory as <command>_config.json.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ovvad/data/synthetic.hpp"
#include "ovvad/error.hpp"
#include "ovvad/eval.hpp"
#include "ovvad/model/checkpoint.hpp"
#include "ovvad/nas.hpp"
#include "ovvad/train.hpp"
#include "ovvad/verify.hpp"

namespace ovvad::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr double kGradCheckTolerance = 1e-3;

struct Paths {
  std::optional<fs::path> manifest, catalog, knowledge, snippets, checkpoint, pseudo;
  fs::path out = "out";
};

struct RunConfig {
  Paths paths;
  train::TrainConfig train;
  data::SyntheticConfig synthetic;
  std::size_t per_category = 40;  // pseudo videos per novel category
  std::optional<std::uint64_t> seed;
  std::size_t gradcheck_instances = 20;

  // The run seed, when set, drives every random stream of the command.
  void apply_seed() {
    if (!seed) return;
    train.seed = *seed;
    synthetic.seed = *seed;
  }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

using train::detail::read_field;
using train::detail::reject_unknown;

inline void read_range(const json& obj, const char* key, data::LengthRange& r, const std::string& where) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number_unsigned() || !v[1].is_number_unsigned()) {
    throw ConfigError(where + "." + key + " must be [min, max]");
  }
  r = {v[0].get<std::size_t>(), v[1].get<std::size_t>()};
}

inline void read_path(const json& obj, const char* key, std::optional<fs::path>& out, const fs::path& base) {
  if (!obj.contains(key) || obj.at(key).is_null()) return;
  if (!obj.at(key).is_string()) throw ConfigError(std::string("paths.") + key + " must be a string");
  fs::path p = obj.at(key).get<std::string>();
  out = (p.is_absolute() ? p : base / p).lexically_normal();
}

inline json opt_path(const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); }

}  // namespace detail

inline data::SyntheticConfig synthetic_config_from_json(const json& j) {
  data::SyntheticConfig c;
  const std::string w = "synthetic";
  detail::reject_unknown(j,
                         {"feature_dim", "base_classes", "novel_classes", "train_videos_per_class",
                          "test_videos_per_class", "normal_train", "normal_test", "separation", "noise",
                          "normal_mean_norm", "video_length", "segment_length", "text_noise", "phrases_per_group",
                          "informative_knowledge", "snippets_per_novel_class", "snippet_length", "stride", "seed"},
                         w);
  detail::read_field(j, "feature_dim", c.feature_dim, w);
  detail::read_field(j, "base_classes", c.base_classes, w);
  detail::read_field(j, "novel_classes", c.novel_classes, w);
  detail::read_field(j, "train_videos_per_class", c.train_videos_per_class, w);
  detail::read_field(j, "test_videos_per_class", c.test_videos_per_class, w);
  detail::read_field(j, "normal_train", c.normal_train, w);
  detail::read_field(j, "normal_test", c.normal_test, w);
  detail::read_field(j, "separation", c.separation, w);
  detail::read_field(j, "noise", c.noise, w);
  detail::read_field(j, "normal_mean_norm", c.normal_mean_norm, w);
  detail::read_range(j, "video_length", c.video_length, w);
  detail::read_range(j, "segment_length", c.segment_length, w);
  detail::read_field(j, "text_noise", c.text_noise, w);
  detail::read_field(j, "phrases_per_group", c.phrases_per_group, w);
  detail::read_field(j, "informative_knowledge", c.informative_knowledge, w);
  detail::read_field(j, "snippets_per_novel_class", c.snippets_per_novel_class, w);
  detail::read_range(j, "snippet_length", c.snippet_length, w);
  detail::read_field(j, "stride", c.stride, w);
  detail::read_field(j, "seed", c.seed, w);
  c.validate();
  return c;
}

inline json to_json(const data::SyntheticConfig& c) {
  auto range = [](data::LengthRange r) { return json::array({r.min, r.max}); };
  return {{"feature_dim", c.feature_dim},
          {"base_classes", c.base_classes},
          {"novel_classes", c.novel_classes},
          {"train_videos_per_class", c.train_videos_per_class},
          {"test_videos_per_class", c.test_videos_per_class},
          {"normal_train", c.normal_train},
          {"normal_test", c.normal_test},
          {"separation", c.separation},
          {"noise", c.noise},
          {"normal_mean_norm", c.normal_mean_norm},
          {"video_length", range(c.video_length)},
          {"segment_length", range(c.segment_length)},
          {"text_noise", c.text_noise},
          {"phrases_per_group", c.phrases_per_group},
          {"informative_knowledge", c.informative_knowledge},
          {"snippets_per_novel_class", c.snippets_per_novel_class},
          {"snippet_length", range(c.snippet_length)},
          {"stride", c.stride},
          {"seed", c.seed}};
}

// Relative paths are resolved against `base` (the config file's directory).
inline RunConfig run_config_from_json(const json& j, const fs::path& base = {}) {
  RunConfig c;
  detail::reject_unknown(j, {"paths", "train", "synthetic", "nas", "gradcheck", "seed"}, "config");
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    detail::reject_unknown(p, {"manifest", "catalog", "knowledge", "snippets", "checkpoint", "pseudo", "out"},
                           "paths");
    detail::read_path(p, "manifest", c.paths.manifest, base);
    detail::read_path(p, "catalog", c.paths.catalog, base);
    detail::read_path(p, "knowledge", c.paths.knowledge, base);
    detail::read_path(p, "snippets", c.paths.snippets, base);
    detail::read_path(p, "checkpoint", c.paths.checkpoint, base);
    detail::read_path(p, "pseudo", c.paths.pseudo, base);
    std::optional<fs::path> out;
    detail::read_path(p, "out", out, base);
    if (out) c.paths.out = *out;
  }
  if (j.contains("train")) c.train = train::train_config_from_json(j["train"]);
  if (j.contains("synthetic")) c.synthetic = synthetic_config_from_json(j["synthetic"]);
  if (j.contains("nas")) {
    detail::reject_unknown(j["nas"], {"per_category"}, "nas");
    detail::read_field(j["nas"], "per_category", c.per_category, "nas");
    if (c.per_category == 0) throw ConfigError("nas.per_category must be >= 1");
  }
  if (j.contains("gradcheck")) {
    detail::reject_unknown(j["gradcheck"], {"instances"}, "gradcheck");
    detail::read_field(j["gradcheck"], "instances", c.gradcheck_instances, "gradcheck");
  }
  if (j.contains("seed") && !j["seed"].is_null()) {
    std::uint64_t s = 0;
    detail::read_field(j, "seed", s, "config");
    c.seed = s;
  }
  return c;
}

inline json to_json(const RunConfig& c) {
  return {{"paths",
           {{"manifest", detail::opt_path(c.paths.manifest)},
            {"catalog", detail::opt_path(c.paths.catalog)},
            {"knowledge", detail::opt_path(c.paths.knowledge)},
            {"snippets", detail::opt_path(c.paths.snippets)},
            {"checkpoint", detail::opt_path(c.paths.checkpoint)},
            {"pseudo", detail::opt_path(c.paths.pseudo)},
            {"out", c.paths.out.string()}}},
          {"train", train::to_json(c.train)},
          {"synthetic", to_json(c.synthetic)},
          {"nas", {{"per_category", c.per_category}}},
          {"gradcheck", {{"instances", c.gradcheck_instances}}},
          {"seed", c.seed ? json(*c.seed) : json(nullptr)}};
}

inline RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("config not found: " + path.string());
  return run_config_from_json(model::detail::read_json(path), fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------------------
// Commands

// Manifest plus the catalog and knowledge bank it points to (or the overrides).
struct Corpus {
  data::Manifest manifest;
  model::ClassCatalog catalog;
  model::KnowledgeBank knowledge;
};

inline Corpus load_corpus(const RunConfig& cfg) {
  if (!cfg.paths.manifest) throw ConfigError("paths.manifest is required for this command");
  Corpus c;
  c.manifest = data::load_manifest(*cfg.paths.manifest);
  c.catalog = model::load_catalog(cfg.paths.catalog.value_or(c.manifest.class_catalog_path));
  c.knowledge = model::load_knowledge(cfg.paths.knowledge.value_or(c.manifest.knowledge_bank_path));
  c.manifest.validate_labels(c.catalog);
  if (c.catalog.dim() != c.manifest.feature_dim || c.knowledge.embeddings.cols() != c.manifest.feature_dim) {
    throw DataError("catalog, knowledge bank and features must share one dimension");
  }
  return c;
}

inline void echo_config(const RunConfig& cfg, const std::string& command) {
  json j = to_json(cfg);
  j["command"] = command;
  model::detail::write_json(cfg.paths.out / (command + "_config.json"), j);
}

inline train::EpochCallback epoch_printer(std::ostream& out, const char* stage, std::size_t epochs) {
  return [&out, stage, epochs](const train::EpochLog& e) {
    out << stage << " epoch " << e.epoch << "/" << epochs << "  loss " << std::setprecision(6) << e.mean.total
        << '\n';
  };
}

// Saves the last finite parameters next to the outputs and rethrows.
template <class Fn>
auto guard_divergence(const RunConfig& cfg, std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const train::DivergenceError& e) {
    const auto path = cfg.paths.out / "last_finite.ovck";
    model::save_checkpoint(e.last_finite(), path);
    err << "last finite parameters written to " << path.string() << '\n';
    throw;
  }
}

inline fs::path checkpoint_or(const RunConfig& cfg, const char* fallback) {
  return cfg.paths.checkpoint.value_or(cfg.paths.out / fallback);
}

inline int cmd_gen_synthetic(const RunConfig& cfg, std::ostream& out) {
  auto corpus = data::gen_synthetic(cfg.synthetic, cfg.paths.out);
  out << "wrote " << corpus.manifest.videos.size() << " videos to " << corpus.manifest_path.string() << '\n';
  return 0;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto c = load_corpus(cfg);
  auto r = guard_divergence(cfg, err, [&] {
    return train::train_stage1(c.manifest, c.catalog, c.knowledge, cfg.train,
                               epoch_printer(out, "stage1", cfg.train.stage1.epochs));
  });
  model::save_checkpoint(r.params, cfg.paths.out / "stage1.ovck");
  train::write_history_csv(r.history, cfg.paths.out / "loss_stage1.csv");
  out << "wrote " << (cfg.paths.out / "stage1.ovck").string() << '\n';
  return 0;
}

inline int cmd_synth(const RunConfig& cfg, std::ostream& out) {
  const auto c = load_corpus(cfg);
  if (!cfg.paths.snippets) throw ConfigError("paths.snippets is required for synth");
  const auto bank = nas::load_snippet_bank(*cfg.paths.snippets);
  bank.validate(c.catalog);
  const auto pool = nas::load_normal_pool(c.manifest);
  auto rng = train::detail::stage_rng(cfg.train.seed, 3);
  const auto set =
      nas::build_pseudo_set(pool.sources, bank, bank.categories(), cfg.per_category, rng, cfg.train.max_length);
  const auto dir = cfg.paths.pseudo.value_or(cfg.paths.out / "pseudo");
  nas::save_pseudo_set(set, dir);
  out << "wrote " << set.size() << " pseudo videos to " << dir.string() << '\n';
  return 0;
}

inline int cmd_finetune(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto c = load_corpus(cfg);
  const auto init = model::load_checkpoint(checkpoint_or(cfg, "stage1.ovck"));
  const auto pseudo = nas::load_pseudo_set(cfg.paths.pseudo.value_or(cfg.paths.out / "pseudo"));
  auto r = guard_divergence(cfg, err, [&] {
    return train::finetune_stage2(init, pseudo, c.manifest, c.catalog, c.knowledge, cfg.train,
                                  epoch_printer(out, "stage2", cfg.train.stage2.epochs));
  });
  model::save_checkpoint(r.params, cfg.paths.out / "stage2.ovck");
  train::write_history_csv(r.history, cfg.paths.out / "loss_stage2.csv", true);
  out << "wrote " << (cfg.paths.out / "stage2.ovck").string() << '\n';
  return 0;
}

inline int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const auto ckpt = checkpoint_or(cfg, "stage1.ovck");
  const auto params = model::load_checkpoint(ckpt);
  const auto c = load_corpus(cfg);
  const auto report = eval::evaluate(params, c.manifest, c.catalog, cfg.train.model_config(), cfg.train.thread_count());
  eval::write_report(report, cfg.paths.out);
  out << eval::render_table({{ckpt.stem().string(), report}});
  if (!report.excluded.empty()) out << report.excluded.size() << " video(s) without frame labels excluded\n";
  return 0;
}

inline int cmd_gradcheck(const RunConfig& cfg, std::ostream& out) {
  verify::NamedError worst{"none", 0.0};
  for (std::size_t i = 0; i < cfg.gradcheck_instances; ++i) {
    for (auto& e : verify::full_suite(cfg.train.seed * 1000 + i, cfg.train.stage2.lambda))
      if (!(e.error <= worst.error)) worst = std::move(e);
  }
  out << "max relative error " << std::scientific << std::setprecision(3) << worst.error << std::defaultfloat
      << " (" << worst.name << ") over " << cfg.gradcheck_instances << " instances\n";
  if (!(worst.error <= kGradCheckTolerance)) {
    out << "gradient check failed (tolerance " << kGradCheckTolerance << ")\n";
    return static_cast<int>(ExitCode::kNumerical);
  }
  return 0;
}

// Run names are the directories holding each report.json.
inline int cmd_report(const RunConfig& cfg, const std::vector<fs::path>& reports, std::ostream& out) {
  if (reports.empty()) throw ConfigError("report needs at least one report.json");
  std::vector<std::pair<std::string, eval::EvalReport>> runs;
  for (const auto& p : reports) {
    auto name = fs::absolute(p).parent_path().filename().string();
    runs.emplace_back(name, eval::report_from_json(model::detail::read_json(p)));
  }
  const auto table = eval::render_table(runs);
  out << table;
  std::ofstream(cfg.paths.out / "table.txt") << table;
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> sigma, lambda;
  std::optional<std::size_t> epochs;
  std::optional<std::string> out, manifest, checkpoint, snippets, pseudo;
  std::vector<std::string> reports;
};

inline RunConfig resolve(const Overrides& o, const std::string& command) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  cfg.apply_seed();
  if (o.sigma) cfg.train.sigma = *o.sigma;
  if (o.lambda) cfg.train.stage2.lambda = *o.lambda;
  if (o.epochs) (command == "finetune" ? cfg.train.stage2.epochs : cfg.train.stage1.epochs) = *o.epochs;
  if (o.out) cfg.paths.out = *o.out;
  if (o.manifest) cfg.paths.manifest = fs::path(*o.manifest);
  if (o.checkpoint) cfg.paths.checkpoint = fs::path(*o.checkpoint);
  if (o.snippets) cfg.paths.snippets = fs::path(*o.snippets);
  if (o.pseudo) cfg.paths.pseudo = fs::path(*o.pseudo);
  cfg.train.validate();
  cfg.synthetic.validate();
  cfg.paths.out = fs::absolute(cfg.paths.out);
  fs::create_directories(cfg.paths.out);
  return cfg;
}

inline int dispatch(const std::string& command, const RunConfig& cfg, const Overrides& o, std::ostream& out,
                    std::ostream& err) {
  if (command == "gen-synthetic") return cmd_gen_synthetic(cfg, out);
  if (command == "train") return cmd_train(cfg, out, err);
  if (command == "synth") return cmd_synth(cfg, out);
  if (command == "finetune") return cmd_finetune(cfg, out, err);
  if (command == "eval") return cmd_eval(cfg, out);
  if (command == "gradcheck") return cmd_gradcheck(cfg, out);
  std::vector<fs::path> reports(o.reports.begin(), o.reports.end());
  return cmd_report(cfg, reports, out);
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Open-vocabulary video anomaly detection on precomputed features"};
  app.require_subcommand(1);
  Overrides o;
  const std::vector<std::pair<const char*, const char*>> commands = {
      {"gen-synthetic", "write a synthetic corpus"},
      {"train", "stage-1 weakly supervised training"},
      {"synth", "build pseudo novel-anomaly videos from a snippet bank"},
      {"finetune", "stage-2 fine-tuning on pseudo and base anomalies"},
      {"eval", "evaluate a checkpoint on the test split"},
      {"gradcheck", "finite-difference check of both training losses"},
      {"report", "render a table from report.json files"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "RunConfig JSON");
    sub->add_option("--seed", o.seed, "run seed");
    sub->add_option("--sigma", o.sigma, "temporal adapter bandwidth");
    sub->add_option("--lambda", o.lambda, "weight of the base term in fine-tuning");
    sub->add_option("--epochs", o.epochs, "epochs of the stage this command runs");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--manifest", o.manifest, "corpus manifest");
    sub->add_option("--checkpoint", o.checkpoint, "input checkpoint");
    sub->add_option("--snippets", o.snippets, "snippet bank directory");
    sub->add_option("--pseudo", o.pseudo, "pseudo-set directory");
    if (std::string(name) == "report") sub->add_option("reports", o.reports, "report.json files");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // app.exit prints help for --help and the message otherwise.
    return app.exit(e, out, err) == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = resolve(o, command);
    echo_config(cfg, command);
    return dispatch(command, cfg, o, out, err);
  } catch (const Error& e) {
    err << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
}

}  // namespace ovvad::cli
