#include "xmlwf/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "xmlwf/config.hpp"
#include "xmlwf/dataset.hpp"
#include "xmlwf/error.hpp"
#include "xmlwf/explain.hpp"
#include "xmlwf/report.hpp"
#include "xmlwf/search.hpp"
#include "xmlwf/util.hpp"

namespace xmlwf {

namespace {

using json = nlohmann::json;

struct GlobalOptions {
  fs::path config_dir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> run_id_seed;
  bool json_output = false;
  std::vector<std::string> sets;
  unsigned workers = 1;
  std::optional<fs::path> root_override;
};

int exit_for(const Error& e) {
  switch (e.code()) {
    case Errc::ConfigError:
    case Errc::BadSlug:
      return exit_code::config_error;
    case Errc::NotFound:
      return exit_code::not_found;
    case Errc::HashMismatch:
    case Errc::BadMagic:
    case Errc::UnsupportedVersion:
    case Errc::TruncatedBlob:
      return exit_code::integrity;
    case Errc::EmptySelection:
      return exit_code::empty_selection;
    default:
      return exit_code::run_failed;
  }
}

std::string relative_to_root(const fs::path& root, const fs::path& path) {
  return path.lexically_relative(root).generic_string();
}

void flatten(const ConfigDoc& node, const std::string& prefix, json& out) {
  for (const auto& [key, value] : node.items()) {
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      flatten(value, name, out);
    } else {
      out[name] = json::parse(value.dump());
    }
  }
}

LayeredConfig load_config(const GlobalOptions& g, Stage stage) {
  return load_layered_config(g.config_dir, stage, g.sets, g.seed, g.root_override);
}

// ---------------------------------------------------------------- init

constexpr const char* kConstantsTemplate = R"(# Experiment constants. These stay fixed for the whole experiment; change
# the stage files (or pass --set) to start a new sub-experiment instead.

# Store root, relative to this directory (XMLWF_ROOT overrides it).
store_root = "store"
experiment = "@NAME@"
description = "Synthetic demo: y = 1 iff x1 + x2 + x3 + noise > 0"

# CSV with a header row; the target column holds 0/1 labels.
data_path = "data/demo.csv"
target_name = "y"

# Seeds the holdout split, CV folds, estimators and SHAP sampling.
seed = 42
test_fraction = 0.2
)";

constexpr const char* kTrainTemplate = R"(# Train stage: pipeline, base hyperparameters and search space.

[pipeline]
# Applied in order: mean_impute, standardize.
transformers = ["mean_impute", "standardize"]
# logistic_regression | linear_svm | random_forest | gradient_boosting
estimator = "logistic_regression"

[estimator]
# Base hyperparameters; search candidates override them.
learning_rate = 0.1
max_iter = 500
tol = 1e-6
l2 = 1e-4

[search]
strategy = "grid"          # grid | random
k = 5
selection_metric = "roc_auc"
metrics = ["accuracy", "balanced_accuracy", "f1", "roc_auc"]

[search.grid]
l2 = [1e-4, 1e-2, 1.0]

# Random search instead: set strategy = "random" and use
# [search.random]
# n_samples = 10
# l2 = { kind = "log_uniform", lo = 1e-5, hi = 1.0 }
# max_iter = { kind = "choice", values = [200, 500] }
)";

constexpr const char* kTestTemplate = R"(# Test stage: metrics computed on the held-out snapshot.
metrics = ["accuracy", "balanced_accuracy", "f1", "roc_auc"]
)";

constexpr const char* kExplainTemplate = R"(# Explain stage.

# Background rows sampled from the training snapshot.
background_m = 100
# Bars per chart.
top_k = 20
# Exact Shapley values up to this many features, Kernel SHAP above.
exact_limit = 12
# Coalition budget for Kernel SHAP.
max_coalitions = 2048
)";

int cmd_init(const fs::path& dir, const std::string& name, std::ostream& out, std::ostream& err) {
  if (!is_valid_slug(name)) {
    err << "error: invalid experiment name '" << name << "'\n";
    return exit_code::config_error;
  }
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec)) {
      err << "error: " << dir.string() << " exists and is not a directory\n";
      return exit_code::io_error;
    }
    if (!fs::is_empty(dir, ec)) {
      err << "error: " << dir.string() << " is not empty\n";
      return exit_code::not_empty;
    }
  }
  try {
    for (const char* sub : {"stages", "data", "store"}) {
      fs::create_directories(dir / sub, ec);
      if (ec) throw Error(Errc::StoreIO, "cannot create " + (dir / sub).string() + ": " + ec.message());
    }
    for (const auto& [rel, text] : scaffold_files(name)) write_file_atomic(dir / rel, text);
    write_file_atomic(dir / "data" / "demo.csv", to_csv(make_synthetic(400, 10, 42)));
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::io_error;
  }
  out << "initialized " << dir.string() << "\n"
      << "  constants.toml       experiment constants\n"
      << "  stages/train.toml    pipeline and search space\n"
      << "  stages/test.toml     held-out metrics\n"
      << "  stages/explain.toml  SHAP settings\n"
      << "  data/demo.csv        synthetic demo data (n=400, d=10)\n"
      << "next steps:\n"
      << "  xmlwf --config " << dir.string() << " train\n"
      << "  xmlwf --config " << dir.string() << " test <run_id>\n"
      << "  xmlwf --config " << dir.string() << " explain <run_id>\n"
      << "  xmlwf --config " << dir.string() << " runs\n";
  return exit_code::ok;
}

// ---------------------------------------------------------------- train

SearchOptions search_options(const TrainConfig& tc, std::uint64_t seed, unsigned workers) {
  SearchOptions options;
  options.k = tc.k;
  options.selection_metric = tc.selection_metric;
  options.metrics = tc.metrics;
  options.seed = seed;
  options.workers = workers;
  return options;
}

std::string candidate_text(const Candidate& c) {
  std::string out;
  for (const auto& [name, value] : c) {
    out += (out.empty() ? "" : " ") + name + "=" + format_real(value);
  }
  return out.empty() ? "(defaults)" : out;
}

int cmd_train(const GlobalOptions& g, std::ostream& out, std::ostream& err) {
  LayeredConfig cfg;
  TrainConfig tc;
  try {
    cfg = load_config(g, Stage::train);
    tc = parse_train_stage(cfg.stage_doc, cfg.constants.seed);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::config_error;
  }
  const Constants& c = cfg.constants;

  json params = json::object();
  ConfigDoc recorded = cfg.stage_doc;
  recorded.erase("estimator");
  flatten(recorded, "", params);
  params["experiment"] = c.experiment;
  params["data.path"] = relative_to_root(cfg.dir, c.data_path);
  params["data.target_name"] = c.target_name;
  params["data.test_fraction"] = c.test_fraction;
  params["seed"] = c.seed;
  params["overrides"] = cfg.overrides;
  params["config.train"] = cfg.stage_doc.dump();

  RunRecord run;
  try {
    const auto experiment = create_experiment(c.store_root, c.experiment, c.description);
    run = start_run(experiment, params, g.run_id_seed);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_for(e) == exit_code::config_error ? exit_code::config_error : exit_code::run_failed;
  }

  try {
    const Dataset data = load_csv(c.data_path, c.target_name);
    const auto [train, test] = split_holdout(data, c.test_fraction, c.seed);
    const SearchResult result =
        run_search(tc.space, tc.spec_template, train, search_options(tc, c.seed, g.workers));
    run = log_run_aspects(std::move(run), result.best_model, result, train, &test, false);
    run = finalize_run(std::move(run), RunStatus::finished);

    out << "run_id: " << run.run_id << "\n"
        << "run_dir: " << relative_to_root(c.store_root, run.dir()) << "\n"
        << "candidates: " << result.candidates.size() << ", best: "
        << candidate_text(result.best_candidate()) << "\n";
    for (auto metric : result.metrics) {
      const auto best = result.best_index;
      out << "cv." << to_string(metric) << ": mean=" << format_real(result.mean_scores.at(metric)(best))
          << " std=" << format_real(result.std_scores.at(metric)(best)) << "\n";
    }
    return exit_code::ok;
  } catch (const std::exception& e) {
    try {
      finalize_run(std::move(run), RunStatus::failed, e.what());
    } catch (const std::exception& inner) {
      err << "error: could not finalize run: " << inner.what() << "\n";
    }
    err << "error: " << e.what() << "\n";
    return exit_code::run_failed;
  }
}

// ---------------------------------------------------------------- test

int cmd_test(const GlobalOptions& g, const std::string& run_id, std::ostream& out,
             std::ostream& err) {
  LayeredConfig cfg;
  TestConfig tc;
  try {
    cfg = load_config(g, Stage::test);
    tc = parse_test_stage(cfg.stage_doc);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::config_error;
  }
  const Constants& c = cfg.constants;
  try {
    RunRecord run = load_run(c.store_root, c.experiment, run_id);
    const FittedPipeline model = load_run_model(c.store_root, c.experiment, run_id);
    const Dataset test = load_run_snapshot(run, "test");
    std::map<std::string, double> metrics;
    for (auto metric : tc.metrics) {
      metrics["test." + std::string(to_string(metric))] = evaluate_metric(metric, model, test);
    }
    run = append_metrics(std::move(run), metrics);
    out << "run_id: " << run.run_id << "\n";
    for (const auto& [key, value] : metrics) out << key << ": " << format_real(value) << "\n";
    return exit_code::ok;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_for(e);
  }
}

// ---------------------------------------------------------------- explain

int cmd_explain(const GlobalOptions& g, const std::string& run_id, std::ostream& out,
                std::ostream& err) {
  LayeredConfig cfg;
  ExplainConfig ec;
  try {
    cfg = load_config(g, Stage::explain);
    ec = parse_explain_stage(cfg.stage_doc);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::config_error;
  }
  const Constants& c = cfg.constants;
  try {
    RunRecord run = load_run(c.store_root, c.experiment, run_id);
    const FittedPipeline model = load_run_model(c.store_root, c.experiment, run_id);
    const Dataset train = load_run_snapshot(run, "train");

    // 1. background sample
    const Background bg = sample_background(train, ec.background_m, c.seed, &model);
    ExplainOptions options;
    options.exact_limit = ec.exact_limit;
    options.max_coalitions = ec.max_coalitions;
    options.seed = c.seed;
    options.workers = g.workers;

    std::vector<std::pair<SplitKind, Dataset>> splits;
    splits.emplace_back(SplitKind::train, train);
    if (run.data_hashes.contains("test")) splits.emplace_back(SplitKind::test, load_run_snapshot(run, "test"));

    std::vector<FeatureImportanceSummary> summaries;
    for (const auto& [split, data] : splits) {
      const std::string name(to_string(split));
      // 2. + 3. explainer selection and attribution
      const ShapExplanation expl = explain_split(model, data, bg, split, options);
      run = register_artifact(std::move(run), "shap_" + name, "shap/" + name + ".tsv",
                              explanation_tsv(expl));
      run = register_artifact(std::move(run), "shap_" + name + "_meta", "shap/" + name + ".meta.json",
                              explanation_meta_json(expl));
      double worst = 0.0;
      for (Eigen::Index i = 0; i < expl.values.rows(); ++i) {
        worst = std::max(worst, std::abs(expl.values.row(i).sum() + expl.base_value - expl.model_score(i)));
      }
      run = append_metrics(std::move(run), {{"explain." + name + ".max_local_error", worst}});

      // 4. median |phi| over correctly predicted samples
      const PredictionMask mask = correctly_predicted_mask(model, data, split);
      if (mask.warning) {
        err << "warning: " << *mask.warning << "\n";
        run = register_artifact(std::move(run), "shap_" + name + "_warning",
                                "shap/" + name + ".warning.txt", *mask.warning + "\n");
      }
      const FeatureImportanceSummary summary = median_abs_importance(expl, mask.mask, run.run_id);

      // 5. summaries and charts
      run = register_artifact(std::move(run), "shap_" + name + "_summary",
                              "shap/" + name + ".summary.json", summary_json(summary));
      const ChartFiles charts = render_charts(summary, ec.top_k);
      run = register_artifact(std::move(run), "chart_" + name + "_html",
                              "figures/shap_" + name + ".html", charts.html);
      run = register_artifact(std::move(run), "chart_" + name + "_svg",
                              "figures/shap_" + name + ".svg", charts.svg);

      out << name << ": " << to_string(expl.method) << " explainer";
      if (expl.method == ExplainMethod::kernel) out << " (" << expl.n_coalitions << " coalitions)";
      out << ", " << summary.n_used << "/" << summary.n_total << " correctly predicted, top:";
      const auto order = ranked_features(summary);
      for (std::size_t r = 0; r < std::min<std::size_t>(3, order.size()); ++r) {
        out << " " << summary.feature_names[order[r]];
      }
      out << "\n  " << relative_to_root(c.store_root, run.dir() / "shap" / (name + ".summary.json"))
          << "\n  " << relative_to_root(c.store_root, run.dir() / "figures" / ("shap_" + name + ".html"))
          << "\n";
      summaries.push_back(summary);
    }
    run = write_run_report(std::move(run), summaries, ec.top_k);
    out << "report: " << relative_to_root(c.store_root, run.dir() / "figures" / "report.html") << "\n";
    return exit_code::ok;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_for(e);
  }
}

// ---------------------------------------------------------------- runs

std::string params_digest(const json& params) {
  const std::string kind = params.contains("estimator.kind") && params["estimator.kind"].is_string()
                               ? params["estimator.kind"].get<std::string>()
                               : "-";
  return kind + ":" + sha256_hex(params.dump()).substr(0, 8);
}

int cmd_runs(const GlobalOptions& g, const std::string& sort_key, std::ostream& out,
             std::ostream& err) {
  Constants c;
  try {
    if (!g.sets.empty()) throw Error(Errc::ConfigError, "--set does not apply to 'runs'");
    c = parse_constants(load_toml(g.config_dir / "constants.toml"), g.config_dir);
    if (g.root_override) c.store_root = *g.root_override;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::config_error;
  }
  std::vector<RunSummary> runs;
  try {
    if (!fs::is_directory(c.store_root)) throw Error(Errc::NotFound, "no store at " + c.store_root.string());
    runs = list_runs(c.store_root, c.experiment, sort_key);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_for(e);
  }
  if (g.json_output) {
    json arr = json::array();
    for (const auto& r : runs) {
      arr.push_back({{"run_id", r.run_id},
                     {"status", std::string(to_string(r.status))},
                     {"started_at", r.started_at},
                     {"stale", r.stale},
                     {"params", r.params},
                     {"metrics", r.metrics}});
    }
    out << arr.dump(2) << "\n";
    return exit_code::ok;
  }
  std::vector<std::string> columns{"cv.roc_auc.mean", "test.accuracy", "test.roc_auc"};
  if (sort_key != "started_at" && std::find(columns.begin(), columns.end(), sort_key) == columns.end()) {
    columns.insert(columns.begin(), sort_key);
  }
  out << std::left << std::setw(34) << "run_id" << std::setw(10) << "status" << std::setw(29)
      << "started_at" << std::setw(30) << "params";
  for (const auto& col : columns) out << std::setw(20) << col;
  out << "\n";
  for (const auto& r : runs) {
    out << std::setw(34) << r.run_id << std::setw(10) << (r.stale ? "stale" : std::string(to_string(r.status)))
        << std::setw(29) << r.started_at << std::setw(30) << params_digest(r.params);
    for (const auto& col : columns) {
      const auto it = r.metrics.find(col);
      out << std::setw(20) << (it == r.metrics.end() ? std::string("-") : format_real(it->second));
    }
    out << "\n";
  }
  return exit_code::ok;
}

}  // namespace

std::map<std::string, std::string> scaffold_files(const std::string& experiment) {
  std::string constants = kConstantsTemplate;
  constants.replace(constants.find("@NAME@"), 6, experiment);
  return {{"constants.toml", constants},
          {"stages/train.toml", kTrainTemplate},
          {"stages/test.toml", kTestTemplate},
          {"stages/explain.toml", kExplainTemplate}};
}

Reproduction reproduce_run(const RunRecord& run, unsigned workers) {
  if (!run.params.contains("config.train") || !run.params.contains("seed")) {
    throw Error(Errc::NotFound, "run " + run.run_id + " records no train configuration");
  }
  const ConfigDoc stage = ConfigDoc::parse(run.params.at("config.train").get<std::string>());
  const auto seed = run.params.at("seed").get<std::uint64_t>();
  const TrainConfig tc = parse_train_stage(stage, seed);
  const Dataset train = load_run_snapshot(run, "train");
  SearchResult result = run_search(tc.space, tc.spec_template, train, search_options(tc, seed, workers));

  Reproduction out{cv_metrics(result), std::move(result.best_model)};
  bool has_test = false;
  for (const auto& [key, value] : run.metrics) has_test = has_test || key.rfind("test.", 0) == 0;
  if (has_test) {
    const Dataset test = load_run_snapshot(run, "test");
    for (const auto& [key, value] : run.metrics) {
      if (key.rfind("test.", 0) == 0) {
        out.metrics[key] = evaluate_metric(parse_metric(key.substr(5)), out.model, test);
      }
    }
  }
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"xmlwf: tracked, explainable machine-learning workflows", "xmlwf"};
  app.require_subcommand(1);
  GlobalOptions g;
  g.workers = default_workers();
  std::string config_dir = ".";
  std::uint64_t seed = 0;
  std::uint64_t run_id_seed = 0;
  app.add_option("--config", config_dir, "Project directory holding constants.toml and stages/");
  auto* seed_opt = app.add_option("--seed", seed, "Override constants.seed");
  auto* id_opt = app.add_option("--run-id-seed", run_id_seed, "Draw run ids from this seed");
  app.add_flag("--json", g.json_output, "Machine-readable output (runs)");
  app.add_option("--set", g.sets, "Stage-layer override key=value (repeatable)")->take_all();
  app.add_option("--workers", g.workers, "Worker threads")->check(CLI::PositiveNumber);

  std::string init_dir;
  std::string init_name = "demo";
  auto* init = app.add_subcommand("init", "Scaffold a project with demo data");
  init->add_option("directory", init_dir)->required();
  init->add_option("--name", init_name, "Experiment name");
  auto* train = app.add_subcommand("train", "Split, search, log and finalize a run");
  std::string run_id;
  auto* test = app.add_subcommand("test", "Evaluate a run on its held-out snapshot");
  test->add_option("run_id", run_id)->required();
  auto* explain = app.add_subcommand("explain", "SHAP summaries, charts and report for a run");
  explain->add_option("run_id", run_id)->required();
  std::string sort_key = "started_at";
  auto* runs = app.add_subcommand("runs", "List the experiment's runs");
  runs->add_option("--sort", sort_key, "Metric name or started_at");
  for (auto* sub : {init, train, test, explain, runs}) sub->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_code::ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::config_error;
  }
  g.config_dir = config_dir;
  if (*seed_opt) g.seed = seed;
  if (*id_opt) g.run_id_seed = run_id_seed;
  if (const char* root = std::getenv("XMLWF_ROOT"); root != nullptr && *root != '\0') {
    g.root_override = fs::path(root);
  }

  try {
    if (init->parsed()) return cmd_init(init_dir, init_name, out, err);
    if (train->parsed()) return cmd_train(g, out, err);
    if (test->parsed()) return cmd_test(g, run_id, out, err);
    if (explain->parsed()) return cmd_explain(g, run_id, out, err);
    if (runs->parsed()) return cmd_runs(g, sort_key, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::run_failed;
  }
  return exit_code::config_error;
}

}  // namespace xmlwf
