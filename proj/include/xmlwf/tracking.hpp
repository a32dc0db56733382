#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xmlwf/dataset.hpp"
#include "xmlwf/pipeline.hpp"
#include "xmlwf/search.hpp"

namespace xmlwf {

namespace fs = std::filesystem;

inline constexpr int kStoreVersion = 1;

// Store layout, relative to the store root:
//   experiments/<name>/meta.json
//   experiments/<name>/runs/<run_id>/{meta.json, params.json, metrics.json,
//                                     model.xmlwf, cv_table.json, data/, shap/, figures/}

struct ExperimentMeta {
  std::string name;
  fs::path root;
  std::string created_at;
  std::string description;

  fs::path dir() const { return root / "experiments" / name; }
};

enum class RunStatus { running, finished, failed };
std::string_view to_string(RunStatus status);

struct SplitDescription {
  std::vector<std::string> feature_names;
  std::string target_name;
  std::int64_t n = 0;
  std::int64_t d = 0;
};

struct RunRecord {
  std::string run_id;
  std::string experiment;
  fs::path root;
  RunStatus status = RunStatus::running;
  std::string started_at;
  std::string ended_at;
  nlohmann::json params = nlohmann::json::object();
  std::map<std::string, SplitDescription> io_description;
  std::map<std::string, std::string> data_hashes;
  std::map<std::string, double> metrics;
  std::map<std::string, std::string> artifacts;
  std::string error;

  fs::path dir() const { return root / "experiments" / experiment / "runs" / run_id; }
};

bool is_valid_slug(std::string_view name);

ExperimentMeta create_experiment(const fs::path& root, const std::string& name,
                                 const std::string& description);
ExperimentMeta open_experiment(const fs::path& root, const std::string& name);

/// `id_seed` makes run ids reproducible; a drawn id that already exists is
/// skipped so ids stay unique within the experiment.
RunRecord start_run(const ExperimentMeta& experiment, const nlohmann::json& params,
                    std::optional<std::uint64_t> id_seed = std::nullopt);

/// Records the model blob, resolved hyperparameters, I/O description, data
/// snapshots and CV scores. Test metrics are computed only when `test` is given
/// and `evaluate_test` is set; the test snapshot is written either way.
RunRecord log_run_aspects(RunRecord run, const FittedPipeline& model, const SearchResult& search,
                          const Dataset& train, const Dataset* test = nullptr,
                          bool evaluate_test = true);

RunRecord finalize_run(RunRecord run, RunStatus status, const std::string& error = {});

RunRecord load_run(const fs::path& root, const std::string& experiment, const std::string& run_id);

FittedPipeline load_run_model(const fs::path& root, const std::string& experiment,
                              const std::string& run_id);

/// Loads a logged snapshot and checks it against the recorded hash.
Dataset load_run_snapshot(const RunRecord& run, const std::string& split);

/// Adds metrics to a finished run. Existing keys may only be rewritten with
/// the identical value.
RunRecord append_metrics(RunRecord run, const std::map<std::string, double>& metrics);

/// Writes an artifact file under the run directory and records it in
/// meta.json. Rewriting an existing artifact requires identical bytes.
RunRecord register_artifact(RunRecord run, const std::string& logical_name,
                            const std::string& relative_path, std::string_view bytes);

struct RunSummary {
  std::string run_id;
  RunStatus status = RunStatus::running;
  std::string started_at;
  nlohmann::json params;
  std::map<std::string, double> metrics;
  bool stale = false;
};

/// Descending by `sort_key` (a metric name or "started_at"); runs lacking the
/// key sort last; equal keys keep run_id order.
std::vector<RunSummary> list_runs(const fs::path& root, const std::string& experiment,
                                  const std::string& sort_key = "started_at");

struct AuditReport {
  std::string run_id;
  bool ok = true;
  std::vector<std::string> problems;
};

/// Checks the five recorded aspects of a finished run (running runs are
/// reported as stale).
AuditReport audit_run(const fs::path& root, const std::string& experiment,
                      const std::string& run_id);
std::vector<AuditReport> audit_experiment(const fs::path& root, const std::string& experiment);

nlohmann::json cv_table_json(const SearchResult& search);
/// cv.<metric>.fold<i>, cv.<metric>.mean and cv.<metric>.std of the selected candidate.
std::map<std::string, double> cv_metrics(const SearchResult& search);

}  // namespace xmlwf
