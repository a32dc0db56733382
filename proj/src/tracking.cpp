#include "xmlwf/tracking.hpp"

#include <algorithm>
#include <random>

#include "xmlwf/error.hpp"
#include "xmlwf/rng.hpp"
#include "xmlwf/util.hpp"

namespace xmlwf {

namespace {

using json = nlohmann::json;

json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw Error(Errc::NotFound, path.string() + " does not exist");
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(Errc::StoreIO, "cannot parse " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& value) {
  write_file_atomic(path, value.dump(2) + "\n");
}

json to_json(const SplitDescription& s) {
  return {{"feature_names", s.feature_names}, {"target_name", s.target_name}, {"n", s.n}, {"d", s.d}};
}

SplitDescription describe(const Dataset& data) {
  return {data.feature_names(), data.target_name(), data.n(), data.d()};
}

RunStatus parse_status(const std::string& s) {
  if (s == "running") return RunStatus::running;
  if (s == "finished") return RunStatus::finished;
  if (s == "failed") return RunStatus::failed;
  throw Error(Errc::StoreIO, "unknown run status '" + s + "'");
}

json meta_json(const RunRecord& run) {
  json meta;
  meta["store_version"] = kStoreVersion;
  meta["run_id"] = run.run_id;
  meta["experiment"] = run.experiment;
  meta["status"] = to_string(run.status);
  meta["started_at"] = run.started_at;
  meta["ended_at"] = run.ended_at.empty() ? json(nullptr) : json(run.ended_at);
  json io = json::object();
  for (const auto& [split, desc] : run.io_description) io[split] = to_json(desc);
  meta["io_description"] = io;
  meta["data_hashes"] = run.data_hashes;
  meta["artifacts"] = run.artifacts;
  if (!run.error.empty()) meta["error"] = run.error;
  return meta;
}

void write_meta(const RunRecord& run) { write_json(run.dir() / "meta.json", meta_json(run)); }

void write_metrics(const RunRecord& run) {
  json metrics = json::object();
  for (const auto& [k, v] : run.metrics) metrics[k] = v;
  write_json(run.dir() / "metrics.json", metrics);
}

void require_running(const RunRecord& run) {
  if (run.status != RunStatus::running) {
    throw Error(Errc::StateError, "run " + run.run_id + " is " + std::string(to_string(run.status)));
  }
}

std::string random_hex128(Rng& rng) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (int w = 0; w < 2; ++w) {
    std::uint64_t word = rng.next();
    for (int b = 0; b < 16; ++b) {
      out.push_back(kHex[(word >> 60) & 0xf]);
      word <<= 4;
    }
  }
  return out;
}

void write_artifact_file(const fs::path& path, std::string_view bytes) {
  if (fs::exists(path)) {
    if (read_file(path) == bytes) return;
    throw Error(Errc::Conflict, path.string() + " already exists with different content");
  }
  fs::create_directories(path.parent_path());
  write_file_atomic(path, bytes);
}

}  // namespace

std::string_view to_string(RunStatus status) {
  switch (status) {
    case RunStatus::running: return "running";
    case RunStatus::finished: return "finished";
    case RunStatus::failed: return "failed";
  }
  return "?";
}

bool is_valid_slug(std::string_view name) {
  if (name.empty()) return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-';
  });
}

ExperimentMeta create_experiment(const fs::path& root, const std::string& name,
                                 const std::string& description) {
  if (!is_valid_slug(name)) throw Error(Errc::BadSlug, "'" + name + "' is not [a-z0-9-]+");
  ExperimentMeta meta{name, root, utc_now_iso8601(), description};
  const auto meta_path = meta.dir() / "meta.json";
  if (fs::exists(meta_path)) {
    auto existing = open_experiment(root, name);
    if (existing.description != description) {
      throw Error(Errc::Conflict, "experiment '" + name + "' exists with a different description");
    }
    fs::create_directories(existing.dir() / "runs");
    return existing;
  }
  std::error_code ec;
  fs::create_directories(meta.dir() / "runs", ec);
  if (ec) throw Error(Errc::StoreIO, "cannot create " + meta.dir().string() + ": " + ec.message());
  write_json(meta_path, {{"store_version", kStoreVersion},
                         {"name", name},
                         {"created_at", meta.created_at},
                         {"description", description}});
  return meta;
}

ExperimentMeta open_experiment(const fs::path& root, const std::string& name) {
  const auto path = root / "experiments" / name / "meta.json";
  if (!fs::exists(path)) throw Error(Errc::NotFound, "experiment '" + name + "' not found");
  const json meta = read_json(path);
  return {meta.at("name").get<std::string>(), root, meta.at("created_at").get<std::string>(),
          meta.at("description").get<std::string>()};
}

RunRecord start_run(const ExperimentMeta& experiment, const nlohmann::json& params,
                    std::optional<std::uint64_t> id_seed) {
  if (!fs::exists(experiment.dir() / "meta.json")) {
    throw Error(Errc::NotFound, "experiment '" + experiment.name + "' not found");
  }
  if (!params.is_object()) throw Error(Errc::InvalidArgument, "params must be a flat object");
  for (const auto& [key, value] : params.items()) {
    if (value.is_object()) throw Error(Errc::InvalidArgument, "param '" + key + "' is nested");
  }
  std::random_device device;
  Rng rng(id_seed ? *id_seed : (static_cast<std::uint64_t>(device()) << 32) ^ device());
  RunRecord run;
  run.experiment = experiment.name;
  run.root = experiment.root;
  do {
    run.run_id = random_hex128(rng);
  } while (fs::exists(run.dir()));
  run.started_at = utc_now_iso8601();
  run.params = params;
  std::error_code ec;
  for (const char* sub : {"data", "shap", "figures"}) {
    fs::create_directories(run.dir() / sub, ec);
    if (ec) throw Error(Errc::StoreIO, "cannot create run directory: " + ec.message());
  }
  write_json(run.dir() / "params.json", run.params);
  write_metrics(run);
  write_meta(run);
  return run;
}

nlohmann::json cv_table_json(const SearchResult& search) {
  json table;
  table["k"] = search.k;
  table["selection_metric"] = to_string(search.selection_metric);
  table["best_index"] = search.best_index;
  json metrics = json::array();
  for (auto m : search.metrics) metrics.push_back(to_string(m));
  table["metrics"] = metrics;
  table["candidates"] = search.candidates;
  json folds = json::object();
  json means = json::object();
  json stds = json::object();
  for (auto m : search.metrics) {
    const Matrix& f = search.fold_scores.at(m);
    json rows = json::array();
    for (Eigen::Index c = 0; c < f.rows(); ++c) {
      json row = json::array();
      for (Eigen::Index j = 0; j < f.cols(); ++j) row.push_back(f(c, j));
      rows.push_back(std::move(row));
    }
    folds[std::string(to_string(m))] = rows;
    const Vector& mu = search.mean_scores.at(m);
    const Vector& sd = search.std_scores.at(m);
    means[std::string(to_string(m))] = std::vector<double>(mu.data(), mu.data() + mu.size());
    stds[std::string(to_string(m))] = std::vector<double>(sd.data(), sd.data() + sd.size());
  }
  table["fold_scores"] = folds;
  table["mean"] = means;
  table["std"] = stds;
  return table;
}

std::map<std::string, double> cv_metrics(const SearchResult& search) {
  std::map<std::string, double> out;
  const auto best = static_cast<Eigen::Index>(search.best_index);
  for (auto metric : search.metrics) {
    const std::string name(to_string(metric));
    const Matrix& folds = search.fold_scores.at(metric);
    for (Eigen::Index f = 0; f < folds.cols(); ++f) {
      out["cv." + name + ".fold" + std::to_string(f)] = folds(best, f);
    }
    out["cv." + name + ".mean"] = search.mean_scores.at(metric)(best);
    out["cv." + name + ".std"] = search.std_scores.at(metric)(best);
  }
  return out;
}

RunRecord log_run_aspects(RunRecord run, const FittedPipeline& model, const SearchResult& search,
                          const Dataset& train, const Dataset* test, bool evaluate_test) {
  require_running(run);
  if (model.train_data_hash != train.content_hash()) {
    throw Error(Errc::HashMismatch, "model was not fit on the given training data");
  }
  // (1) pipeline
  const auto blob = serialize_model(model);
  write_file_atomic(run.dir() / "model.xmlwf", blob);
  run.artifacts["model"] = "model.xmlwf";

  // (2) resolved configuration
  const auto& est = model.spec.estimator;
  run.params["estimator.kind"] = to_string(est.kind);
  for (const auto& [name, value] : est.hyperparams) run.params["estimator." + name] = value;
  json transformers = json::array();
  for (auto t : model.spec.transformers) transformers.push_back(to_string(t));
  run.params["pipeline.transformers"] = transformers;
  run.params["seed"] = est.seed;
  write_json(run.dir() / "params.json", run.params);

  // (3) + (4) I/O description and snapshots
  auto snapshot = [&](const std::string& split, const Dataset& data) {
    const auto rel = "data/" + split + ".tsv";
    write_file_atomic(run.dir() / rel, canonical_serialization(data));
    run.io_description[split] = describe(data);
    run.data_hashes[split] = data.content_hash();
    run.artifacts["snapshot_" + split] = rel;
  };
  snapshot("train", train);
  if (test != nullptr) snapshot("test", *test);

  // (5) cross-validation and post-training performance
  for (const auto& [key, value] : cv_metrics(search)) run.metrics[key] = value;
  if (test != nullptr && evaluate_test) {
    for (auto metric : search.metrics) {
      run.metrics["test." + std::string(to_string(metric))] = evaluate_metric(metric, model, *test);
    }
  }
  write_metrics(run);
  write_json(run.dir() / "cv_table.json", cv_table_json(search));
  run.artifacts["cv_table"] = "cv_table.json";
  write_meta(run);
  return run;
}

RunRecord finalize_run(RunRecord run, RunStatus status, const std::string& error) {
  require_running(run);
  if (status == RunStatus::running) throw Error(Errc::StateError, "cannot finalize to running");
  run.status = status;
  run.error = error;
  run.ended_at = utc_now_iso8601();
  if (run.ended_at < run.started_at) run.ended_at = run.started_at;
  write_meta(run);
  return run;
}

RunRecord load_run(const fs::path& root, const std::string& experiment, const std::string& run_id) {
  open_experiment(root, experiment);
  RunRecord run;
  run.root = root;
  run.experiment = experiment;
  run.run_id = run_id;
  if (run_id.empty() || !is_valid_slug(run_id) || !fs::exists(run.dir() / "meta.json")) {
    throw Error(Errc::NotFound, "run '" + run_id + "' not found in experiment '" + experiment + "'");
  }
  const json meta = read_json(run.dir() / "meta.json");
  run.status = parse_status(meta.at("status").get<std::string>());
  run.started_at = meta.at("started_at").get<std::string>();
  if (!meta.at("ended_at").is_null()) run.ended_at = meta.at("ended_at").get<std::string>();
  for (const auto& [split, desc] : meta.at("io_description").items()) {
    run.io_description[split] = {desc.at("feature_names").get<std::vector<std::string>>(),
                                 desc.at("target_name").get<std::string>(),
                                 desc.at("n").get<std::int64_t>(), desc.at("d").get<std::int64_t>()};
  }
  run.data_hashes = meta.at("data_hashes").get<std::map<std::string, std::string>>();
  run.artifacts = meta.at("artifacts").get<std::map<std::string, std::string>>();
  if (meta.contains("error")) run.error = meta.at("error").get<std::string>();
  if (fs::exists(run.dir() / "params.json")) run.params = read_json(run.dir() / "params.json");
  if (fs::exists(run.dir() / "metrics.json")) {
    run.metrics = read_json(run.dir() / "metrics.json").get<std::map<std::string, double>>();
  }
  return run;
}

FittedPipeline load_run_model(const fs::path& root, const std::string& experiment,
                              const std::string& run_id) {
  const RunRecord run = load_run(root, experiment, run_id);
  if (run.status != RunStatus::finished) {
    throw Error(Errc::StateError, "run " + run_id + " is " + std::string(to_string(run.status)));
  }
  const auto it = run.artifacts.find("model");
  if (it == run.artifacts.end() || !fs::exists(run.dir() / it->second)) {
    throw Error(Errc::NotFound, "run " + run_id + " has no model blob");
  }
  FittedPipeline model = deserialize_model(read_file(run.dir() / it->second));
  const auto hash = run.data_hashes.find("train");
  if (hash == run.data_hashes.end() || hash->second != model.train_data_hash) {
    throw Error(Errc::HashMismatch, "model blob training hash differs from meta.json");
  }
  return model;
}

Dataset load_run_snapshot(const RunRecord& run, const std::string& split) {
  const auto hash = run.data_hashes.find(split);
  const auto path = run.dir() / "data" / (split + ".tsv");
  if (hash == run.data_hashes.end() || !fs::exists(path)) {
    throw Error(Errc::NotFound, "run " + run.run_id + " has no " + split + " snapshot");
  }
  const auto bytes = read_file(path);
  if (sha256_hex(bytes) != hash->second) {
    throw Error(Errc::HashMismatch, split + " snapshot does not match its recorded hash");
  }
  return parse_snapshot(bytes, path.string());
}

RunRecord append_metrics(RunRecord run, const std::map<std::string, double>& metrics) {
  if (run.status != RunStatus::finished) {
    throw Error(Errc::StateError, "metrics can only be appended to finished runs");
  }
  for (const auto& [key, value] : metrics) {
    const auto it = run.metrics.find(key);
    if (it != run.metrics.end() && it->second != value) {
      throw Error(Errc::Conflict, "metric '" + key + "' already recorded with another value");
    }
  }
  for (const auto& [key, value] : metrics) run.metrics[key] = value;
  write_metrics(run);
  return run;
}

RunRecord register_artifact(RunRecord run, const std::string& logical_name,
                            const std::string& relative_path, std::string_view bytes) {
  if (run.status == RunStatus::failed) {
    throw Error(Errc::StateError, "cannot add artifacts to a failed run");
  }
  const fs::path rel(relative_path);
  if (rel.is_absolute() || relative_path.find("..") != std::string::npos) {
    throw Error(Errc::InvalidArgument, "artifact path must stay inside the run directory");
  }
  const auto existing = run.artifacts.find(logical_name);
  if (existing != run.artifacts.end() && existing->second != relative_path) {
    throw Error(Errc::Conflict, "artifact '" + logical_name + "' already points elsewhere");
  }
  write_artifact_file(run.dir() / rel, bytes);
  run.artifacts[logical_name] = relative_path;
  write_meta(run);
  return run;
}

std::vector<RunSummary> list_runs(const fs::path& root, const std::string& experiment,
                                  const std::string& sort_key) {
  const auto exp = open_experiment(root, experiment);
  std::vector<std::string> ids;
  const auto runs_dir = exp.dir() / "runs";
  if (fs::exists(runs_dir)) {
    for (const auto& entry : fs::directory_iterator(runs_dir)) {
      if (entry.is_directory() && fs::exists(entry.path() / "meta.json")) {
        ids.push_back(entry.path().filename().string());
      }
    }
  }
  std::sort(ids.begin(), ids.end());
  std::vector<RunSummary> out;
  for (const auto& id : ids) {
    const RunRecord run = load_run(root, experiment, id);
    out.push_back({run.run_id, run.status, run.started_at, run.params, run.metrics,
                   run.status == RunStatus::running});
  }
  if (sort_key == "started_at") {
    std::stable_sort(out.begin(), out.end(), [](const RunSummary& a, const RunSummary& b) {
      return a.started_at > b.started_at;
    });
  } else {
    std::stable_sort(out.begin(), out.end(), [&](const RunSummary& a, const RunSummary& b) {
      const auto ia = a.metrics.find(sort_key);
      const auto ib = b.metrics.find(sort_key);
      const bool ha = ia != a.metrics.end();
      const bool hb = ib != b.metrics.end();
      if (ha != hb) return ha;
      return ha && ia->second > ib->second;
    });
  }
  return out;
}

AuditReport audit_run(const fs::path& root, const std::string& experiment,
                      const std::string& run_id) {
  AuditReport report{run_id, true, {}};
  auto fail = [&](std::string msg) {
    report.ok = false;
    report.problems.push_back(std::move(msg));
  };
  RunRecord run;
  try {
    run = load_run(root, experiment, run_id);
  } catch (const Error& e) {
    fail(e.what());
    return report;
  }
  if (run.status == RunStatus::running) {
    fail("stale: run never finalized");
    return report;
  }
  if (run.status == RunStatus::failed) return report;

  // (1) pipeline blob
  std::optional<FittedPipeline> model;
  try {
    model = load_run_model(root, experiment, run_id);
  } catch (const Error& e) {
    fail(std::string("model: ") + e.what());
  }
  // (2) configuration
  if (!run.params.contains("estimator.kind")) {
    fail("params: estimator.kind missing");
  } else {
    try {
      const auto kind = parse_estimator_kind(run.params.at("estimator.kind").get<std::string>());
      for (const auto& info : hyperparam_schema(kind)) {
        if (!run.params.contains("estimator." + std::string(info.name))) {
          fail("params: estimator." + std::string(info.name) + " missing");
        }
      }
    } catch (const std::exception& e) {
      fail(std::string("params: ") + e.what());
    }
  }
  // (3) + (4) I/O description against re-hashed snapshots
  if (run.data_hashes.empty()) fail("no data snapshot recorded");
  for (const auto& [split, hash] : run.data_hashes) {
    try {
      const Dataset data = load_run_snapshot(run, split);
      if (data.content_hash() != hash) fail(split + ": parsed snapshot hash differs");
      const auto io = run.io_description.find(split);
      if (io == run.io_description.end()) {
        fail(split + ": io_description missing");
      } else if (io->second.feature_names != data.feature_names() ||
                 io->second.target_name != data.target_name() || io->second.n != data.n() ||
                 io->second.d != data.d()) {
        fail(split + ": io_description disagrees with snapshot");
      }
    } catch (const Error& e) {
      fail(split + ": " + e.what());
    }
  }
  // (5) metrics: k entries per CV metric
  if (run.metrics.empty()) fail("metrics empty");
  try {
    const json table = read_json(run.dir() / "cv_table.json");
    const int k = table.at("k").get<int>();
    for (const auto& m : table.at("metrics")) {
      for (int f = 0; f < k; ++f) {
        const auto key = "cv." + m.get<std::string>() + ".fold" + std::to_string(f);
        if (!run.metrics.contains(key)) fail("metrics: " + key + " missing");
      }
    }
  } catch (const std::exception& e) {
    fail(std::string("cv_table: ") + e.what());
  }
  return report;
}

std::vector<AuditReport> audit_experiment(const fs::path& root, const std::string& experiment) {
  std::vector<AuditReport> out;
  for (const auto& run : list_runs(root, experiment, "started_at")) {
    out.push_back(audit_run(root, experiment, run.run_id));
  }
  std::sort(out.begin(), out.end(),
            [](const AuditReport& a, const AuditReport& b) { return a.run_id < b.run_id; });
  return out;
}

}  // namespace xmlwf
