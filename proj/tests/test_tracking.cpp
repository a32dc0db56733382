#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include "support.hpp"
#include "xmlwf/tracking.hpp"

using namespace xmlwf;
using namespace xmlwf::testing;
using json = nlohmann::json;

namespace {

struct Trained {
  Dataset train;
  Dataset test;
  SearchResult search;
};

Trained train_small(std::vector<Metric> metrics = {Metric::accuracy, Metric::roc_auc}) {
  const Dataset all = make_synthetic(120, 3, 7);
  auto [train, test] = split_holdout(all, 0.25, 7);
  SearchOptions options;
  options.metrics = std::move(metrics);
  options.seed = 7;
  const PipelineSpec spec{{TransformerKind::standardize}, {EstimatorKind::logistic_regression, {}, 7}};
  auto search = run_search(ParamGrid{{{"l2", {1e-4, 1e-2, 1.0}}}}, spec, train, options);
  return {std::move(train), std::move(test), std::move(search)};
}

RunRecord finished_run(const fs::path& root, const Trained& t, std::uint64_t id_seed, bool with_test = true) {
  const auto exp = create_experiment(root, "exp", "d");
  auto run = start_run(exp, json{{"note", "x"}}, id_seed);
  run = log_run_aspects(std::move(run), t.search.best_model, t.search, t.train, with_test ? &t.test : nullptr);
  return finalize_run(std::move(run), RunStatus::finished);
}

}  // namespace

TEST_CASE("create_experiment: layout, idempotence, validation") {
  TempDir dir;
  const auto a = create_experiment(dir.path(), "my-exp", "hello");
  CHECK(fs::is_directory(dir.path() / "experiments" / "my-exp" / "runs"));
  const auto meta = json::parse(read_file(dir.path() / "experiments" / "my-exp" / "meta.json"));
  CHECK(meta.at("store_version") == 1);
  const auto b = create_experiment(dir.path(), "my-exp", "hello");
  CHECK(a.created_at == b.created_at);
  CHECK(error_of([&] { create_experiment(dir.path(), "my-exp", "other"); }) == Errc::Conflict);
  CHECK(error_of([&] { create_experiment(dir.path(), "My Exp", ""); }) == Errc::BadSlug);
  CHECK(error_of([&] { open_experiment(dir.path(), "nope"); }) == Errc::NotFound);
  CHECK(is_valid_slug("a-1"));
  CHECK_FALSE(is_valid_slug(""));
  CHECK_FALSE(is_valid_slug("a_b"));
}

TEST_CASE("start_run: ids, skeleton, params") {
  TempDir dir;
  const auto exp = create_experiment(dir.path(), "exp", "");
  const json params{{"alpha", 0.5}, {"name", "x"}, {"flags", {1, 2}}};
  const auto a = start_run(exp, params);
  const auto b = start_run(exp, params);
  CHECK(a.run_id != b.run_id);
  CHECK(a.run_id.size() == 32);
  for (const char* sub : {"data", "shap", "figures"}) CHECK(fs::is_directory(a.dir() / sub));
  CHECK(json::parse(read_file(a.dir() / "params.json")) == params);
  CHECK(json::parse(read_file(a.dir() / "meta.json")).at("status") == "running");
  CHECK(error_of([&] { start_run(exp, json{{"nested", {{"a", 1}}}}); }) == Errc::InvalidArgument);

  // Seeded ids repeat across stores and stay unique within one.
  TempDir other;
  const auto exp2 = create_experiment(other.path(), "exp", "");
  const auto s1 = start_run(exp, json::object(), 5);
  const auto s2 = start_run(exp2, json::object(), 5);
  const auto s3 = start_run(exp, json::object(), 5);
  CHECK(s1.run_id == s2.run_id);
  CHECK(s3.run_id != s1.run_id);
}

TEST_CASE("log_run_aspects records all five aspects") {
  TempDir dir;
  const auto t = train_small();
  const auto run = finished_run(dir.path(), t, 1);

  CHECK(fs::exists(run.dir() / "model.xmlwf"));
  const auto params = json::parse(read_file(run.dir() / "params.json"));
  CHECK(params.at("note") == "x");
  CHECK(params.at("estimator.kind") == "logistic_regression");
  for (const char* hp : {"learning_rate", "max_iter", "tol", "l2"}) CHECK(params.contains(std::string("estimator.") + hp));

  CHECK(sha256_hex(read_file(run.dir() / "data" / "train.tsv")) == run.data_hashes.at("train"));
  CHECK(run.data_hashes.at("train") == t.train.content_hash());
  CHECK(run.data_hashes.at("test") == t.test.content_hash());
  CHECK(run.io_description.at("train").n == t.train.n());
  CHECK(run.io_description.at("test").feature_names == t.test.feature_names());

  const auto metrics = json::parse(read_file(run.dir() / "metrics.json"));
  for (const char* m : {"accuracy", "roc_auc"}) {
    for (int f = 0; f < 5; ++f) CHECK(metrics.contains("cv." + std::string(m) + ".fold" + std::to_string(f)));
    CHECK(metrics.contains("cv." + std::string(m) + ".mean"));
    CHECK(metrics.contains("test." + std::string(m)));
  }
  const auto table = json::parse(read_file(run.dir() / "cv_table.json"));
  CHECK(table.at("fold_scores").at("roc_auc").size() == 3);
  CHECK(table.at("fold_scores").at("roc_auc")[0].size() == 5);
  CHECK(run.artifacts.at("cv_table") == "cv_table.json");
  const auto audit = audit_run(dir.path(), "exp", run.run_id);
  CHECK(audit.ok);
}

TEST_CASE("no test dataset means no test metrics") {
  TempDir dir;
  const auto t = train_small();
  const auto run = finished_run(dir.path(), t, 2, false);
  for (const auto& [key, value] : run.metrics) CHECK(key.rfind("test.", 0) == std::string::npos);
  CHECK_FALSE(run.data_hashes.contains("test"));
  CHECK(audit_run(dir.path(), "exp", run.run_id).ok);
}

TEST_CASE("state transitions") {
  TempDir dir;
  const auto t = train_small();
  auto run = finished_run(dir.path(), t, 3);
  CHECK(run.ended_at >= run.started_at);
  CHECK(error_of([&] { finalize_run(run, RunStatus::failed); }) == Errc::StateError);
  CHECK(error_of([&] { log_run_aspects(run, t.search.best_model, t.search, t.train); }) == Errc::StateError);

  const auto exp = open_experiment(dir.path(), "exp");
  auto crashed = start_run(exp, json::object());
  const auto runs = list_runs(dir.path(), "exp");
  const auto it = std::find_if(runs.begin(), runs.end(), [&](const RunSummary& s) { return s.run_id == crashed.run_id; });
  REQUIRE(it != runs.end());
  CHECK(it->stale);
  const auto audit = audit_run(dir.path(), "exp", crashed.run_id);
  CHECK_FALSE(audit.ok);

  auto failed = finalize_run(start_run(exp, json::object()), RunStatus::failed, "boom");
  CHECK(load_run(dir.path(), "exp", failed.run_id).error == "boom");
  CHECK(error_of([&] { load_run_model(dir.path(), "exp", failed.run_id); }) == Errc::StateError);

  // Mismatched training data is refused.
  auto fresh = start_run(exp, json::object());
  CHECK(error_of([&] { log_run_aspects(fresh, t.search.best_model, t.search, t.test); }) == Errc::HashMismatch);
}

TEST_CASE("load_run_model round trip and tamper detection") {
  TempDir dir;
  const auto t = train_small();
  const auto run = finished_run(dir.path(), t, 4);
  const auto model = load_run_model(dir.path(), "exp", run.run_id);
  CHECK(predict_scores(model, t.train.rows()) == predict_scores(t.search.best_model, t.train.rows()));
  CHECK(model.train_data_hash == run.data_hashes.at("train"));
  CHECK(error_of([&] { load_run_model(dir.path(), "exp", "0123456789abcdef0123456789abcdef"); }) == Errc::NotFound);

  auto meta = json::parse(read_file(run.dir() / "meta.json"));
  meta["data_hashes"]["train"] = std::string(64, 'a');
  write_file_atomic(run.dir() / "meta.json", meta.dump());
  CHECK(error_of([&] { load_run_model(dir.path(), "exp", run.run_id); }) == Errc::HashMismatch);
  CHECK_FALSE(audit_run(dir.path(), "exp", run.run_id).ok);
}

TEST_CASE("audit flags missing or altered aspects") {
  TempDir dir;
  const auto t = train_small();
  auto corrupt = [&](std::uint64_t seed, const std::function<void(const RunRecord&)>& damage) {
    const auto run = finished_run(dir.path(), t, seed);
    REQUIRE(audit_run(dir.path(), "exp", run.run_id).ok);
    damage(run);
    return audit_run(dir.path(), "exp", run.run_id);
  };
  CHECK_FALSE(corrupt(10, [](const RunRecord& r) { fs::remove(r.dir() / "model.xmlwf"); }).ok);
  CHECK_FALSE(corrupt(11, [](const RunRecord& r) {
                auto p = json::parse(read_file(r.dir() / "params.json"));
                p.erase("estimator.l2");
                write_file_atomic(r.dir() / "params.json", p.dump());
              }).ok);
  CHECK_FALSE(corrupt(12, [](const RunRecord& r) {
                auto text = read_file(r.dir() / "data" / "test.tsv");
                text.back() = text.back() == '0' ? '1' : '0';
                write_file_atomic(r.dir() / "data" / "test.tsv", text);
              }).ok);
  CHECK_FALSE(corrupt(13, [](const RunRecord& r) {
                auto m = json::parse(read_file(r.dir() / "metrics.json"));
                m.erase("cv.roc_auc.fold3");
                write_file_atomic(r.dir() / "metrics.json", m.dump());
              }).ok);
  CHECK_FALSE(corrupt(14, [](const RunRecord& r) {
                auto meta = json::parse(read_file(r.dir() / "meta.json"));
                meta["io_description"]["train"]["n"] = 1;
                write_file_atomic(r.dir() / "meta.json", meta.dump());
              }).ok);
}

TEST_CASE("append-only additions to finished runs") {
  TempDir dir;
  const auto t = train_small();
  auto run = finished_run(dir.path(), t, 5, false);
  run = append_metrics(std::move(run), {{"test.extra", 0.5}});
  run = append_metrics(std::move(run), {{"test.extra", 0.5}});
  CHECK(error_of([&] { append_metrics(run, {{"test.extra", 0.25}}); }) == Errc::Conflict);
  CHECK(load_run(dir.path(), "exp", run.run_id).metrics.at("test.extra") == 0.5);

  run = register_artifact(std::move(run), "note", "figures/note.txt", "abc");
  run = register_artifact(std::move(run), "note", "figures/note.txt", "abc");
  CHECK(error_of([&] { register_artifact(run, "note", "figures/note.txt", "abd"); }) == Errc::Conflict);
  CHECK(error_of([&] { register_artifact(run, "x", "../escape.txt", "a"); }).has_value());
  CHECK(error_of([&] { register_artifact(run, "x", "/tmp/abs.txt", "a"); }).has_value());
  CHECK(load_run(dir.path(), "exp", run.run_id).artifacts.at("note") == "figures/note.txt");
  CHECK(audit_run(dir.path(), "exp", run.run_id).ok);

  const auto exp = open_experiment(dir.path(), "exp");
  const auto running = start_run(exp, json::object());
  CHECK(error_of([&] { append_metrics(running, {{"a", 1}}); }) == Errc::StateError);
}

TEST_CASE("list_runs sorting") {
  TempDir dir;
  const auto exp = create_experiment(dir.path(), "exp", "");
  CHECK(list_runs(dir.path(), "exp").empty());
  CHECK(error_of([&] { list_runs(dir.path(), "none"); }) == Errc::NotFound);
  std::vector<std::string> ids;
  for (double auc : {0.7, 0.9, 0.8, 0.9}) {
    auto run = finalize_run(start_run(exp, json::object()), RunStatus::finished);
    run = append_metrics(std::move(run), {{"test.roc_auc", auc}});
    ids.push_back(run.run_id);
  }
  start_run(exp, json::object());  // no metric: sorts last
  const auto runs = list_runs(dir.path(), "exp", "test.roc_auc");
  REQUIRE(runs.size() == 5);
  for (std::size_t i = 0; i + 1 < 4; ++i) {
    CHECK(runs[i].metrics.at("test.roc_auc") >= runs[i + 1].metrics.at("test.roc_auc"));
  }
  CHECK(runs[0].run_id < runs[1].run_id);  // equal 0.9: run_id order
  CHECK_FALSE(runs[4].metrics.contains("test.roc_auc"));

  const auto by_time = list_runs(dir.path(), "exp", "started_at");
  for (std::size_t i = 0; i + 1 < by_time.size(); ++i) CHECK(by_time[i].started_at >= by_time[i + 1].started_at);
}

TEST_CASE("snapshots reproduce the training data exactly") {
  TempDir dir;
  const auto t = train_small();
  const auto run = finished_run(dir.path(), t, 6);
  const Dataset back = load_run_snapshot(run, "train");
  CHECK(back.content_hash() == t.train.content_hash());
  const auto refit = fit_pipeline(t.search.best_model.spec, back);
  CHECK(serialize_model(refit) == serialize_model(t.search.best_model));
  CHECK(error_of([&] { load_run_snapshot(run, "valid"); }) == Errc::NotFound);
}
