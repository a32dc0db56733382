#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include "support.hpp"
#include "xmlwf/explain.hpp"
#include "xmlwf/pipeline.hpp"

using namespace xmlwf;
using namespace xmlwf::testing;

namespace {

Background background_of(const Matrix& rows) { return Background{rows, "", 0}; }

ScoreFunction linear(const Vector& w, double c = 0.0) {
  return [w, c](const Matrix& rows) { return Vector((rows * w).array() + c); };
}

Vector row(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double a : v) x(i++) = a;
  return x;
}

}  // namespace

TEST_CASE("exact Shapley on a linear model") {
  Matrix bg = Matrix::Zero(1, 2);
  const auto a = shapley_exact(linear(row({2, -1})), row({1, 1}), background_of(bg));
  CHECK(a.phi(0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(a.phi(1) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(a.base == 0.0);

  // Closed form w_j (x_j - mean(bg_j)) with a larger background.
  std::mt19937_64 gen(1);
  const Matrix big = random_matrix(7, 4, gen);
  const Vector w = row({0.5, -2, 0, 3});
  const Vector x = row({1, 2, 3, 4});
  const auto b = shapley_exact(linear(w), x, background_of(big));
  const Vector closed = w.cwiseProduct(x - big.colwise().mean().transpose());
  CHECK((b.phi - closed).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("single feature: phi equals f(x) - base") {
  Matrix bg(3, 1);
  bg << -1, 0, 4;
  const ScoreFunction f = [](const Matrix& r) { return Vector(r.array().square().col(0)); };
  const Vector x = row({2});
  const auto a = shapley_exact(f, x, background_of(bg));
  CHECK(a.base == doctest::Approx(17.0 / 3.0));
  CHECK(a.phi(0) == 4.0 - a.base);
}

TEST_CASE("exact_limit is enforced") {
  const Matrix bg = Matrix::Zero(1, 13);
  CHECK(error_of([&] { shapley_exact(linear(Vector::Ones(13)), Vector::Ones(13), background_of(bg)); }) ==
        Errc::TooManyFeatures);
  CHECK(error_of([&] { shapley_exact(linear(Vector::Ones(13)), Vector::Ones(13), background_of(bg), 13); }) ==
        std::nullopt);
}

TEST_CASE("exact Shapley equals the permutation-average oracle") {
  std::mt19937_64 gen(31);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index d = 1 + trial % 5;
    const auto f = random_model(d, gen);
    const Matrix bg = random_matrix(1 + trial % 4, d, gen);
    const Vector x = random_matrix(d, 1, gen).col(0);
    const auto a = shapley_exact(f, x, background_of(bg));
    const auto oracle = permutation_shapley(f, x, bg);
    CHECK((a.phi - oracle.phi).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK(std::abs(a.base - oracle.base) <= 1e-12);
  }
}

TEST_CASE("kernel SHAP with a full budget matches exact enumeration") {
  std::mt19937_64 gen(5);
  for (Eigen::Index d = 2; d <= 8; ++d) {
    for (int trial = 0; trial < 3; ++trial) {
      const auto f = random_model(d, gen);
      const Matrix bg = random_matrix(5, d, gen);
      const Vector x = random_matrix(d, 1, gen).col(0);
      const auto exact = shapley_exact(f, x, background_of(bg));
      const std::int64_t full = (std::int64_t{1} << d) - 2;
      const auto kernel = kernel_shap(f, x, background_of(bg), full, 3);
      CHECK((kernel.phi - exact.phi).cwiseAbs().maxCoeff() <= 1e-6);
      CHECK(kernel.base == doctest::Approx(exact.base).epsilon(1e-12));
    }
  }
}

TEST_CASE("kernel SHAP with two players needs two coalitions") {
  const ScoreFunction f = [](const Matrix& r) {
    return Vector(r.col(0).array() * r.col(1).array() + 3.0 * r.col(0).array());
  };
  Matrix bg(1, 2);
  bg << 0, 0;
  const Vector x = row({2, 5});
  // v({}) = 0, v({1}) = 6, v({2}) = 0, v({1,2}) = 16.
  const double phi1 = 0.5 * (6 - 0) + 0.5 * (16 - 0);
  const double phi2 = 0.5 * (0 - 0) + 0.5 * (16 - 6);
  const auto a = kernel_shap(f, x, background_of(bg), 2, 1);
  CHECK(a.phi(0) == doctest::Approx(phi1).epsilon(1e-12));
  CHECK(a.phi(1) == doctest::Approx(phi2).epsilon(1e-12));
  CHECK(error_of([&] { kernel_shap(f, x, background_of(bg), 1, 1); }).has_value());
}

TEST_CASE("kernel SHAP keeps efficiency exactly and is deterministic") {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::Index d = 10 + trial;
    const auto f = random_model(d, gen);
    const Matrix bg = random_matrix(8, d, gen);
    const Vector x = random_matrix(d, 1, gen).col(0);
    const auto a = kernel_shap(f, x, background_of(bg), 300, 11);
    const auto b = kernel_shap(f, x, background_of(bg), 300, 11);
    CHECK(a.phi == b.phi);
    Matrix xm(1, d);
    xm.row(0) = x.transpose();
    CHECK(std::abs(a.phi.sum() + a.base - f(xm)(0)) <= 1e-9);
    CHECK(a.phi.allFinite());
  }
  CHECK(error_of([&] {
          const Matrix bg = Matrix::Zero(1, 5);
          kernel_shap(linear(Vector::Ones(5)), Vector::Ones(5), background_of(bg), 5, 1);
        }).has_value());
}

TEST_CASE("Shapley kernel weight") {
  CHECK(shapley_kernel_weight(4, 1) == doctest::Approx(3.0 / (4.0 * 1 * 3)));
  CHECK(shapley_kernel_weight(5, 2) == doctest::Approx(4.0 / (10.0 * 2 * 3)));
}

TEST_CASE("dummy axiom: ignored features get exactly zero") {
  std::mt19937_64 gen(12);
  for (int trial = 0; trial < 25; ++trial) {
    const Eigen::Index d = 2 + trial % 5;
    const Eigen::Index ignored = trial % d;
    const auto inner = random_model(d, gen);
    const ScoreFunction f = [inner, ignored](const Matrix& r) {
      Matrix z = r;
      z.col(ignored).setZero();
      return inner(z);
    };
    const Matrix bg = random_matrix(3, d, gen);
    const Vector x = random_matrix(d, 1, gen).col(0);
    const auto a = shapley_exact(f, x, background_of(bg));
    CHECK(a.phi(ignored) == 0.0);
  }
}

TEST_CASE("dummy axiom on a fitted tree ensemble") {
  Matrix x(40, 3);
  std::mt19937_64 gen(3);
  x = random_matrix(40, 3, gen);
  std::vector<int> y(40);
  for (int i = 0; i < 40; ++i) y[static_cast<std::size_t>(i)] = x(i, 0) > 0 ? 1 : 0;
  const auto model = fit_pipeline(
      PipelineSpec{{}, {EstimatorKind::random_forest, {{"n_trees", 5}, {"max_depth", 2}}, 1}},
      make_dataset(x, y));
  std::set<std::int64_t> used;
  for (const auto& t : std::get<TreeEnsemble>(model.model).trees) {
    for (const auto& n : t.nodes) used.insert(n.feature);
  }
  const auto bg = sample_background(make_dataset(x, y), 10, 2);
  for (Eigen::Index i = 0; i < 5; ++i) {
    const auto a = shapley_exact(score_function(model), x.row(i).transpose(), bg);
    for (Eigen::Index j = 0; j < 3; ++j) {
      if (!used.contains(j)) CHECK(a.phi(j) == 0.0);
    }
  }
}

TEST_CASE("symmetry axiom: exchangeable features share credit") {
  std::mt19937_64 gen(13);
  for (int trial = 0; trial < 25; ++trial) {
    const Eigen::Index d = 3 + trial % 3;
    const auto inner = random_model(d, gen);
    // f depends on x0 and x1 only through their sum and product.
    const ScoreFunction f = [inner](const Matrix& r) {
      Matrix z = r;
      z.col(0) = r.col(0) + r.col(1);
      z.col(1) = r.col(0).cwiseProduct(r.col(1));
      return inner(z);
    };
    Matrix bg = random_matrix(3, d, gen);
    bg.col(1) = bg.col(0);
    Vector x = random_matrix(d, 1, gen).col(0);
    x(1) = x(0);
    const auto a = shapley_exact(f, x, background_of(bg));
    CHECK(std::abs(a.phi(0) - a.phi(1)) <= 1e-12);
  }
}

TEST_CASE("linearity axiom: attributions add over model sums") {
  std::mt19937_64 gen(14);
  for (int trial = 0; trial < 25; ++trial) {
    const Eigen::Index d = 2 + trial % 5;
    const auto f1 = random_model(d, gen);
    const auto f2 = random_model(d, gen);
    const ScoreFunction sum = [f1, f2](const Matrix& r) { return Vector(f1(r) + f2(r)); };
    const Matrix bg = random_matrix(4, d, gen);
    const Vector x = random_matrix(d, 1, gen).col(0);
    const auto a = shapley_exact(f1, x, background_of(bg));
    const auto b = shapley_exact(f2, x, background_of(bg));
    const auto c = shapley_exact(sum, x, background_of(bg));
    CHECK((c.phi - a.phi - b.phi).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("background sampling") {
  const Dataset ds = make_synthetic(30, 3, 4);
  const auto all = sample_background(ds, 100, 7);
  CHECK(all.m() == 30);
  CHECK(all.source_hash == ds.content_hash());
  // Same multiset of rows, seed-shuffled.
  std::vector<double> a(ds.rows().col(0).data(), ds.rows().col(0).data() + 30);
  std::vector<double> b(all.rows.col(0).data(), all.rows.col(0).data() + 30);
  CHECK(a != b);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
  CHECK(sample_background(ds, 10, 7).rows == sample_background(ds, 10, 7).rows);
  CHECK(sample_background(ds, 1, 7).m() == 1);

  const double nan = std::numeric_limits<double>::quiet_NaN();
  Matrix x(4, 1);
  x << 1, nan, 3, 5;
  const Dataset holes = make_dataset(x, {0, 1, 0, 1});
  const auto model = fit_pipeline(
      PipelineSpec{{TransformerKind::mean_impute}, {EstimatorKind::logistic_regression, {}, 0}}, holes);
  const auto bg = sample_background(holes, 4, 1, &model);
  CHECK_FALSE(bg.rows.hasNaN());
  CHECK((bg.rows.array() == 3.0).count() == 2);
}

TEST_CASE("single background row replaces absent features") {
  const Matrix bg = (Matrix(1, 2) << 10, 20).finished();
  const ScoreFunction f = [](const Matrix& r) { return Vector(r.col(0).cwiseProduct(r.col(1))); };
  const Vector x = row({1, 2});
  CHECK(coalition_value(f, x, background_of(bg), {1, 0}) == 20.0);
  CHECK(coalition_value(f, x, background_of(bg), {0, 1}) == 20.0);
  CHECK(coalition_value(f, x, background_of(bg), {0, 0}) == 200.0);
}

TEST_CASE("explainer selection rule") {
  FittedPipeline m;
  CHECK(select_explainer(m, 5).method == ExplainMethod::exact);
  CHECK(select_explainer(m, 12).method == ExplainMethod::exact);
  const auto big = select_explainer(m, 30);
  CHECK(big.method == ExplainMethod::kernel);
  CHECK(big.n_coalitions == 2048);
  CHECK(select_explainer(m, 13, 12, 1'000'000).n_coalitions == (1 << 13) - 2);
}

TEST_CASE("explain_split: local accuracy, empty input, constant model") {
  const Dataset ds = make_synthetic(50, 4, 1);
  const auto model = fit_pipeline(
      PipelineSpec{{TransformerKind::standardize}, {EstimatorKind::gradient_boosting, {{"n_rounds", 10}}, 2}}, ds);
  const auto bg = sample_background(ds, 20, 3, &model);
  ExplainOptions options;
  const auto expl = explain_split(model, ds, bg, SplitKind::train, options);
  CHECK(expl.values.rows() == 50);
  CHECK(expl.method == ExplainMethod::exact);
  CHECK(expl.data_hash == ds.content_hash());
  CHECK(expl.background_hash == ds.content_hash());
  for (Eigen::Index i = 0; i < 50; ++i) {
    CHECK(std::abs(expl.values.row(i).sum() + expl.base_value - expl.model_score(i)) <= 1e-9);
  }

  options.force = ExplainerChoice{ExplainMethod::kernel, 14};
  const auto kern = explain_split(model, ds, bg, SplitKind::train, options);
  CHECK(kern.method == ExplainMethod::kernel);
  CHECK((kern.values - expl.values).cwiseAbs().maxCoeff() <= 1e-6);

  const auto none = explain_rows(model, Matrix(0, 4), ds.feature_names(), bg, SplitKind::test, {});
  CHECK(none.values.rows() == 0);
  CHECK(none.base_value == expl.base_value);

  FittedPipeline constant;
  constant.spec = PipelineSpec{{}, {EstimatorKind::logistic_regression, {}, 0}};
  constant.model = LinearModel{Vector::Zero(4), 0.3};
  constant.n_features = 4;
  const auto flat = explain_split(constant, ds, bg, SplitKind::train, {});
  CHECK(flat.values.isZero(0.0));
  CHECK(flat.base_value == doctest::Approx(sigmoid(0.3)).epsilon(1e-15));
}

TEST_CASE("logistic toy: the weighted feature dominates") {
  Matrix x(6, 2);
  x << -2, 0.3, -1, -0.3, -0.5, 0.1, 0.5, 0.1, 1, -0.3, 2, 0.3;
  const Dataset ds = make_dataset(x, {0, 0, 0, 1, 1, 1});
  FittedPipeline m;
  m.spec = PipelineSpec{{}, {EstimatorKind::logistic_regression, {}, 0}};
  m.model = LinearModel{row({1.5, 0.0}), 0.0};
  m.n_features = 2;
  const auto expl = explain_split(m, ds, sample_background(ds, 6, 0), SplitKind::train, {});
  for (Eigen::Index i = 0; i < 6; ++i) {
    CHECK(expl.values(i, 1) == 0.0);
    CHECK(std::abs(expl.values(i, 0)) > 0.0);
  }
}

TEST_CASE("explanations are worker-count independent and serialize") {
  const Dataset ds = make_synthetic(40, 14, 2);
  const auto model = fit_pipeline(PipelineSpec{{}, {EstimatorKind::logistic_regression, {}, 0}}, ds);
  const auto bg = sample_background(ds, 10, 1);
  ExplainOptions one;
  one.workers = 1;
  one.seed = 9;
  ExplainOptions many = one;
  many.workers = 4;
  const auto a = explain_split(model, ds, bg, SplitKind::test, one);
  const auto b = explain_split(model, ds, bg, SplitKind::test, many);
  CHECK(a.method == ExplainMethod::kernel);
  CHECK(explanation_tsv(a) == explanation_tsv(b));
  const std::string tsv = explanation_tsv(a);
  CHECK(tsv.substr(0, tsv.find('\n')).ends_with("x14\tbase_value\tmodel_score"));
  const auto meta = nlohmann::json::parse(explanation_meta_json(a));
  CHECK(meta.at("method") == "kernel");
  CHECK(meta.at("n_coalitions") == 2048);
  CHECK(local_accuracy_tolerance(ExplainMethod::kernel) == 5e-3);
  for (Eigen::Index i = 0; i < a.values.rows(); ++i) {
    CHECK(std::abs(a.values.row(i).sum() + a.base_value - a.model_score(i)) <= 5e-3);
  }
}
