#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "support.hpp"
#include "xmlwf/pipeline.hpp"
#include "xmlwf/trees.hpp"

using namespace xmlwf;
using namespace xmlwf::testing;

namespace {

PipelineSpec spec_of(EstimatorKind kind, HyperParams hp = {}, std::vector<TransformerKind> t = {},
                     std::uint64_t seed = 1) {
  return PipelineSpec{std::move(t), EstimatorSpec{kind, std::move(hp), seed}};
}

double accuracy_on(const FittedPipeline& m, const Dataset& ds) {
  return (predict_labels(m, ds.rows()).array() == ds.labels().array()).cast<double>().mean();
}

// Independent weighted Gini of one split.
double oracle_gini(const Matrix& x, const LabelVector& y, Eigen::Index f, double t) {
  double nl = 0, nr = 0, pl = 0, pr = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (x(i, f) <= t) {
      nl += 1;
      pl += y(i);
    } else {
      nr += 1;
      pr += y(i);
    }
  }
  auto gini = [](double n, double p) { return n == 0 ? 0.0 : 1.0 - (p / n) * (p / n) - ((n - p) / n) * ((n - p) / n); };
  const double n = nl + nr;
  return nl / n * gini(nl, pl) + nr / n * gini(nr, pr);
}

const std::vector<EstimatorKind> kAllKinds{EstimatorKind::logistic_regression, EstimatorKind::linear_svm,
                                           EstimatorKind::random_forest, EstimatorKind::gradient_boosting};

HyperParams small(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::random_forest: return {{"n_trees", 15}, {"max_depth", 4}};
    case EstimatorKind::gradient_boosting: return {{"n_rounds", 15}};
    default: return {};
  }
}

}  // namespace

TEST_CASE("logistic regression separates the toy set") {
  const auto toy = separable_toy();
  const auto m = fit_pipeline(spec_of(EstimatorKind::logistic_regression), toy);
  CHECK(accuracy_on(m, toy) == 1.0);
  CHECK(m.train_data_hash == toy.content_hash());
  CHECK(m.n_features == 1);
}

TEST_CASE("logistic regression with max_iter = 0 stays at zero") {
  const auto toy = separable_toy();
  const auto m = fit_pipeline(spec_of(EstimatorKind::logistic_regression, {{"max_iter", 0}}), toy);
  const auto& lin = std::get<LinearModel>(m.model);
  CHECK(lin.weights.isZero(0.0));
  CHECK(lin.bias == 0.0);
  CHECK((predict_scores(m, toy.rows()).array() == 0.5).all());
  // Tie at 0.5 goes to label 1.
  CHECK((predict_labels(m, toy.rows()).array() == 1).all());
}

TEST_CASE("logistic gradient matches central finite differences") {
  std::mt19937_64 gen(21);
  const Dataset ds = make_synthetic(60, 4, 2);
  for (int point = 0; point < 10; ++point) {
    const Vector w = random_matrix(4, 1, gen).col(0);
    const double b = random_matrix(1, 1, gen)(0, 0);
    const double l2 = 0.05 * point;
    const auto obj = logistic_objective(ds.rows(), ds.labels(), w, b, l2);
    const double h = 1e-6;
    Vector numeric(5);
    for (int j = 0; j < 4; ++j) {
      Vector wp = w, wm = w;
      wp(j) += h;
      wm(j) -= h;
      numeric(j) = (logistic_objective(ds.rows(), ds.labels(), wp, b, l2).loss -
                    logistic_objective(ds.rows(), ds.labels(), wm, b, l2).loss) / (2 * h);
    }
    numeric(4) = (logistic_objective(ds.rows(), ds.labels(), w, b + h, l2).loss -
                  logistic_objective(ds.rows(), ds.labels(), w, b - h, l2).loss) / (2 * h);
    Vector analytic(5);
    analytic << obj.grad_weights, obj.grad_bias;
    const double rel = (analytic - numeric).norm() / std::max(analytic.norm(), numeric.norm());
    CHECK(rel <= 1e-4);
  }
}

TEST_CASE("standardize yields zero mean and unit std; constant columns map to zero") {
  std::mt19937_64 gen(4);
  Matrix x = random_matrix(50, 3, gen, 7.0);
  x.col(0).array() += 1000.0;
  x.col(2).setConstant(3.25);
  std::vector<int> y(50);
  for (int i = 0; i < 50; ++i) y[static_cast<std::size_t>(i)] = i % 2;
  const auto m = fit_pipeline(
      spec_of(EstimatorKind::logistic_regression, {}, {TransformerKind::standardize}), make_dataset(x, y));
  const Matrix z = transform(m, x);
  for (Eigen::Index j = 0; j < 3; ++j) {
    const double mean = z.col(j).mean();
    const double sd = std::sqrt((z.col(j).array() - mean).square().mean());
    CHECK(std::abs(mean) <= 1e-9);
    if (j < 2) CHECK(std::abs(sd - 1.0) <= 1e-9);
  }
  CHECK(z.col(2).isZero(0.0));
}

TEST_CASE("mean_impute fills with observed training means") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Matrix x(4, 2);
  x << 1, nan, 2, 4, nan, 8, 6, nan;
  const auto m = fit_pipeline(
      spec_of(EstimatorKind::logistic_regression, {}, {TransformerKind::mean_impute}),
      make_dataset(x, {0, 1, 0, 1}));
  const Matrix z = transform(m, x);
  CHECK_FALSE(z.hasNaN());
  CHECK(z(2, 0) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(z(0, 1) == doctest::Approx(6.0).epsilon(1e-15));
  CHECK(z(3, 1) == z(0, 1));
}

TEST_CASE("fit errors") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Matrix x(4, 1);
  x << 1, nan, 3, 4;
  CHECK(error_of([&] { fit_pipeline(spec_of(EstimatorKind::logistic_regression), make_dataset(x, {0, 1, 0, 1})); }) ==
        Errc::NaNWithoutImputer);
  x(1, 0) = 2;
  CHECK(error_of([&] { fit_pipeline(spec_of(EstimatorKind::logistic_regression), make_dataset(x, {1, 1, 1, 1})); }) ==
        Errc::SingleClassTrain);
  Matrix big(4, 1);
  big << -1e200, -1e200, 1e200, 1e200;
  CHECK(error_of([&] {
          fit_pipeline(spec_of(EstimatorKind::logistic_regression, {{"learning_rate", 1e300}}),
                       make_dataset(big, {0, 0, 1, 1}));
        }) == Errc::NonFiniteLoss);
  CHECK(error_of([] { validate(spec_of(EstimatorKind::logistic_regression, {{"l2", -1}})); }) ==
        Errc::InvalidArgument);
  CHECK(error_of([] { validate(spec_of(EstimatorKind::random_forest, {{"n_trees", 0}})); }) ==
        Errc::InvalidArgument);
  CHECK(error_of([] { validate(spec_of(EstimatorKind::random_forest, {{"n_trees", 2.5}})); }) ==
        Errc::InvalidArgument);
  CHECK(error_of([] { validate(spec_of(EstimatorKind::linear_svm, {{"l2", 1}})); }) == Errc::InvalidArgument);
  CHECK(error_of([] {
          validate(spec_of(EstimatorKind::linear_svm, {},
                           {TransformerKind::standardize, TransformerKind::mean_impute}));
        }) == Errc::InvalidArgument);
  CHECK(error_of([] {
          validate(spec_of(EstimatorKind::linear_svm, {},
                           {TransformerKind::standardize, TransformerKind::standardize}));
        }) == Errc::InvalidArgument);
}

TEST_CASE("predict errors") {
  const auto toy = separable_toy();
  const auto m = fit_pipeline(spec_of(EstimatorKind::logistic_regression), toy);
  CHECK(error_of([&] { predict_labels(m, Matrix::Zero(2, 3)); }) == Errc::DimensionMismatch);
  Matrix bad(1, 1);
  bad << std::numeric_limits<double>::quiet_NaN();
  CHECK(error_of([&] { predict_scores(m, bad); }) == Errc::NaNWithoutImputer);
  const auto imputing = fit_pipeline(
      spec_of(EstimatorKind::logistic_regression, {}, {TransformerKind::mean_impute}), toy);
  CHECK(std::isfinite(predict_scores(imputing, bad)(0)));
}

TEST_CASE("linear_svm sign rule and margins") {
  FittedPipeline m;
  m.spec = spec_of(EstimatorKind::linear_svm);
  m.model = LinearModel{Vector::Ones(1), 0.0};
  m.n_features = 1;
  Matrix x(3, 1);
  x << -3, 3, 0;
  CHECK(predict_labels(m, x) == (LabelVector(3) << 0, 1, 1).finished());
  CHECK(predict_scores(m, x) == (Vector(3) << -3, 3, 0).finished());
  const auto fitted = fit_pipeline(spec_of(EstimatorKind::linear_svm), separable_toy());
  CHECK(accuracy_on(fitted, separable_toy()) == 1.0);
}

TEST_CASE("random forest stump splits at the midpoint") {
  Matrix x(8, 1);
  x << -4, -3, -2, -1, 1, 2, 3, 4;
  const auto ds = make_dataset(x, {0, 0, 0, 0, 1, 1, 1, 1});
  const auto m = fit_pipeline(
      spec_of(EstimatorKind::random_forest, {{"n_trees", 1}, {"max_depth", 1}, {"bootstrap", 0}}, {}, 3), ds);
  const auto& forest = std::get<TreeEnsemble>(m.model);
  REQUIRE(forest.trees.size() == 1);
  const auto& root = forest.trees[0].nodes[0];
  CHECK(root.feature == 0);
  CHECK(root.threshold == 0.0);
  CHECK(accuracy_on(m, ds) == 1.0);
}

TEST_CASE("forest of identical trees scores like one tree") {
  Tree tree;
  tree.nodes = {TreeNode{0, 0.5, 1, 2, 0.0}, TreeNode{-1, 0, -1, -1, 0.25}, TreeNode{-1, 0, -1, -1, 0.875}};
  FittedPipeline one;
  one.spec = spec_of(EstimatorKind::random_forest);
  one.n_features = 1;
  one.model = TreeEnsemble{0.0, {tree}};
  FittedPipeline two = one;
  two.model = TreeEnsemble{0.0, {tree, tree}};
  Matrix x(3, 1);
  x << -1, 0.5, 2;
  CHECK(predict_scores(one, x) == predict_scores(two, x));
  CHECK(predict_scores(one, x) == (Vector(3) << 0.25, 0.25, 0.875).finished());
}

TEST_CASE("gradient boosting with zero rounds predicts the prior") {
  Matrix x(5, 1);
  x << 1, 2, 3, 4, 5;
  const auto ds = make_dataset(x, {1, 0, 1, 1, 0});
  const auto m = fit_pipeline(spec_of(EstimatorKind::gradient_boosting, {{"n_rounds", 0}}), ds);
  const double expected = sigmoid(std::log(3.0 / 2.0));
  CHECK((predict_scores(m, x).array() - expected).abs().maxCoeff() <= 1e-15);
}

TEST_CASE("gradient boosting and forests fit a nonlinear pattern") {
  const Dataset ds = make_synthetic(200, 3, 6);
  for (auto kind : {EstimatorKind::random_forest, EstimatorKind::gradient_boosting}) {
    const auto m = fit_pipeline(spec_of(kind, small(kind)), ds);
    CHECK(accuracy_on(m, ds) >= 0.9);
  }
}

TEST_CASE("CART root split attains the exhaustive minimum Gini") {
  std::mt19937_64 gen(77);
  for (int trial = 0; trial < 300; ++trial) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(gen() % 11);
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(gen() % 3);
    Matrix x(n, d);
    LabelVector y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) x(i, j) = static_cast<double>(gen() % 5);  // many ties
      y(i) = static_cast<int>(gen() % 2);
    }
    std::vector<Eigen::Index> sample(static_cast<std::size_t>(n));
    std::iota(sample.begin(), sample.end(), 0);
    Rng rng(trial);
    const Tree tree = fit_classification_tree(x, y, sample, {1, 1, static_cast<int>(d)}, rng);

    double best = std::numeric_limits<double>::infinity();
    std::pair<Eigen::Index, double> best_split{-1, 0.0};
    for (Eigen::Index j = 0; j < d; ++j) {
      std::vector<double> values(x.col(j).data(), x.col(j).data() + n);
      std::sort(values.begin(), values.end());
      values.erase(std::unique(values.begin(), values.end()), values.end());
      for (std::size_t v = 0; v + 1 < values.size(); ++v) {
        const double t = (values[v] + values[v + 1]) / 2.0;
        const double g = oracle_gini(x, y, j, t);
        if (g < best - 1e-12) {
          best = g;
          best_split = {j, t};
        }
      }
    }
    const bool pure = y.sum() == 0 || y.sum() == n;
    const auto& root = tree.nodes[0];
    if (pure || best_split.first < 0) {
      CHECK(root.is_leaf());
      continue;
    }
    REQUIRE_FALSE(root.is_leaf());
    CHECK(oracle_gini(x, y, root.feature, root.threshold) == doctest::Approx(best).epsilon(1e-12));
    CHECK(split_gini(x, y, sample, root.feature, root.threshold) ==
          doctest::Approx(best).epsilon(1e-12));
    CHECK(root.feature == best_split.first);
    CHECK(root.threshold == best_split.second);
  }
}

TEST_CASE("fitting is deterministic and labels agree with scores") {
  const Dataset ds = make_synthetic(120, 5, 9);
  for (auto kind : kAllKinds) {
    const auto spec = spec_of(kind, small(kind), {TransformerKind::standardize}, 5);
    const auto a = fit_pipeline(spec, ds);
    const auto b = fit_pipeline(spec, ds);
    CHECK(serialize_model(a) == serialize_model(b));
    const Vector s = predict_scores(a, ds.rows());
    const LabelVector l = predict_labels(a, ds.rows());
    for (Eigen::Index i = 0; i < ds.n(); ++i) CHECK((l(i) == 1) == (s(i) >= a.decision_threshold()));
    if (a.probabilistic()) CHECK(((s.array() >= 0) && (s.array() <= 1)).all());
  }
}

TEST_CASE("model blob: header, size and learned reals") {
  Matrix x(4, 2);
  x << -2, 1, -1, 0, 1, 1, 2, 0;
  const auto ds = make_dataset(x, {0, 0, 1, 1});
  const auto m = fit_pipeline(spec_of(EstimatorKind::logistic_regression), ds);
  const std::string blob = serialize_model(m);
  CHECK(blob == serialize_model(m));
  CHECK(blob.substr(0, 5) == "XMLWF");
  std::uint32_t version = 0;
  std::memcpy(&version, blob.data() + 5, 4);
  CHECK(version == 1);
  const std::string spec_text = canonical_spec_text(m.spec);
  // magic, version, spec, hash, n_features, transformer count, model tag,
  // d + two weights + bias, trailer.
  const std::size_t expected = 5 + 4 + (8 + spec_text.size()) + (8 + 64) + 8 + 4 + 1 + (8 + 2 * 8 + 8) + 32;
  CHECK(blob.size() == expected);
  const auto& lin = std::get<LinearModel>(m.model);
  double stored[3];
  std::memcpy(stored, blob.data() + blob.size() - 32 - 24, 24);
  CHECK(stored[0] == lin.weights(0));
  CHECK(stored[1] == lin.weights(1));
  CHECK(stored[2] == lin.bias);
  CHECK(parse_spec_text(spec_text) == m.spec);
}

TEST_CASE("model blob round trip gives bit-identical predictions") {
  const Dataset ds = make_synthetic(150, 4, 12);
  std::mt19937_64 gen(8);
  const Matrix probe = random_matrix(100, 4, gen, 2.0);
  for (auto kind : kAllKinds) {
    const auto m = fit_pipeline(spec_of(kind, small(kind), {TransformerKind::mean_impute, TransformerKind::standardize}), ds);
    const auto back = deserialize_model(serialize_model(m));
    CHECK(back.spec == m.spec);
    CHECK(back.train_data_hash == m.train_data_hash);
    const Vector a = predict_scores(m, probe), b = predict_scores(back, probe);
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * 100) == 0);
    CHECK(serialize_model(back) == serialize_model(m));
  }
}

TEST_CASE("model blob corruption is detected") {
  const auto m = fit_pipeline(spec_of(EstimatorKind::gradient_boosting, {{"n_rounds", 5}}), make_synthetic(60, 3, 1));
  const std::string blob = serialize_model(m);

  std::string bad_magic = blob;
  bad_magic[0] = 'Y';
  CHECK(error_of([&] { deserialize_model(bad_magic); }) == Errc::BadMagic);

  std::string bad_version = blob;
  bad_version[5] = 2;
  CHECK(error_of([&] { deserialize_model(bad_version); }) == Errc::UnsupportedVersion);

  const std::string cut = blob.substr(0, blob.size() * 2 / 3);  // mid-tree
  CHECK(error_of([&] { deserialize_model(cut); }) == Errc::TruncatedBlob);

  for (std::size_t pos : {std::size_t{40}, blob.size() / 2, blob.size() - 40, blob.size() - 1}) {
    std::string tampered = blob;
    tampered[pos] ^= 0x01;
    CHECK(error_of([&] { deserialize_model(tampered); }) == Errc::HashMismatch);
  }
}
