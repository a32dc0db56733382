#include "xmlwf/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "xmlwf/error.hpp"
#include "xmlwf/rng.hpp"
#include "xmlwf/util.hpp"

namespace xmlwf {

namespace {

constexpr std::array kLogisticSchema{
    HyperParamInfo{"learning_rate", 0.1, 0.0, false, false},
    HyperParamInfo{"max_iter", 500, 0.0, true, true},
    HyperParamInfo{"tol", 1e-6, 0.0, true, false},
    HyperParamInfo{"l2", 1e-4, 0.0, true, false},
};
constexpr std::array kSvmSchema{
    HyperParamInfo{"lambda", 1e-2, 0.0, false, false},
    HyperParamInfo{"epochs", 100, 0.0, true, true},
};
constexpr std::array kForestSchema{
    HyperParamInfo{"n_trees", 100, 1.0, true, true},
    HyperParamInfo{"max_depth", 8, 1.0, true, true},
    HyperParamInfo{"min_samples_leaf", 1, 1.0, true, true},
    HyperParamInfo{"bootstrap", 1, 0.0, true, true, 1.0},
};
constexpr std::array kBoostingSchema{
    HyperParamInfo{"n_rounds", 100, 0.0, true, true},
    HyperParamInfo{"learning_rate", 0.1, 0.0, false, false},
    HyperParamInfo{"max_depth", 3, 1.0, true, true},
    HyperParamInfo{"min_samples_leaf", 1, 1.0, true, true},
};

int as_int(const HyperParams& hp, const char* name) {
  return static_cast<int>(hp.at(name));
}

void require_complete(const Matrix& x) {
  if (x.hasNaN()) {
    throw Error(Errc::NaNWithoutImputer, "missing cells reach the estimator; add mean_impute");
  }
}

LinearModel fit_logistic(const Matrix& x, const LabelVector& y, const HyperParams& hp) {
  const double lr = hp.at("learning_rate");
  const int max_iter = as_int(hp, "max_iter");
  const double tol = hp.at("tol");
  const double l2 = hp.at("l2");
  LinearModel model{Vector::Zero(x.cols()), 0.0};
  for (int iter = 0; iter < max_iter; ++iter) {
    const auto obj = logistic_objective(x, y, model.weights, model.bias, l2);
    if (!std::isfinite(obj.loss) || !obj.grad_weights.allFinite() || !std::isfinite(obj.grad_bias)) {
      throw Error(Errc::NonFiniteLoss,
                  "logistic loss diverged at iteration " + std::to_string(iter) +
                      "; lower learning_rate");
    }
    const double grad_norm = std::max(obj.grad_weights.cwiseAbs().maxCoeff(), std::abs(obj.grad_bias));
    if (grad_norm < tol) break;
    model.weights -= lr * obj.grad_weights;
    model.bias -= lr * obj.grad_bias;
  }
  return model;
}

// Pegasos SGD on hinge loss. The bias rides along as a constant feature and
// is shrunk and projected together with the weights.
LinearModel fit_linear_svm(const Matrix& x, const LabelVector& y, const HyperParams& hp,
                           std::uint64_t seed) {
  const double lambda = hp.at("lambda");
  const int epochs = as_int(hp, "epochs");
  const auto n = x.rows();
  Vector w = Vector::Zero(x.cols());
  double b = 0.0;
  Rng rng(seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const double radius = 1.0 / std::sqrt(lambda);
  std::uint64_t t = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(std::span<Eigen::Index>(order));
    for (auto i : order) {
      ++t;
      const double eta = 1.0 / (lambda * static_cast<double>(t));
      const double sign = y(i) == 1 ? 1.0 : -1.0;
      const double margin = sign * (x.row(i).dot(w) + b);
      w *= 1.0 - eta * lambda;
      b *= 1.0 - eta * lambda;
      if (margin < 1.0) {
        w += (eta * sign) * x.row(i).transpose();
        b += eta * sign;
      }
      const double norm = std::sqrt(w.squaredNorm() + b * b);
      if (norm > radius) {
        w *= radius / norm;
        b *= radius / norm;
      }
    }
    if (!w.allFinite() || !std::isfinite(b)) {
      throw Error(Errc::NonFiniteLoss, "linear_svm diverged in epoch " + std::to_string(epoch));
    }
  }
  return {w, b};
}

TreeEnsemble fit_forest(const Matrix& x, const LabelVector& y, const HyperParams& hp,
                        std::uint64_t seed) {
  const int n_trees = as_int(hp, "n_trees");
  TreeOptions options;
  options.max_depth = as_int(hp, "max_depth");
  options.min_samples_leaf = as_int(hp, "min_samples_leaf");
  options.features_per_split =
      static_cast<int>(std::ceil(std::sqrt(static_cast<double>(x.cols()))));
  const bool bootstrap = hp.at("bootstrap") != 0.0;
  const auto n = x.rows();
  TreeEnsemble forest;
  forest.trees.reserve(static_cast<std::size_t>(n_trees));
  std::vector<Eigen::Index> sample(static_cast<std::size_t>(n));
  for (int t = 0; t < n_trees; ++t) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    if (bootstrap) {
      for (auto& s : sample) s = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    } else {
      std::iota(sample.begin(), sample.end(), Eigen::Index{0});
    }
    forest.trees.push_back(fit_classification_tree(x, y, sample, options, rng));
  }
  return forest;
}

TreeEnsemble fit_boosting(const Matrix& x, const LabelVector& y, const HyperParams& hp,
                          std::uint64_t seed) {
  const int rounds = as_int(hp, "n_rounds");
  const double lr = hp.at("learning_rate");
  TreeOptions options;
  options.max_depth = as_int(hp, "max_depth");
  options.min_samples_leaf = as_int(hp, "min_samples_leaf");
  options.features_per_split = 0;
  const auto n = x.rows();
  const Vector target = y.cast<double>();
  const double p = target.mean();
  TreeEnsemble ensemble;
  ensemble.init = std::log(p / (1.0 - p));
  Vector f = Vector::Constant(n, ensemble.init);
  Vector prob(n);
  Vector residual(n);
  std::vector<Eigen::Index> sample(static_cast<std::size_t>(n));
  std::iota(sample.begin(), sample.end(), Eigen::Index{0});
  Rng rng(seed);
  // One Newton step per leaf: sum(residual) / sum(p (1 - p)).
  auto newton_leaf = [&](std::span<const Eigen::Index> idx) {
    double num = 0.0;
    double den = 0.0;
    for (auto i : idx) {
      num += residual(i);
      den += prob(i) * (1.0 - prob(i));
    }
    return num / std::max(den, 1e-12);
  };
  for (int round = 0; round < rounds; ++round) {
    for (Eigen::Index i = 0; i < n; ++i) {
      prob(i) = sigmoid(f(i));
      residual(i) = target(i) - prob(i);
    }
    Tree tree = fit_regression_tree(x, residual, sample, options, rng, newton_leaf);
    for (Eigen::Index i = 0; i < n; ++i) f(i) += lr * tree.predict(x.row(i));
    if (!f.allFinite()) {
      throw Error(Errc::NonFiniteLoss, "boosting diverged at round " + std::to_string(round));
    }
    ensemble.trees.push_back(std::move(tree));
  }
  return ensemble;
}

}  // namespace

std::string_view to_string(TransformerKind kind) {
  switch (kind) {
    case TransformerKind::mean_impute: return "mean_impute";
    case TransformerKind::standardize: return "standardize";
  }
  return "?";
}

std::string_view to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::logistic_regression: return "logistic_regression";
    case EstimatorKind::linear_svm: return "linear_svm";
    case EstimatorKind::random_forest: return "random_forest";
    case EstimatorKind::gradient_boosting: return "gradient_boosting";
  }
  return "?";
}

TransformerKind parse_transformer_kind(std::string_view name) {
  if (name == "mean_impute") return TransformerKind::mean_impute;
  if (name == "standardize") return TransformerKind::standardize;
  throw Error(Errc::InvalidArgument, "unknown transformer '" + std::string(name) + "'");
}

EstimatorKind parse_estimator_kind(std::string_view name) {
  for (auto kind : {EstimatorKind::logistic_regression, EstimatorKind::linear_svm,
                    EstimatorKind::random_forest, EstimatorKind::gradient_boosting}) {
    if (to_string(kind) == name) return kind;
  }
  throw Error(Errc::InvalidArgument, "unknown estimator '" + std::string(name) + "'");
}

std::span<const HyperParamInfo> hyperparam_schema(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::logistic_regression: return kLogisticSchema;
    case EstimatorKind::linear_svm: return kSvmSchema;
    case EstimatorKind::random_forest: return kForestSchema;
    case EstimatorKind::gradient_boosting: return kBoostingSchema;
  }
  return {};
}

bool is_hyperparam(EstimatorKind kind, std::string_view name) {
  const auto schema = hyperparam_schema(kind);
  return std::any_of(schema.begin(), schema.end(),
                     [&](const HyperParamInfo& info) { return info.name == name; });
}

HyperParams resolve_hyperparams(EstimatorKind kind, const HyperParams& given) {
  HyperParams resolved;
  for (const auto& [name, value] : given) {
    if (!is_hyperparam(kind, name)) {
      throw Error(Errc::InvalidArgument, "'" + name + "' is not a hyperparameter of " +
                                             std::string(to_string(kind)));
    }
  }
  for (const auto& info : hyperparam_schema(kind)) {
    const std::string name(info.name);
    const auto it = given.find(name);
    const double value = it == given.end() ? info.default_value : it->second;
    const bool low_ok = info.lower_inclusive ? value >= info.lower : value > info.lower;
    const bool high_ok = !info.upper || value <= *info.upper;
    if (!std::isfinite(value) || !low_ok || !high_ok) {
      throw Error(Errc::InvalidArgument, "hyperparameter " + name + "=" + format_real(value) +
                                             " is out of range");
    }
    if (info.integer && std::floor(value) != value) {
      throw Error(Errc::InvalidArgument, "hyperparameter " + name + " must be an integer");
    }
    resolved[name] = value;
  }
  return resolved;
}

void validate(const PipelineSpec& spec) {
  const auto& t = spec.transformers;
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t j = i + 1; j < t.size(); ++j) {
      if (t[i] == t[j]) {
        throw Error(Errc::InvalidArgument,
                    "transformer " + std::string(to_string(t[i])) + " appears twice");
      }
      if (t[i] == TransformerKind::standardize && t[j] == TransformerKind::mean_impute) {
        throw Error(Errc::InvalidArgument, "mean_impute must precede standardize");
      }
    }
  }
  resolve_hyperparams(spec.estimator.kind, spec.estimator.hyperparams);
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

LogisticObjective logistic_objective(const Matrix& x, const LabelVector& y, const Vector& weights,
                                     double bias, double l2) {
  const auto n = static_cast<double>(x.rows());
  const Vector z = (x * weights).array() + bias;
  LogisticObjective out;
  Vector residual(z.size());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double zi = z(i);
    // log(1 + e^z) - y z, evaluated without overflow.
    loss += std::max(zi, 0.0) + std::log1p(std::exp(-std::abs(zi))) - y(i) * zi;
    residual(i) = sigmoid(zi) - y(i);
  }
  out.loss = loss / n + 0.5 * l2 * weights.squaredNorm();
  out.grad_weights = x.transpose() * residual / n + l2 * weights;
  out.grad_bias = residual.sum() / n;
  return out;
}

FittedPipeline fit_pipeline(const PipelineSpec& spec, const Dataset& train) {
  validate(spec);
  const LabelVector& y = train.labels();
  const int ones = y.sum();
  if (ones == 0 || ones == y.size()) {
    throw Error(Errc::SingleClassTrain, "training labels contain a single class");
  }
  const bool imputes = std::find(spec.transformers.begin(), spec.transformers.end(),
                                 TransformerKind::mean_impute) != spec.transformers.end();
  if (!imputes && train.has_missing()) {
    throw Error(Errc::NaNWithoutImputer, "training data has missing cells but no mean_impute");
  }

  FittedPipeline model;
  model.spec = spec;
  model.spec.estimator.hyperparams = resolve_hyperparams(spec.estimator.kind, spec.estimator.hyperparams);
  model.train_data_hash = train.content_hash();
  model.n_features = train.d();

  Matrix x = train.rows();
  const auto d = x.cols();
  for (auto kind : spec.transformers) {
    FittedTransformer fitted{kind, Vector::Zero(d), Vector::Ones(d)};
    if (kind == TransformerKind::mean_impute) {
      for (Eigen::Index j = 0; j < d; ++j) {
        double sum = 0.0;
        Eigen::Index count = 0;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          if (!std::isnan(x(i, j))) {
            sum += x(i, j);
            ++count;
          }
        }
        fitted.center(j) = count > 0 ? sum / static_cast<double>(count) : 0.0;
      }
    } else {
      fitted.center = x.colwise().mean().transpose();
      for (Eigen::Index j = 0; j < d; ++j) {
        const double var = (x.col(j).array() - fitted.center(j)).square().mean();
        const double sd = std::sqrt(var);
        fitted.scale(j) = sd > 0.0 ? sd : 1.0;
      }
    }
    model.transformers.push_back(fitted);
    FittedPipeline partial;
    partial.transformers = {model.transformers.back()};
    x = transform(partial, x);
  }

  const auto& hp = model.spec.estimator.hyperparams;
  const auto seed = spec.estimator.seed;
  switch (spec.estimator.kind) {
    case EstimatorKind::logistic_regression: model.model = fit_logistic(x, y, hp); break;
    case EstimatorKind::linear_svm: model.model = fit_linear_svm(x, y, hp, seed); break;
    case EstimatorKind::random_forest: model.model = fit_forest(x, y, hp, seed); break;
    case EstimatorKind::gradient_boosting: model.model = fit_boosting(x, y, hp, seed); break;
  }
  return model;
}

Matrix transform(const FittedPipeline& model, const Matrix& rows) {
  Matrix x = rows;
  for (const auto& t : model.transformers) {
    if (t.center.size() != x.cols()) {
      throw Error(Errc::DimensionMismatch, "expected " + std::to_string(t.center.size()) +
                                               " columns, got " + std::to_string(x.cols()));
    }
    if (t.kind == TransformerKind::mean_impute) {
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        x.col(j) = x.col(j).unaryExpr([c = t.center(j)](double v) { return std::isnan(v) ? c : v; });
      }
    } else {
      x = (x.rowwise() - t.center.transpose()).array().rowwise() / t.scale.transpose().array();
    }
  }
  return x;
}

Vector predict_scores(const FittedPipeline& model, const Matrix& rows) {
  if (rows.cols() != model.n_features) {
    throw Error(Errc::DimensionMismatch, "model expects " + std::to_string(model.n_features) +
                                             " columns, got " + std::to_string(rows.cols()));
  }
  const Matrix x = transform(model, rows);
  require_complete(x);
  const auto n = x.rows();
  Vector scores(n);
  switch (model.spec.estimator.kind) {
    case EstimatorKind::logistic_regression: {
      const auto& lin = std::get<LinearModel>(model.model);
      const Vector z = (x * lin.weights).array() + lin.bias;
      for (Eigen::Index i = 0; i < n; ++i) scores(i) = sigmoid(z(i));
      break;
    }
    case EstimatorKind::linear_svm: {
      const auto& lin = std::get<LinearModel>(model.model);
      scores = (x * lin.weights).array() + lin.bias;
      break;
    }
    case EstimatorKind::random_forest: {
      const auto& forest = std::get<TreeEnsemble>(model.model);
      for (Eigen::Index i = 0; i < n; ++i) {
        double sum = 0.0;
        for (const auto& tree : forest.trees) sum += tree.predict(x.row(i));
        scores(i) = sum / static_cast<double>(forest.trees.size());
      }
      break;
    }
    case EstimatorKind::gradient_boosting: {
      const auto& ensemble = std::get<TreeEnsemble>(model.model);
      const double lr = model.spec.estimator.hyperparams.at("learning_rate");
      for (Eigen::Index i = 0; i < n; ++i) {
        double f = ensemble.init;
        for (const auto& tree : ensemble.trees) f += lr * tree.predict(x.row(i));
        scores(i) = sigmoid(f);
      }
      break;
    }
  }
  return scores;
}

LabelVector predict_labels(const FittedPipeline& model, const Matrix& rows) {
  const Vector scores = predict_scores(model, rows);
  const double threshold = model.decision_threshold();
  return (scores.array() >= threshold).cast<int>();
}

}  // namespace xmlwf
