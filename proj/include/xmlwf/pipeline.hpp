#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "xmlwf/dataset.hpp"
#include "xmlwf/trees.hpp"
#include "xmlwf/types.hpp"

namespace xmlwf {

enum class TransformerKind { mean_impute, standardize };
enum class EstimatorKind { logistic_regression, linear_svm, random_forest, gradient_boosting };

std::string_view to_string(TransformerKind kind);
std::string_view to_string(EstimatorKind kind);
TransformerKind parse_transformer_kind(std::string_view name);
EstimatorKind parse_estimator_kind(std::string_view name);

using HyperParams = std::map<std::string, double>;

struct HyperParamInfo {
  std::string_view name;
  double default_value;
  double lower;
  bool lower_inclusive;
  bool integer;
  std::optional<double> upper = std::nullopt;
};

std::span<const HyperParamInfo> hyperparam_schema(EstimatorKind kind);
bool is_hyperparam(EstimatorKind kind, std::string_view name);

/// Fills defaults and checks every value against its declared range.
HyperParams resolve_hyperparams(EstimatorKind kind, const HyperParams& given);

struct EstimatorSpec {
  EstimatorKind kind = EstimatorKind::logistic_regression;
  HyperParams hyperparams;
  std::uint64_t seed = 0;
  friend bool operator==(const EstimatorSpec&, const EstimatorSpec&) = default;
};

struct PipelineSpec {
  std::vector<TransformerKind> transformers;
  EstimatorSpec estimator;
  friend bool operator==(const PipelineSpec&, const PipelineSpec&) = default;
};

void validate(const PipelineSpec& spec);

/// mean_impute uses `center` only; standardize maps x -> (x - center) / scale.
struct FittedTransformer {
  TransformerKind kind;
  Vector center;
  Vector scale;
};

struct LinearModel {
  Vector weights;
  double bias = 0.0;
};

/// random_forest: score = mean leaf value. gradient_boosting: score =
/// sigmoid(init + learning_rate * sum of leaf values).
struct TreeEnsemble {
  double init = 0.0;
  std::vector<Tree> trees;
};

inline constexpr std::uint32_t kModelFormatVersion = 1;

struct FittedPipeline {
  PipelineSpec spec;
  std::vector<FittedTransformer> transformers;
  std::variant<LinearModel, TreeEnsemble> model;
  std::string train_data_hash;
  std::uint32_t format_version = kModelFormatVersion;
  Eigen::Index n_features = 0;

  bool probabilistic() const { return spec.estimator.kind != EstimatorKind::linear_svm; }
  /// Label 1 iff score >= decision_threshold().
  double decision_threshold() const { return probabilistic() ? 0.5 : 0.0; }
};

double sigmoid(double z);

FittedPipeline fit_pipeline(const PipelineSpec& spec, const Dataset& train);

/// Applies the fitted transformers only.
Matrix transform(const FittedPipeline& model, const Matrix& rows);
Vector predict_scores(const FittedPipeline& model, const Matrix& rows);
LabelVector predict_labels(const FittedPipeline& model, const Matrix& rows);

struct LogisticObjective {
  double loss = 0.0;
  Vector grad_weights;
  double grad_bias = 0.0;
};

/// Mean log-loss plus (l2 / 2) * |w|^2 (the bias is not penalized).
LogisticObjective logistic_objective(const Matrix& x, const LabelVector& y, const Vector& weights,
                                     double bias, double l2);

std::string serialize_model(const FittedPipeline& model);
FittedPipeline deserialize_model(std::string_view blob);

/// Canonical text form of a spec as embedded in model blobs.
std::string canonical_spec_text(const PipelineSpec& spec);
PipelineSpec parse_spec_text(std::string_view text);

}  // namespace xmlwf
