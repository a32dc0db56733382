#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "xmlwf/dataset.hpp"
#include "xmlwf/pipeline.hpp"
#include "xmlwf/types.hpp"

namespace xmlwf {

enum class Metric { accuracy, balanced_accuracy, f1, roc_auc };

std::string_view to_string(Metric metric);
Metric parse_metric(std::string_view name);
/// roc_auc ranks scores; the others compare hard labels.
inline bool consumes_scores(Metric metric) { return metric == Metric::roc_auc; }

/// `values` holds 0/1 labels for label metrics and raw scores for roc_auc.
double compute_metric(Metric metric, const LabelVector& y_true, const Vector& values);

/// Convenience: picks labels or scores from the model as the metric needs.
double evaluate_metric(Metric metric, const FittedPipeline& model, const Dataset& data);

using Candidate = HyperParams;

struct ParamGrid {
  std::vector<std::pair<std::string, std::vector<double>>> entries;
};

struct Sampler {
  enum class Kind { choice, uniform, log_uniform };
  Kind kind = Kind::choice;
  std::vector<double> choices;
  double lo = 0.0;
  double hi = 0.0;
};

struct ParamDistribution {
  std::vector<std::pair<std::string, Sampler>> entries;
  int n_samples = 1;
};

using SearchSpace = std::variant<ParamGrid, ParamDistribution>;

/// Cartesian product; the last-declared name varies fastest.
std::vector<Candidate> expand_grid(const ParamGrid& grid);

/// n_samples draws from one stream; names are consumed in declared order.
std::vector<Candidate> sample_params(const ParamDistribution& dist, std::uint64_t seed);

/// Per-metric fold scores, one entry per fold in fold order.
using FoldScores = std::map<Metric, std::vector<double>>;

/// The candidate overlays the template's hyperparameters.
PipelineSpec apply_candidate(const PipelineSpec& spec_template, const Candidate& candidate);

FoldScores cross_validate(const PipelineSpec& spec_template, const Candidate& candidate,
                          const Dataset& train, const FoldAssignment& folds,
                          std::span<const Metric> metrics, unsigned workers = 1);

struct SearchOptions {
  int k = 5;
  Metric selection_metric = Metric::roc_auc;
  std::vector<Metric> metrics{Metric::accuracy, Metric::balanced_accuracy, Metric::f1,
                              Metric::roc_auc};
  std::uint64_t seed = 0;
  unsigned workers = 1;
};

struct SearchResult {
  std::vector<Candidate> candidates;
  std::vector<Metric> metrics;
  /// candidates x k per metric.
  std::map<Metric, Matrix> fold_scores;
  std::map<Metric, Vector> mean_scores;
  std::map<Metric, Vector> std_scores;
  Metric selection_metric = Metric::roc_auc;
  Eigen::Index best_index = 0;
  int k = 0;
  FittedPipeline best_model;

  const Vector& mean_score() const { return mean_scores.at(selection_metric); }
  const Vector& std_score() const { return std_scores.at(selection_metric); }
  const Candidate& best_candidate() const {
    return candidates[static_cast<std::size_t>(best_index)];
  }
};

/// Argmax with ties resolved to the smallest index.
Eigen::Index argmax_first(const Vector& values);

SearchResult run_search(const SearchSpace& space, const PipelineSpec& spec_template,
                        const Dataset& train, const SearchOptions& options);

}  // namespace xmlwf
