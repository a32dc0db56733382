#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "xmlwf/dataset.hpp"
#include "xmlwf/explain.hpp"
#include "xmlwf/pipeline.hpp"
#include "xmlwf/tracking.hpp"
#include "xmlwf/types.hpp"

namespace xmlwf {

/// Training runs whose correct fraction falls below this emit a warning.
inline constexpr double kCorrectFractionWarning = 0.9;
inline constexpr int kDefaultTopK = 20;

struct PredictionMask {
  Mask mask;
  Eigen::Index n_correct = 0;
  std::optional<std::string> warning;

  double correct_fraction() const {
    return mask.empty() ? 0.0 : static_cast<double>(n_correct) / static_cast<double>(mask.size());
  }
};

PredictionMask correctly_predicted_mask(const FittedPipeline& model, const Dataset& data,
                                        SplitKind split = SplitKind::train);

struct FeatureImportanceSummary {
  std::vector<std::string> feature_names;
  Vector median_abs_shap;
  Eigen::Index n_used = 0;
  Eigen::Index n_total = 0;
  SplitKind split = SplitKind::train;
  std::string model_run_id;
  std::string data_hash;
};

/// Median of the coefficients; even counts average the two central values.
template <typename Derived>
double median(const Eigen::DenseBase<Derived>& values) {
  std::vector<double> v(values.derived().data(), values.derived().data() + values.size());
  if constexpr (!Derived::IsVectorAtCompileTime) {
    v.clear();
    for (Eigen::Index i = 0; i < values.size(); ++i) v.push_back(values.derived()(i));
  }
  std::sort(v.begin(), v.end());
  const auto mid = v.size() / 2;
  return v.size() % 2 == 1 ? v[mid] : (v[mid - 1] + v[mid]) / 2.0;
}

/// Per-feature median of |phi| over the rows selected by `mask`.
FeatureImportanceSummary median_abs_importance(const ShapExplanation& explanation, const Mask& mask,
                                               const std::string& model_run_id = {});

/// Feature indices by descending median, ties by feature name.
std::vector<std::size_t> ranked_features(const FeatureImportanceSummary& summary);

std::string summary_json(const FeatureImportanceSummary& summary);
FeatureImportanceSummary parse_summary_json(std::string_view text);

struct ChartFiles {
  std::string html;
  std::string svg;
};

/// Horizontal bar chart of the top_k medians as standalone SVG and as a
/// self-contained HTML page (inline data table, hover and click-to-sort script).
ChartFiles render_charts(const FeatureImportanceSummary& summary, int top_k = kDefaultTopK);

/// One-page HTML report of a finished run with its charts embedded.
std::string emit_run_report(const RunRecord& run,
                            const std::vector<FeatureImportanceSummary>& summaries,
                            int top_k = kDefaultTopK);

/// Renders the report into figures/report.html and registers it on the run.
RunRecord write_run_report(RunRecord run, const std::vector<FeatureImportanceSummary>& summaries,
                           int top_k = kDefaultTopK);

}  // namespace xmlwf
