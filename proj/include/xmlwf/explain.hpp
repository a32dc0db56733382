#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xmlwf/dataset.hpp"
#include "xmlwf/pipeline.hpp"
#include "xmlwf/types.hpp"

namespace xmlwf {

/// Batch model function: one score per input row.
using ScoreFunction = std::function<Vector(const Matrix&)>;

ScoreFunction score_function(const FittedPipeline& model);

/// Reference rows used to marginalize absent features.
struct Background {
  Matrix rows;
  std::string source_hash;
  std::uint64_t seed = 0;

  Eigen::Index m() const { return rows.rows(); }
};

inline constexpr Eigen::Index kDefaultBackgroundSize = 100;
inline constexpr int kDefaultExactLimit = 12;
inline constexpr std::int64_t kMaxCoalitions = 2048;

/// min(m, n) rows drawn without replacement in seed-shuffled order. When
/// `imputer` has a fitted mean_impute step its means replace missing cells.
Background sample_background(const Dataset& train, Eigen::Index m, std::uint64_t seed,
                             const FittedPipeline* imputer = nullptr);

struct Attribution {
  Vector phi;
  double base = 0.0;
};

/// Interventional value function v(S): mean of f over the background with
/// the features in S taken from x. `mask[j]` selects feature j.
double coalition_value(const ScoreFunction& f, const Vector& x, const Background& bg,
                       const std::vector<char>& mask);

/// Exact Shapley values by enumerating all 2^d coalitions, each valued once.
Attribution shapley_exact(const ScoreFunction& f, const Vector& x, const Background& bg,
                          int exact_limit = kDefaultExactLimit);

/// Kernel SHAP: weighted least squares over coalitions with Shapley kernel
/// weights and the efficiency constraint eliminated exactly. Coalition sizes
/// are enumerated outward from the extremes while the budget allows, and the
/// rest is sampled in complementary pairs.
Attribution kernel_shap(const ScoreFunction& f, const Vector& x, const Background& bg,
                        std::int64_t n_coalitions, std::uint64_t seed);

/// Shapley kernel weight (d - 1) / (C(d, s) s (d - s)) of one coalition of size s.
double shapley_kernel_weight(int d, int s);

enum class ExplainMethod { exact, kernel };
enum class SplitKind { train, test };

std::string_view to_string(ExplainMethod method);
std::string_view to_string(SplitKind split);

struct ExplainerChoice {
  ExplainMethod method = ExplainMethod::exact;
  std::int64_t n_coalitions = 0;
};

ExplainerChoice select_explainer(const FittedPipeline& model, Eigen::Index d,
                                 int exact_limit = kDefaultExactLimit,
                                 std::int64_t max_coalitions = kMaxCoalitions);

struct ShapExplanation {
  std::vector<std::string> feature_names;
  Matrix values;  // n x d
  double base_value = 0.0;
  ExplainMethod method = ExplainMethod::exact;
  std::int64_t n_coalitions = 0;
  Vector model_score;
  SplitKind explained_split = SplitKind::train;
  std::string data_hash;
  std::string background_hash;
  std::uint64_t background_seed = 0;
  Eigen::Index background_m = 0;
};

/// Largest |sum(phi) + base - f(x)| a method may leave.
double local_accuracy_tolerance(ExplainMethod method);

struct ExplainOptions {
  int exact_limit = kDefaultExactLimit;
  std::int64_t max_coalitions = kMaxCoalitions;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  /// Overrides the size rule (used to exercise the kernel path at small d).
  std::optional<ExplainerChoice> force;
};

ShapExplanation explain_rows(const FittedPipeline& model, const Matrix& rows,
                             const std::vector<std::string>& feature_names, const Background& bg,
                             SplitKind split, const ExplainOptions& options);

ShapExplanation explain_split(const FittedPipeline& model, const Dataset& data,
                              const Background& bg, SplitKind split, const ExplainOptions& options);

/// `shap/<split>.tsv`: feature columns, then base_value and model_score.
std::string explanation_tsv(const ShapExplanation& explanation);
/// `shap/<split>.meta.json` contents.
std::string explanation_meta_json(const ShapExplanation& explanation);

}  // namespace xmlwf
