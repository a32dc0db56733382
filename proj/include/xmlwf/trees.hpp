#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "xmlwf/rng.hpp"
#include "xmlwf/types.hpp"

namespace xmlwf {

/// Flat, index-linked tree node. feature < 0 marks a leaf.
struct TreeNode {
  std::int64_t feature = -1;
  double threshold = 0.0;
  std::int64_t left = -1;
  std::int64_t right = -1;
  double value = 0.0;

  bool is_leaf() const { return feature < 0; }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct Tree {
  std::vector<TreeNode> nodes;

  /// Rows go left when x[feature] <= threshold.
  template <typename Row>
  double predict(const Row& x) const {
    std::size_t i = 0;
    while (!nodes[i].is_leaf()) {
      const auto& node = nodes[i];
      i = static_cast<std::size_t>(x(node.feature) <= node.threshold ? node.left : node.right);
    }
    return nodes[i].value;
  }

  int depth() const;
  friend bool operator==(const Tree&, const Tree&) = default;
};

struct TreeOptions {
  int max_depth = 8;
  int min_samples_leaf = 1;
  /// Features drawn per split; values >= d evaluate every feature.
  int features_per_split = 0;
};

/// CART classifier on the multiset `sample` of row indices (duplicates allowed
/// for bootstrap). Splits minimize weighted Gini impurity over midpoints of
/// sorted distinct values; ties go to the lowest feature index, then the
/// smallest threshold. Leaves hold the class-1 frequency.
Tree fit_classification_tree(const Matrix& x, const LabelVector& y,
                             std::span<const Eigen::Index> sample, const TreeOptions& options,
                             Rng& rng);

/// Least-squares regression tree on `target`; the leaf value is computed by
/// `leaf_value` from the indices that reach the leaf.
Tree fit_regression_tree(
    const Matrix& x, const Vector& target, std::span<const Eigen::Index> sample,
    const TreeOptions& options, Rng& rng,
    const std::function<double(std::span<const Eigen::Index>)>& leaf_value);

/// Weighted Gini of a (feature, threshold) split over `sample`; exposed for
/// exhaustive-enumeration checks.
double split_gini(const Matrix& x, const LabelVector& y, std::span<const Eigen::Index> sample,
                  Eigen::Index feature, double threshold);

}  // namespace xmlwf
