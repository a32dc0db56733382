#include "xmlwf/trees.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "xmlwf/error.hpp"

namespace xmlwf {

namespace {

// Relative slack for treating two impurity values as tied.
constexpr double kTieSlack = 1e-12;

struct Split {
  Eigen::Index feature = -1;
  double threshold = 0.0;
  double criterion = std::numeric_limits<double>::infinity();
};

double midpoint(double lo, double hi) {
  const double mid = lo + (hi - lo) / 2.0;
  // Adjacent doubles can round the midpoint up to `hi`.
  return mid < hi ? mid : lo;
}

// Per-node split statistics: classification tracks (count, ones), regression
// tracks (count, sum, sum of squares).
struct Stats {
  double count = 0.0;
  double sum = 0.0;
  double sum_sq = 0.0;

  void add(double v) {
    count += 1.0;
    sum += v;
    sum_sq += v * v;
  }
  void remove(double v) {
    count -= 1.0;
    sum -= v;
    sum_sq -= v * v;
  }
};

double gini_weighted(const Stats& s) {
  // count * gini = count * (1 - p^2 - (1-p)^2) = 2 * ones * (count - ones) / count
  if (s.count <= 0.0) return 0.0;
  return 2.0 * s.sum * (s.count - s.sum) / s.count;
}

double sse(const Stats& s) {
  if (s.count <= 0.0) return 0.0;
  return std::max(0.0, s.sum_sq - s.sum * s.sum / s.count);
}

enum class Criterion { gini, squared_error };

class TreeBuilder {
 public:
  TreeBuilder(const Matrix& x, const Vector& target, Criterion criterion, const TreeOptions& options,
              Rng& rng, std::function<double(std::span<const Eigen::Index>)> leaf_value)
      : x_(x),
        target_(target),
        criterion_(criterion),
        options_(options),
        rng_(rng),
        leaf_value_(std::move(leaf_value)) {
    if (options_.max_depth < 0) throw Error(Errc::InvalidArgument, "max_depth must be >= 0");
    if (options_.min_samples_leaf < 1) {
      throw Error(Errc::InvalidArgument, "min_samples_leaf must be >= 1");
    }
  }

  Tree build(std::span<const Eigen::Index> sample) {
    if (sample.empty()) throw Error(Errc::InvalidArgument, "cannot fit a tree on zero samples");
    Tree tree;
    std::vector<Eigen::Index> indices(sample.begin(), sample.end());
    struct Pending {
      std::size_t node;
      std::size_t begin;
      std::size_t end;
      int depth;
    };
    tree.nodes.emplace_back();
    std::vector<Pending> stack{{0, 0, indices.size(), 0}};
    while (!stack.empty()) {
      const Pending job = stack.back();
      stack.pop_back();
      std::span<Eigen::Index> part(indices.data() + job.begin, job.end - job.begin);
      const Split split = job.depth < options_.max_depth ? best_split(part) : Split{};
      if (split.feature < 0) {
        tree.nodes[job.node].value = leaf_value_(part);
        continue;
      }
      const auto mid = std::stable_partition(part.begin(), part.end(), [&](Eigen::Index i) {
        return x_(i, split.feature) <= split.threshold;
      });
      const auto left_count = static_cast<std::size_t>(mid - part.begin());
      const auto left = tree.nodes.size();
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      auto& node = tree.nodes[job.node];
      node.feature = split.feature;
      node.threshold = split.threshold;
      node.left = static_cast<std::int64_t>(left);
      node.right = static_cast<std::int64_t>(left + 1);
      // Right child pushed first so the left subtree is expanded first.
      stack.push_back({left + 1, job.begin + left_count, job.end, job.depth + 1});
      stack.push_back({left, job.begin, job.begin + left_count, job.depth + 1});
    }
    return tree;
  }

 private:
  double impurity(const Stats& s) const {
    return criterion_ == Criterion::gini ? gini_weighted(s) : sse(s);
  }

  std::vector<Eigen::Index> candidate_features() {
    const auto d = x_.cols();
    std::vector<Eigen::Index> features(static_cast<std::size_t>(d));
    std::iota(features.begin(), features.end(), Eigen::Index{0});
    const auto k = options_.features_per_split;
    if (k > 0 && k < d) {
      // Partial Fisher-Yates: the first k entries become the random subset.
      for (Eigen::Index i = 0; i < k; ++i) {
        const auto j = i + static_cast<Eigen::Index>(rng_.below(static_cast<std::uint64_t>(d - i)));
        std::swap(features[static_cast<std::size_t>(i)], features[static_cast<std::size_t>(j)]);
      }
      features.resize(static_cast<std::size_t>(k));
      std::sort(features.begin(), features.end());
    }
    return features;
  }

  Split best_split(std::span<Eigen::Index> part) {
    Split best;
    const auto n = part.size();
    const auto min_leaf = static_cast<std::size_t>(options_.min_samples_leaf);
    if (n < 2 * min_leaf) return best;
    Stats total;
    for (auto i : part) total.add(target_(i));
    const double parent = impurity(total);
    if (parent <= 0.0) return best;

    std::vector<Eigen::Index> order(part.begin(), part.end());
    for (const auto feature : candidate_features()) {
      std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        const double va = x_(a, feature);
        const double vb = x_(b, feature);
        return va < vb || (va == vb && a < b);
      });
      Stats left;
      Stats right = total;
      for (std::size_t pos = 0; pos + 1 < n; ++pos) {
        const auto i = order[pos];
        left.add(target_(i));
        right.remove(target_(i));
        const double lo = x_(i, feature);
        const double hi = x_(order[pos + 1], feature);
        if (lo == hi) continue;
        if (pos + 1 < min_leaf || n - pos - 1 < min_leaf) continue;
        const double value = impurity(left) + impurity(right);
        if (best.feature < 0 || value < best.criterion - kTieSlack * std::max(1.0, std::abs(best.criterion))) {
          best = Split{feature, midpoint(lo, hi), value};
        }
      }
    }
    return best;
  }

  const Matrix& x_;
  const Vector& target_;
  Criterion criterion_;
  TreeOptions options_;
  Rng& rng_;
  std::function<double(std::span<const Eigen::Index>)> leaf_value_;
};

}  // namespace

int Tree::depth() const {
  if (nodes.empty()) return 0;
  int deepest = 0;
  std::vector<std::pair<std::size_t, int>> stack{{0, 0}};
  while (!stack.empty()) {
    auto [i, level] = stack.back();
    stack.pop_back();
    deepest = std::max(deepest, level);
    if (!nodes[i].is_leaf()) {
      stack.emplace_back(static_cast<std::size_t>(nodes[i].left), level + 1);
      stack.emplace_back(static_cast<std::size_t>(nodes[i].right), level + 1);
    }
  }
  return deepest;
}

Tree fit_classification_tree(const Matrix& x, const LabelVector& y,
                             std::span<const Eigen::Index> sample, const TreeOptions& options,
                             Rng& rng) {
  const Vector target = y.cast<double>();
  auto frequency = [&target](std::span<const Eigen::Index> idx) {
    double ones = 0.0;
    for (auto i : idx) ones += target(i);
    return ones / static_cast<double>(idx.size());
  };
  TreeBuilder builder(x, target, Criterion::gini, options, rng, frequency);
  return builder.build(sample);
}

Tree fit_regression_tree(
    const Matrix& x, const Vector& target, std::span<const Eigen::Index> sample,
    const TreeOptions& options, Rng& rng,
    const std::function<double(std::span<const Eigen::Index>)>& leaf_value) {
  TreeBuilder builder(x, target, Criterion::squared_error, options, rng, leaf_value);
  return builder.build(sample);
}

double split_gini(const Matrix& x, const LabelVector& y, std::span<const Eigen::Index> sample,
                  Eigen::Index feature, double threshold) {
  Stats left;
  Stats right;
  for (auto i : sample) {
    (x(i, feature) <= threshold ? left : right).add(static_cast<double>(y(i)));
  }
  return (gini_weighted(left) + gini_weighted(right)) / static_cast<double>(sample.size());
}

}  // namespace xmlwf
