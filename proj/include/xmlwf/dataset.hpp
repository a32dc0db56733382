#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xmlwf/types.hpp"

namespace xmlwf {

/// Immutable binary-classification table: n x d real features (NaN marks a
/// missing cell) plus 0/1 labels. The content hash is fixed at construction
/// and covers names, target, every cell and every label in stored order.
class Dataset {
 public:
  Dataset(std::vector<std::string> feature_names, std::string target_name, Matrix rows,
          LabelVector labels, std::optional<std::string> source_path = std::nullopt);

  const std::vector<std::string>& feature_names() const { return feature_names_; }
  const std::string& target_name() const { return target_name_; }
  const Matrix& rows() const { return rows_; }
  const LabelVector& labels() const { return labels_; }
  const std::string& content_hash() const { return content_hash_; }
  const std::optional<std::string>& source_path() const { return source_path_; }

  Eigen::Index n() const { return rows_.rows(); }
  Eigen::Index d() const { return rows_.cols(); }
  bool has_missing() const { return rows_.hasNaN(); }

  /// Row subset in the given index order; the result gets a fresh hash.
  Dataset subset(std::span<const Eigen::Index> indices) const;

 private:
  std::vector<std::string> feature_names_;
  std::string target_name_;
  Matrix rows_;
  LabelVector labels_;
  std::optional<std::string> source_path_;
  std::string content_hash_;
};

struct FoldAssignment {
  int k = 0;
  std::vector<int> fold_of;
  std::uint64_t seed = 0;
};

/// Tab-separated canonical form: header (features then target), one line per
/// row with shortest round-trip reals, NaN as an empty field and the label
/// last. Lines are joined by '\n' without a trailing newline.
std::string canonical_serialization(const Dataset& dataset);

std::string content_hash(const Dataset& dataset);

Dataset load_csv(const std::filesystem::path& path, const std::string& target_name);

/// Parses a canonical snapshot (the inverse of canonical_serialization).
Dataset parse_snapshot(std::string_view text, std::optional<std::string> source = std::nullopt);
Dataset load_snapshot(const std::filesystem::path& path);

std::pair<Dataset, Dataset> split_holdout(const Dataset& dataset, double test_fraction,
                                          std::uint64_t seed);

FoldAssignment stratified_kfold(const LabelVector& labels, int k, std::uint64_t seed);

/// Synthetic benchmark generator: i.i.d. standard normal features x1..xd and
/// label 1 iff x1 + x2 + x3 + noise > 0 with noise ~ Normal(0, noise_std^2).
Dataset make_synthetic(Eigen::Index n, Eigen::Index d, std::uint64_t seed,
                       double noise_std = 0.25);

/// CSV text for a dataset with the label column last (used by `init`).
std::string to_csv(const Dataset& dataset);

}  // namespace xmlwf
