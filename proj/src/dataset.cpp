#include "xmlwf/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "xmlwf/error.hpp"
#include "xmlwf/rng.hpp"
#include "xmlwf/util.hpp"

namespace xmlwf {

namespace {

std::vector<std::string> split_line(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// RFC-4180 record splitter: quoted fields may contain commas, doubled quotes
// and line breaks.
std::vector<std::vector<std::string>> parse_csv_records(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      record.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        record.push_back(std::move(field));
        records.push_back(std::move(record));
      }
      record.clear();
      field.clear();
      any = false;
    } else {
      field.push_back(c);
      any = true;
    }
  }
  if (any || !field.empty()) {
    record.push_back(std::move(field));
    records.push_back(std::move(record));
  }
  return records;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

int parse_label(const std::string& cell, std::size_t line) {
  const auto v = parse_real(trim(cell));
  if (!v || (*v != 0.0 && *v != 1.0)) {
    throw Error(Errc::NonBinaryTarget,
                "line " + std::to_string(line) + ": target value '" + cell + "'");
  }
  return *v == 1.0 ? 1 : 0;
}

}  // namespace

Dataset::Dataset(std::vector<std::string> feature_names, std::string target_name, Matrix rows,
                 LabelVector labels, std::optional<std::string> source_path)
    : feature_names_(std::move(feature_names)),
      target_name_(std::move(target_name)),
      rows_(std::move(rows)),
      labels_(std::move(labels)),
      source_path_(std::move(source_path)) {
  if (rows_.cols() < 1) throw Error(Errc::InvalidArgument, "dataset needs d >= 1");
  if (rows_.rows() < 2) throw Error(Errc::EmptyData, "dataset needs n >= 2");
  if (static_cast<Eigen::Index>(feature_names_.size()) != rows_.cols()) {
    throw Error(Errc::DimensionMismatch, "feature_names length != column count");
  }
  if (labels_.size() != rows_.rows()) {
    throw Error(Errc::LengthMismatch, "labels length != row count");
  }
  for (Eigen::Index i = 0; i < labels_.size(); ++i) {
    if (labels_(i) != 0 && labels_(i) != 1) {
      throw Error(Errc::NonBinaryTarget, "label at row " + std::to_string(i));
    }
  }
  if ((rows_.array().isInf()).any()) {
    throw Error(Errc::InvalidArgument, "infinite cell in dataset");
  }
  content_hash_ = sha256_hex(canonical_serialization(*this));
}

Dataset Dataset::subset(std::span<const Eigen::Index> indices) const {
  Matrix rows(static_cast<Eigen::Index>(indices.size()), d());
  LabelVector labels(static_cast<Eigen::Index>(indices.size()));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    rows.row(static_cast<Eigen::Index>(r)) = rows_.row(indices[r]);
    labels(static_cast<Eigen::Index>(r)) = labels_(indices[r]);
  }
  return Dataset(feature_names_, target_name_, std::move(rows), std::move(labels), source_path_);
}

std::string canonical_serialization(const Dataset& dataset) {
  std::string out;
  for (const auto& name : dataset.feature_names()) {
    out += name;
    out += '\t';
  }
  out += dataset.target_name();
  const Matrix& rows = dataset.rows();
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    out += '\n';
    for (Eigen::Index j = 0; j < rows.cols(); ++j) {
      const double v = rows(i, j);
      if (!std::isnan(v)) out += format_real(v);
      out += '\t';
    }
    out += dataset.labels()(i) == 1 ? '1' : '0';
  }
  return out;
}

std::string content_hash(const Dataset& dataset) { return dataset.content_hash(); }

Dataset load_csv(const std::filesystem::path& path, const std::string& target_name) {
  const auto text = read_file(path);
  const auto records = parse_csv_records(text);
  if (records.empty()) throw Error(Errc::MissingTarget, "empty file " + path.string());
  std::vector<std::string> header;
  for (const auto& h : records.front()) header.push_back(trim(h));
  const auto target_it = std::find(header.begin(), header.end(), target_name);
  if (target_it == header.end()) {
    throw Error(Errc::MissingTarget, "header lacks '" + target_name + "'");
  }
  const auto target_col = static_cast<std::size_t>(target_it - header.begin());
  std::vector<std::string> names;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c != target_col) names.push_back(header[c]);
  }
  const auto n = static_cast<Eigen::Index>(records.size() - 1);
  const auto d = static_cast<Eigen::Index>(names.size());
  if (n < 2) throw Error(Errc::EmptyData, "need at least 2 data rows, got " + std::to_string(n));
  Matrix rows(n, d);
  LabelVector labels(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& rec = records[static_cast<std::size_t>(i) + 1];
    const std::size_t line = static_cast<std::size_t>(i) + 2;
    if (rec.size() != header.size()) {
      throw Error(Errc::ParseError, "line " + std::to_string(line) + ": expected " +
                                        std::to_string(header.size()) + " fields, got " +
                                        std::to_string(rec.size()));
    }
    Eigen::Index j = 0;
    for (std::size_t c = 0; c < rec.size(); ++c) {
      if (c == target_col) {
        labels(i) = parse_label(rec[c], line);
        continue;
      }
      const auto cell = trim(rec[c]);
      if (cell.empty()) {
        rows(i, j) = std::numeric_limits<double>::quiet_NaN();
      } else if (auto v = parse_real(cell)) {
        rows(i, j) = *v;
      } else {
        throw Error(Errc::ParseError, "line " + std::to_string(line) + ", column '" +
                                          header[c] + "': '" + cell + "'");
      }
      ++j;
    }
  }
  return Dataset(std::move(names), target_name, std::move(rows), std::move(labels),
                 path.string());
}

Dataset parse_snapshot(std::string_view text, std::optional<std::string> source) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto pos = text.find('\n', start);
    if (pos == std::string_view::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  if (lines.empty() || lines.front().empty()) throw Error(Errc::ParseError, "empty snapshot");
  auto header = split_line(lines.front(), '\t');
  if (header.size() < 2) throw Error(Errc::ParseError, "snapshot header needs >= 2 columns");
  std::string target = header.back();
  header.pop_back();
  const auto n = static_cast<Eigen::Index>(lines.size() - 1);
  const auto d = static_cast<Eigen::Index>(header.size());
  if (n < 2) throw Error(Errc::EmptyData, "snapshot has fewer than 2 rows");
  Matrix rows(n, d);
  LabelVector labels(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto line = static_cast<std::size_t>(i) + 2;
    const auto cells = split_line(lines[static_cast<std::size_t>(i) + 1], '\t');
    if (static_cast<Eigen::Index>(cells.size()) != d + 1) {
      throw Error(Errc::ParseError, "snapshot line " + std::to_string(line) + ": wrong field count");
    }
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto& cell = cells[static_cast<std::size_t>(j)];
      if (cell.empty()) {
        rows(i, j) = std::numeric_limits<double>::quiet_NaN();
      } else if (auto v = parse_real(cell)) {
        rows(i, j) = *v;
      } else {
        throw Error(Errc::ParseError, "snapshot line " + std::to_string(line) + ", column '" +
                                          header[static_cast<std::size_t>(j)] + "'");
      }
    }
    labels(i) = parse_label(cells.back(), line);
  }
  return Dataset(std::move(header), std::move(target), std::move(rows), std::move(labels),
                 std::move(source));
}

Dataset load_snapshot(const std::filesystem::path& path) {
  return parse_snapshot(read_file(path), path.string());
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& dataset, double test_fraction,
                                          std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error(Errc::InvalidArgument, "test_fraction must lie in (0, 1)");
  }
  std::vector<Eigen::Index> by_class[2];
  for (Eigen::Index i = 0; i < dataset.n(); ++i) by_class[dataset.labels()(i)].push_back(i);
  for (const auto& members : by_class) {
    if (members.size() < 2) {
      throw Error(Errc::DegenerateSplit, "each class needs >= 2 samples for a holdout split");
    }
  }
  const auto n = static_cast<double>(dataset.n());
  const auto total_test = static_cast<long>(std::llround(test_fraction * n));

  // Largest-remainder apportionment of the test size over the two classes,
  // then clamped so every class keeps a member on both sides.
  long take[2];
  double remainder[2];
  long assigned = 0;
  for (int c = 0; c < 2; ++c) {
    const double exact = static_cast<double>(total_test) * static_cast<double>(by_class[c].size()) / n;
    take[c] = static_cast<long>(std::floor(exact));
    remainder[c] = exact - static_cast<double>(take[c]);
    assigned += take[c];
  }
  for (long extra = total_test - assigned; extra > 0; --extra) {
    const int c = remainder[1] > remainder[0] ? 1 : 0;
    ++take[c];
    remainder[c] = -1.0;
  }
  for (int c = 0; c < 2; ++c) {
    take[c] = std::clamp<long>(take[c], 1, static_cast<long>(by_class[c].size()) - 1);
  }

  Rng rng(seed);
  std::vector<Eigen::Index> train_idx;
  std::vector<Eigen::Index> test_idx;
  for (int c = 0; c < 2; ++c) {
    auto members = by_class[c];
    rng.shuffle(std::span<Eigen::Index>(members));
    test_idx.insert(test_idx.end(), members.begin(), members.begin() + take[c]);
    train_idx.insert(train_idx.end(), members.begin() + take[c], members.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {dataset.subset(train_idx), dataset.subset(test_idx)};
}

FoldAssignment stratified_kfold(const LabelVector& labels, int k, std::uint64_t seed) {
  if (k < 2) throw Error(Errc::InvalidArgument, "k must be >= 2");
  std::vector<Eigen::Index> by_class[2];
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    const int y = labels(i);
    if (y != 0 && y != 1) throw Error(Errc::NonBinaryTarget, "label at " + std::to_string(i));
    by_class[y].push_back(i);
  }
  for (int c = 0; c < 2; ++c) {
    if (static_cast<int>(by_class[c].size()) < k) {
      throw Error(Errc::TooFewPerClass, "class " + std::to_string(c) + " has " +
                                            std::to_string(by_class[c].size()) +
                                            " samples, fewer than k=" + std::to_string(k));
    }
  }
  FoldAssignment folds;
  folds.k = k;
  folds.seed = seed;
  folds.fold_of.assign(static_cast<std::size_t>(labels.size()), -1);
  Rng rng(seed);
  // The dealing position carries over between classes so fold sizes stay
  // balanced overall as well as per class.
  std::size_t position = 0;
  for (auto& members : by_class) {
    rng.shuffle(std::span<Eigen::Index>(members));
    for (auto idx : members) {
      folds.fold_of[static_cast<std::size_t>(idx)] = static_cast<int>(position % static_cast<std::size_t>(k));
      ++position;
    }
  }
  return folds;
}

Dataset make_synthetic(Eigen::Index n, Eigen::Index d, std::uint64_t seed, double noise_std) {
  if (d < 3) throw Error(Errc::InvalidArgument, "synthetic generator needs d >= 3");
  Rng rng(seed);
  Matrix rows(n, d);
  LabelVector labels(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) rows(i, j) = rng.normal();
    const double noise = noise_std * rng.normal();
    labels(i) = rows(i, 0) + rows(i, 1) + rows(i, 2) + noise > 0.0 ? 1 : 0;
  }
  std::vector<std::string> names;
  for (Eigen::Index j = 0; j < d; ++j) names.push_back("x" + std::to_string(j + 1));
  return Dataset(std::move(names), "y", std::move(rows), std::move(labels));
}

std::string to_csv(const Dataset& dataset) {
  std::string out;
  for (const auto& name : dataset.feature_names()) out += name + ",";
  out += dataset.target_name() + "\n";
  for (Eigen::Index i = 0; i < dataset.n(); ++i) {
    for (Eigen::Index j = 0; j < dataset.d(); ++j) {
      const double v = dataset.rows()(i, j);
      if (!std::isnan(v)) out += format_real(v);
      out += ',';
    }
    out += dataset.labels()(i) == 1 ? "1\n" : "0\n";
  }
  return out;
}

}  // namespace xmlwf
