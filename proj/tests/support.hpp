#pragma once

// Shared fixtures and independent oracles for the unit and acceptance tests.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "xmlwf/dataset.hpp"
#include "xmlwf/error.hpp"
#include "xmlwf/explain.hpp"
#include "xmlwf/types.hpp"
#include "xmlwf/util.hpp"

namespace xmlwf::testing {

namespace fs = std::filesystem;

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("xmlwf-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  write_file_atomic(path, text);
}

/// Returns the Errc raised by `fn`, or nullopt when it does not throw.
template <typename Fn>
std::optional<Errc> error_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

inline Dataset make_dataset(const Matrix& x, const std::vector<int>& y,
                            std::vector<std::string> names = {}) {
  if (names.empty()) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) names.push_back("f" + std::to_string(j));
  }
  LabelVector labels(static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) labels(static_cast<Eigen::Index>(i)) = y[i];
  return Dataset(std::move(names), "y", x, labels);
}

/// x = [-2, -1, 1, 2], y = [0, 0, 1, 1].
inline Dataset separable_toy() {
  Matrix x(4, 1);
  x << -2, -1, 1, 2;
  return make_dataset(x, {0, 0, 1, 1}, {"x"});
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& gen,
                            double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(gen);
  }
  return m;
}

/// Shapley values as the average marginal contribution over all d!
/// orderings, with v(S) evaluated one background row at a time.
inline Attribution permutation_shapley(const ScoreFunction& f, const Vector& x, const Matrix& bg) {
  const auto d = x.size();
  auto value = [&](const std::vector<bool>& in) {
    double total = 0.0;
    for (Eigen::Index b = 0; b < bg.rows(); ++b) {
      Matrix row(1, d);
      for (Eigen::Index j = 0; j < d; ++j) row(0, j) = in[static_cast<std::size_t>(j)] ? x(j) : bg(b, j);
      total += f(row)(0);
    }
    return total / static_cast<double>(bg.rows());
  };
  std::vector<int> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  Vector phi = Vector::Zero(d);
  long count = 0;
  do {
    std::vector<bool> in(static_cast<std::size_t>(d), false);
    double prev = value(in);
    for (int j : order) {
      in[static_cast<std::size_t>(j)] = true;
      const double cur = value(in);
      phi(j) += cur - prev;
      prev = cur;
    }
    ++count;
  } while (std::next_permutation(order.begin(), order.end()));
  return {phi / static_cast<double>(count), value(std::vector<bool>(static_cast<std::size_t>(d), false))};
}

/// Collect, take |.|, sort, index the middle.
inline double naive_median_abs(std::vector<double> column) {
  for (auto& v : column) v = std::fabs(v);
  std::sort(column.begin(), column.end());
  const auto n = column.size();
  return n % 2 ? column[n / 2] : (column[n / 2 - 1] + column[n / 2]) / 2.0;
}

/// Random smooth nonlinear score function of d inputs.
inline ScoreFunction random_model(Eigen::Index d, std::mt19937_64& gen) {
  std::normal_distribution<double> normal;
  Vector w(d), u(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    w(j) = normal(gen);
    u(j) = normal(gen);
  }
  const double c = normal(gen);
  return [w, u, c](const Matrix& rows) {
    Vector out(rows.rows());
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
      const double a = rows.row(i).dot(w);
      const double b = rows.row(i).dot(u);
      out(i) = 1.0 / (1.0 + std::exp(-(a + c * a * b))) + 0.1 * std::sin(b);
    }
    return out;
  };
}

}  // namespace xmlwf::testing
