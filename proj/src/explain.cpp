#include "xmlwf/explain.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "xmlwf/error.hpp"
#include "xmlwf/rng.hpp"
#include "xmlwf/util.hpp"

namespace xmlwf {

namespace {

double binomial(int n, int k) {
  double out = 1.0;
  for (int i = 1; i <= k; ++i) out = out * static_cast<double>(n - k + i) / static_cast<double>(i);
  return std::round(out);
}

// Rows of the background with the masked features overwritten by x.
void fill_composite(Matrix& block, Eigen::Index offset, const Vector& x, const Background& bg,
                    const std::vector<char>& mask) {
  const auto m = bg.m();
  block.middleRows(offset, m) = bg.rows;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    if (mask[static_cast<std::size_t>(j)]) block.block(offset, j, m, 1).setConstant(x(j));
  }
}

double mean_of(const Vector& scores, Eigen::Index offset, Eigen::Index m) {
  // Sequential order: a vectorized sum would depend on the segment's alignment.
  double total = 0.0;
  for (Eigen::Index i = offset; i < offset + m; ++i) total += scores(i);
  return total / static_cast<double>(m);
}

// Values many coalitions with batched model calls.
std::vector<double> coalition_values(const ScoreFunction& f, const Vector& x, const Background& bg,
                                     const std::vector<std::vector<char>>& masks) {
  constexpr std::size_t kBatch = 64;
  const auto m = bg.m();
  std::vector<double> out(masks.size());
  Matrix block;
  for (std::size_t start = 0; start < masks.size(); start += kBatch) {
    const auto count = std::min(kBatch, masks.size() - start);
    block.resize(static_cast<Eigen::Index>(count) * m, x.size());
    for (std::size_t c = 0; c < count; ++c) {
      fill_composite(block, static_cast<Eigen::Index>(c) * m, x, bg, masks[start + c]);
    }
    const Vector scores = f(block);
    for (std::size_t c = 0; c < count; ++c) {
      out[start + c] = mean_of(scores, static_cast<Eigen::Index>(c) * m, m);
    }
  }
  return out;
}

void check_inputs(const Vector& x, const Background& bg) {
  if (bg.m() < 1) throw Error(Errc::InvalidArgument, "background needs at least one row");
  if (bg.rows.cols() != x.size()) {
    throw Error(Errc::DimensionMismatch, "background width " + std::to_string(bg.rows.cols()) +
                                             " != row width " + std::to_string(x.size()));
  }
}

double evaluate_single(const ScoreFunction& f, const Vector& x) {
  Matrix one = x.transpose();
  return f(one)(0);
}

}  // namespace

ScoreFunction score_function(const FittedPipeline& model) {
  return [&model](const Matrix& rows) { return predict_scores(model, rows); };
}

Background sample_background(const Dataset& train, Eigen::Index m, std::uint64_t seed,
                             const FittedPipeline* imputer) {
  if (m < 1) throw Error(Errc::InvalidArgument, "background size must be >= 1");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(train.n()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Rng rng(seed);
  rng.shuffle(std::span<Eigen::Index>(order));
  const auto take = std::min(m, train.n());
  Background bg;
  bg.seed = seed;
  bg.source_hash = train.content_hash();
  bg.rows.resize(take, train.d());
  for (Eigen::Index r = 0; r < take; ++r) bg.rows.row(r) = train.rows().row(order[static_cast<std::size_t>(r)]);
  if (imputer != nullptr) {
    for (const auto& t : imputer->transformers) {
      if (t.kind != TransformerKind::mean_impute) continue;
      for (Eigen::Index j = 0; j < bg.rows.cols(); ++j) {
        for (Eigen::Index r = 0; r < take; ++r) {
          if (std::isnan(bg.rows(r, j))) bg.rows(r, j) = t.center(j);
        }
      }
    }
  }
  return bg;
}

double coalition_value(const ScoreFunction& f, const Vector& x, const Background& bg,
                       const std::vector<char>& mask) {
  check_inputs(x, bg);
  return coalition_values(f, x, bg, {mask}).front();
}

Attribution shapley_exact(const ScoreFunction& f, const Vector& x, const Background& bg,
                          int exact_limit) {
  check_inputs(x, bg);
  const auto d = static_cast<int>(x.size());
  if (d > exact_limit) {
    throw Error(Errc::TooManyFeatures, "exact enumeration limited to d <= " +
                                           std::to_string(exact_limit) + ", got " + std::to_string(d));
  }
  const std::size_t n_subsets = std::size_t{1} << d;
  const std::size_t full = n_subsets - 1;
  std::vector<std::vector<char>> masks;
  masks.reserve(n_subsets);
  for (std::size_t s = 0; s <= full; ++s) {
    std::vector<char> mask(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) mask[static_cast<std::size_t>(j)] = (s >> j) & 1U;
    masks.push_back(std::move(mask));
  }
  // v(F) goes through the same background average as every other coalition
  // so that a feature f ignores yields bitwise-equal marginal pairs.
  const std::vector<double> v = coalition_values(f, x, bg, masks);

  // weight(s) = s! (d - s - 1)! / d! = 1 / (d * C(d - 1, s))
  std::vector<double> weight(static_cast<std::size_t>(d));
  for (int s = 0; s < d; ++s) weight[static_cast<std::size_t>(s)] = 1.0 / (d * binomial(d - 1, s));

  Attribution out;
  out.base = v[0];
  out.phi = Vector::Zero(d);
  for (std::size_t s = 0; s < n_subsets; ++s) {
    const auto size = std::popcount(s);
    for (int j = 0; j < d; ++j) {
      if ((s >> j) & 1U) continue;
      out.phi(j) += weight[static_cast<std::size_t>(size)] * (v[s | (std::size_t{1} << j)] - v[s]);
    }
  }
  return out;
}

double shapley_kernel_weight(int d, int s) {
  return static_cast<double>(d - 1) / (binomial(d, s) * s * (d - s));
}

Attribution kernel_shap(const ScoreFunction& f, const Vector& x, const Background& bg,
                        std::int64_t n_coalitions, std::uint64_t seed) {
  check_inputs(x, bg);
  const auto d = static_cast<int>(x.size());
  if (d < 2) throw Error(Errc::InvalidArgument, "kernel_shap needs d >= 2");
  const double all_coalitions = std::ldexp(1.0, d) - 2.0;
  const auto required = static_cast<std::int64_t>(std::min<double>(d + 2, all_coalitions));
  if (n_coalitions < required) {
    throw Error(Errc::InvalidArgument, "kernel_shap needs n_coalitions >= " + std::to_string(required));
  }
  const auto budget = static_cast<std::int64_t>(std::min<double>(static_cast<double>(n_coalitions), all_coalitions));

  // Coalitions keyed by membership so duplicate draws merge their weight.
  std::map<std::vector<char>, double> weighted;
  auto complement = [](std::vector<char> mask) {
    for (auto& bit : mask) bit = !bit;
    return mask;
  };

  const int n_sizes = (d - 1 + 1) / 2;  // ceil((d - 1) / 2)
  const int n_paired = (d - 1) / 2;
  std::int64_t remaining = budget;
  int next_size = 1;
  for (; next_size <= n_sizes; ++next_size) {
    const double per_side = binomial(d, next_size);
    const double count = next_size <= n_paired ? 2.0 * per_side : per_side;
    if (count > static_cast<double>(remaining)) break;
    // Enumerate every coalition of this size (and its complement).
    std::vector<char> mask(static_cast<std::size_t>(d), 0);
    std::fill(mask.begin(), mask.begin() + next_size, 1);
    std::sort(mask.begin(), mask.end());
    const double w = shapley_kernel_weight(d, next_size);
    do {
      weighted[mask] += w;
      if (next_size <= n_paired) weighted[complement(mask)] += w;
    } while (std::next_permutation(mask.begin(), mask.end()));
    remaining -= static_cast<std::int64_t>(count);
  }

  if (next_size <= n_sizes && remaining > 0) {
    // Kernel mass of the sizes not enumerated, sampled in complementary pairs.
    std::vector<int> sizes;
    std::vector<double> mass;
    double total_mass = 0.0;
    for (int s = next_size; s <= d - next_size; ++s) {
      sizes.push_back(s);
      mass.push_back(static_cast<double>(d - 1) / (s * (d - s)));
      total_mass += mass.back();
    }
    Rng rng(seed);
    std::vector<std::vector<char>> draws;
    while (static_cast<std::int64_t>(draws.size()) < remaining) {
      double u = rng.uniform() * total_mass;
      std::size_t pick = 0;
      while (pick + 1 < mass.size() && u >= mass[pick]) {
        u -= mass[pick];
        ++pick;
      }
      std::vector<int> features(static_cast<std::size_t>(d));
      std::iota(features.begin(), features.end(), 0);
      rng.shuffle(std::span<int>(features));
      std::vector<char> mask(static_cast<std::size_t>(d), 0);
      for (int t = 0; t < sizes[pick]; ++t) mask[static_cast<std::size_t>(features[static_cast<std::size_t>(t)])] = 1;
      draws.push_back(mask);
      if (static_cast<std::int64_t>(draws.size()) < remaining) draws.push_back(complement(mask));
    }
    const double w = total_mass / static_cast<double>(draws.size());
    for (const auto& mask : draws) weighted[mask] += w;
  }

  std::vector<std::vector<char>> masks;
  std::vector<double> weights;
  for (const auto& [mask, w] : weighted) {
    masks.push_back(mask);
    weights.push_back(w);
  }
  const std::vector<double> values = coalition_values(f, x, bg, masks);
  std::vector<char> empty(static_cast<std::size_t>(d), 0);
  const double base = coalition_values(f, x, bg, {empty}).front();
  const double fx = evaluate_single(f, x);
  const double delta = fx - base;

  // Eliminate the last coefficient through sum(phi) = delta and solve the
  // weighted least-squares problem for the rest.
  const auto rows = static_cast<Eigen::Index>(masks.size());
  Matrix a(rows, d - 1);
  Vector y(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& mask = masks[static_cast<std::size_t>(r)];
    const double last = mask.back();
    const double sw = std::sqrt(weights[static_cast<std::size_t>(r)]);
    for (int j = 0; j < d - 1; ++j) a(r, j) = sw * (mask[static_cast<std::size_t>(j)] - last);
    y(r) = sw * (values[static_cast<std::size_t>(r)] - base - last * delta);
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(a);
  if (qr.rank() < d - 1) {
    throw Error(Errc::SingularSystem, "coalition design is rank deficient; raise n_coalitions");
  }
  const Vector head = qr.solve(y);
  Attribution out;
  out.base = base;
  out.phi.resize(d);
  out.phi.head(d - 1) = head;
  out.phi(d - 1) = delta - head.sum();
  return out;
}

std::string_view to_string(ExplainMethod method) {
  return method == ExplainMethod::exact ? "exact" : "kernel";
}

std::string_view to_string(SplitKind split) { return split == SplitKind::train ? "train" : "test"; }

ExplainerChoice select_explainer(const FittedPipeline& model, Eigen::Index d, int exact_limit,
                                 std::int64_t max_coalitions) {
  (void)model;
  if (d <= exact_limit) return {ExplainMethod::exact, 0};
  const double all = std::ldexp(1.0, static_cast<int>(std::min<Eigen::Index>(d, 62))) - 2.0;
  return {ExplainMethod::kernel,
          static_cast<std::int64_t>(std::min<double>(all, static_cast<double>(max_coalitions)))};
}

double local_accuracy_tolerance(ExplainMethod method) {
  return method == ExplainMethod::exact ? 1e-9 : 5e-3;
}

ShapExplanation explain_rows(const FittedPipeline& model, const Matrix& rows,
                             const std::vector<std::string>& feature_names, const Background& bg,
                             SplitKind split, const ExplainOptions& options) {
  const auto d = rows.cols();
  if (d != model.n_features) {
    throw Error(Errc::DimensionMismatch, "model expects " + std::to_string(model.n_features) +
                                             " columns, got " + std::to_string(d));
  }
  const ExplainerChoice choice =
      options.force ? *options.force
                    : select_explainer(model, d, options.exact_limit, options.max_coalitions);
  const ScoreFunction f = score_function(model);

  ShapExplanation out;
  out.feature_names = feature_names;
  out.method = choice.method;
  out.n_coalitions = choice.n_coalitions;
  out.explained_split = split;
  out.background_hash = bg.source_hash;
  out.background_seed = bg.seed;
  out.background_m = bg.m();
  out.base_value = mean_of(f(bg.rows), 0, bg.m());
  out.values = Matrix::Zero(rows.rows(), d);
  out.model_score = rows.rows() > 0 ? f(rows) : Vector(0);

  parallel_for(static_cast<std::size_t>(rows.rows()), options.workers, [&](std::size_t i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Vector x = rows.row(r).transpose();
    const Attribution a =
        choice.method == ExplainMethod::exact
            ? shapley_exact(f, x, bg, std::max<int>(options.exact_limit, static_cast<int>(d)))
            : kernel_shap(f, x, bg, choice.n_coalitions, derive_seed(options.seed, i));
    out.values.row(r) = a.phi.transpose();
  });
  return out;
}

ShapExplanation explain_split(const FittedPipeline& model, const Dataset& data,
                              const Background& bg, SplitKind split, const ExplainOptions& options) {
  auto out = explain_rows(model, data.rows(), data.feature_names(), bg, split, options);
  out.data_hash = data.content_hash();
  return out;
}

std::string explanation_tsv(const ShapExplanation& explanation) {
  std::string out;
  for (const auto& name : explanation.feature_names) out += name + '\t';
  out += "base_value\tmodel_score\n";
  for (Eigen::Index i = 0; i < explanation.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < explanation.values.cols(); ++j) {
      out += format_real(explanation.values(i, j)) + '\t';
    }
    out += format_real(explanation.base_value) + '\t' + format_real(explanation.model_score(i)) + '\n';
  }
  return out;
}

std::string explanation_meta_json(const ShapExplanation& explanation) {
  nlohmann::json meta;
  meta["split"] = to_string(explanation.explained_split);
  meta["method"] = to_string(explanation.method);
  meta["n_coalitions"] = explanation.n_coalitions;
  meta["base_value"] = explanation.base_value;
  meta["n_rows"] = explanation.values.rows();
  meta["data_hash"] = explanation.data_hash;
  meta["background"] = {{"source_hash", explanation.background_hash},
                        {"seed", explanation.background_seed},
                        {"m", explanation.background_m}};
  return meta.dump(2) + "\n";
}

}  // namespace xmlwf
