#include "xmlwf/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xmlwf/error.hpp"
#include "xmlwf/rng.hpp"
#include "xmlwf/util.hpp"

namespace xmlwf {

namespace {

double roc_auc(const LabelVector& y, const Vector& scores) {
  const auto n = y.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index a, Eigen::Index b) { return scores(a) < scores(b); });
  // Mann-Whitney U with midranks for tied scores.
  double rank_sum_pos = 0.0;
  double n_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores(order[j + 1]) == scores(order[i])) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) {
      if (y(order[t]) == 1) {
        rank_sum_pos += midrank;
        n_pos += 1.0;
      }
    }
    i = j + 1;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  return (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

}  // namespace

std::string_view to_string(Metric metric) {
  switch (metric) {
    case Metric::accuracy: return "accuracy";
    case Metric::balanced_accuracy: return "balanced_accuracy";
    case Metric::f1: return "f1";
    case Metric::roc_auc: return "roc_auc";
  }
  return "?";
}

Metric parse_metric(std::string_view name) {
  for (auto m : {Metric::accuracy, Metric::balanced_accuracy, Metric::f1, Metric::roc_auc}) {
    if (to_string(m) == name) return m;
  }
  throw Error(Errc::InvalidArgument, "unknown metric '" + std::string(name) + "'");
}

double compute_metric(Metric metric, const LabelVector& y_true, const Vector& values) {
  if (y_true.size() != values.size()) {
    throw Error(Errc::LengthMismatch, std::to_string(y_true.size()) + " labels vs " +
                                          std::to_string(values.size()) + " predictions");
  }
  if (y_true.size() == 0) throw Error(Errc::InvalidArgument, "metric needs n >= 1");
  if (!values.allFinite()) throw Error(Errc::InvalidArgument, "non-finite prediction");
  if (metric == Metric::roc_auc) {
    const int ones = y_true.sum();
    if (ones == 0 || ones == y_true.size()) {
      throw Error(Errc::OneClassAUC, "roc_auc needs both classes in y_true");
    }
    return roc_auc(y_true, values);
  }
  double tp = 0, tn = 0, fp = 0, fn = 0;
  for (Eigen::Index i = 0; i < y_true.size(); ++i) {
    const bool pred = values(i) != 0.0;
    const bool truth = y_true(i) == 1;
    if (pred && truth) tp += 1;
    else if (pred) fp += 1;
    else if (truth) fn += 1;
    else tn += 1;
  }
  switch (metric) {
    case Metric::accuracy: return (tp + tn) / static_cast<double>(y_true.size());
    case Metric::balanced_accuracy: {
      // Averages the recall of the classes actually present.
      double sum = 0.0;
      int present = 0;
      if (tp + fn > 0) {
        sum += tp / (tp + fn);
        ++present;
      }
      if (tn + fp > 0) {
        sum += tn / (tn + fp);
        ++present;
      }
      return sum / present;
    }
    case Metric::f1: {
      const double denom = 2 * tp + fp + fn;
      return denom == 0.0 ? 0.0 : 2 * tp / denom;
    }
    case Metric::roc_auc: break;
  }
  return 0.0;
}

double evaluate_metric(Metric metric, const FittedPipeline& model, const Dataset& data) {
  if (consumes_scores(metric)) {
    return compute_metric(metric, data.labels(), predict_scores(model, data.rows()));
  }
  return compute_metric(metric, data.labels(), predict_labels(model, data.rows()).cast<double>());
}

std::vector<Candidate> expand_grid(const ParamGrid& grid) {
  if (grid.entries.empty()) throw Error(Errc::EmptyGrid, "grid has no entries");
  std::size_t total = 1;
  for (const auto& [name, values] : grid.entries) {
    if (values.empty()) throw Error(Errc::EmptyGrid, "grid entry '" + name + "' has no values");
    total *= values.size();
  }
  std::vector<Candidate> out;
  out.reserve(total);
  std::vector<std::size_t> digits(grid.entries.size(), 0);
  for (std::size_t c = 0; c < total; ++c) {
    Candidate candidate;
    for (std::size_t e = 0; e < grid.entries.size(); ++e) {
      candidate[grid.entries[e].first] = grid.entries[e].second[digits[e]];
    }
    out.push_back(std::move(candidate));
    for (std::size_t e = grid.entries.size(); e-- > 0;) {
      if (++digits[e] < grid.entries[e].second.size()) break;
      digits[e] = 0;
    }
  }
  return out;
}

std::vector<Candidate> sample_params(const ParamDistribution& dist, std::uint64_t seed) {
  if (dist.n_samples < 1) throw Error(Errc::InvalidArgument, "n_samples must be >= 1");
  for (const auto& [name, sampler] : dist.entries) {
    switch (sampler.kind) {
      case Sampler::Kind::choice:
        if (sampler.choices.empty()) {
          throw Error(Errc::InvalidArgument, "choice sampler '" + name + "' is empty");
        }
        break;
      case Sampler::Kind::log_uniform:
        if (!(sampler.lo > 0.0)) {
          throw Error(Errc::InvalidArgument, "log_uniform '" + name + "' needs lo > 0");
        }
        [[fallthrough]];
      case Sampler::Kind::uniform:
        if (!(sampler.lo < sampler.hi)) {
          throw Error(Errc::InvalidArgument, "sampler '" + name + "' needs lo < hi");
        }
        break;
    }
  }
  Rng rng(seed);
  std::vector<Candidate> out;
  out.reserve(static_cast<std::size_t>(dist.n_samples));
  for (int s = 0; s < dist.n_samples; ++s) {
    Candidate candidate;
    for (const auto& [name, sampler] : dist.entries) {
      double value = 0.0;
      switch (sampler.kind) {
        case Sampler::Kind::choice:
          value = sampler.choices[static_cast<std::size_t>(rng.below(sampler.choices.size()))];
          break;
        case Sampler::Kind::uniform: value = rng.uniform(sampler.lo, sampler.hi); break;
        case Sampler::Kind::log_uniform:
          value = std::exp(rng.uniform(std::log(sampler.lo), std::log(sampler.hi)));
          break;
      }
      candidate[name] = value;
    }
    out.push_back(std::move(candidate));
  }
  return out;
}

PipelineSpec apply_candidate(const PipelineSpec& spec_template, const Candidate& candidate) {
  PipelineSpec spec = spec_template;
  for (const auto& [name, value] : candidate) spec.estimator.hyperparams[name] = value;
  return spec;
}

namespace {

std::map<Metric, double> evaluate_fold(const PipelineSpec& spec, const Dataset& train,
                                       const FoldAssignment& folds, int fold,
                                       std::span<const Metric> metrics) {
  std::vector<Eigen::Index> fit_idx;
  std::vector<Eigen::Index> eval_idx;
  for (std::size_t i = 0; i < folds.fold_of.size(); ++i) {
    (folds.fold_of[i] == fold ? eval_idx : fit_idx).push_back(static_cast<Eigen::Index>(i));
  }
  PipelineSpec fold_spec = spec;
  fold_spec.estimator.seed = derive_seed(spec.estimator.seed, static_cast<std::uint64_t>(fold));
  std::map<Metric, double> scores;
  try {
    const Dataset fit_part = train.subset(fit_idx);
    const Dataset eval_part = train.subset(eval_idx);
    const FittedPipeline model = fit_pipeline(fold_spec, fit_part);
    const Vector s = predict_scores(model, eval_part.rows());
    const Vector labels = (s.array() >= model.decision_threshold()).cast<double>();
    for (auto metric : metrics) {
      scores[metric] = compute_metric(metric, eval_part.labels(), consumes_scores(metric) ? s : labels);
    }
  } catch (const Error& e) {
    throw Error(e.code(), "fold " + std::to_string(fold) + ": " + e.what());
  }
  return scores;
}

}  // namespace

FoldScores cross_validate(const PipelineSpec& spec_template, const Candidate& candidate,
                          const Dataset& train, const FoldAssignment& folds,
                          std::span<const Metric> metrics, unsigned workers) {
  if (folds.fold_of.size() != static_cast<std::size_t>(train.n())) {
    throw Error(Errc::LengthMismatch, "fold assignment does not match the training set");
  }
  const PipelineSpec spec = apply_candidate(spec_template, candidate);
  validate(spec);
  std::vector<std::map<Metric, double>> per_fold(static_cast<std::size_t>(folds.k));
  parallel_for(per_fold.size(), workers, [&](std::size_t f) {
    per_fold[f] = evaluate_fold(spec, train, folds, static_cast<int>(f), metrics);
  });
  FoldScores out;
  for (auto metric : metrics) {
    auto& row = out[metric];
    for (const auto& fold : per_fold) row.push_back(fold.at(metric));
  }
  return out;
}

Eigen::Index argmax_first(const Vector& values) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < values.size(); ++i) {
    if (values(i) > values(best)) best = i;
  }
  return best;
}

SearchResult run_search(const SearchSpace& space, const PipelineSpec& spec_template,
                        const Dataset& train, const SearchOptions& options) {
  std::vector<Candidate> candidates;
  if (const auto* grid = std::get_if<ParamGrid>(&space)) {
    if (grid->entries.empty()) throw Error(Errc::EmptySpace, "grid search space is empty");
    candidates = expand_grid(*grid);
  } else {
    const auto& dist = std::get<ParamDistribution>(space);
    if (dist.entries.empty()) throw Error(Errc::EmptySpace, "random search space is empty");
    candidates = sample_params(dist, options.seed);
    // Continuous draws for integer hyperparameters snap to the nearest integer.
    for (auto& candidate : candidates) {
      for (const auto& info : hyperparam_schema(spec_template.estimator.kind)) {
        auto it = candidate.find(std::string(info.name));
        if (it != candidate.end() && info.integer) it->second = std::round(it->second);
      }
    }
  }
  for (const auto& candidate : candidates) validate(apply_candidate(spec_template, candidate));

  SearchResult result;
  result.candidates = candidates;
  result.selection_metric = options.selection_metric;
  result.metrics = options.metrics;
  if (std::find(result.metrics.begin(), result.metrics.end(), options.selection_metric) ==
      result.metrics.end()) {
    result.metrics.push_back(options.selection_metric);
  }
  result.k = options.k;

  const FoldAssignment folds = stratified_kfold(train.labels(), options.k, options.seed);
  const std::size_t n_candidates = candidates.size();
  const std::size_t k = static_cast<std::size_t>(options.k);
  std::vector<std::map<Metric, double>> cells(n_candidates * k);
  parallel_for(cells.size(), options.workers, [&](std::size_t task) {
    const auto c = task / k;
    const auto f = static_cast<int>(task % k);
    const PipelineSpec spec = apply_candidate(spec_template, candidates[c]);
    try {
      cells[task] = evaluate_fold(spec, train, folds, f, result.metrics);
    } catch (const Error& e) {
      throw Error(e.code(), "candidate " + std::to_string(c) + ", " + e.what());
    }
  });

  const auto rows = static_cast<Eigen::Index>(n_candidates);
  const auto cols = static_cast<Eigen::Index>(k);
  for (auto metric : result.metrics) {
    Matrix table(rows, cols);
    for (Eigen::Index c = 0; c < rows; ++c) {
      for (Eigen::Index f = 0; f < cols; ++f) {
        table(c, f) = cells[static_cast<std::size_t>(c) * k + static_cast<std::size_t>(f)].at(metric);
      }
    }
    Vector mean = table.rowwise().mean();
    Vector sd(rows);
    for (Eigen::Index c = 0; c < rows; ++c) {
      sd(c) = std::sqrt((table.row(c).array() - mean(c)).square().mean());
    }
    result.fold_scores[metric] = std::move(table);
    result.mean_scores[metric] = std::move(mean);
    result.std_scores[metric] = std::move(sd);
  }
  result.best_index = argmax_first(result.mean_score());
  result.best_model = fit_pipeline(apply_candidate(spec_template, result.best_candidate()), train);
  return result;
}

}  // namespace xmlwf
