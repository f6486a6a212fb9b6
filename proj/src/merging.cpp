#include "mmlab/merging.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "mmlab/protocols.hpp"

namespace mmlab {

std::string_view to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::WeightAveraging: return "wa";
    case MergeMethod::TaskArithmetic: return "ta";
    case MergeMethod::Ties: return "ties";
  }
  return "?";
}

MergeMethod parse_merge_method(std::string_view name) {
  if (name == "wa") return MergeMethod::WeightAveraging;
  if (name == "ta") return MergeMethod::TaskArithmetic;
  if (name == "ties") return MergeMethod::Ties;
  throw ConfigError("unknown merge method '" + std::string(name) + "' (expected wa, ta or ties)");
}

namespace {

void check_lambda(double lambda, bool warn_only) {
  if (lambda >= 0.0 && lambda <= 1.0) return;
  const std::string msg = "merge: lambda " + format_double(lambda) + " outside [0, 1]";
  if (!warn_only) throw ConfigError(msg);
  std::cerr << "warning: " << msg << '\n';
}

void check_set(const ModelParams* theta_b, const TaskParamSet& models, std::string_view op) {
  if (models.empty()) throw ConfigError(std::string(op) + ": no models to merge");
  const ModelParams& ref = theta_b != nullptr ? *theta_b : models.begin()->second;
  for (const auto& [id, p] : models) require_homologous(ref, p, std::string(op) + " (task " + std::to_string(id) + ")");
}

}  // namespace

void MergeSpec::validate() const {
  if (method != MergeMethod::WeightAveraging) check_lambda(lambda, lambda_warn_only);
  if (method == MergeMethod::Ties && !(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ConfigError("merge: ties keep_fraction must be in (0, 1]");
  }
}

ModelParams weight_average(const TaskParamSet& models) {
  check_set(nullptr, models, "weight_average");
  // Running mean: identical inputs come back bit-exact, which (1/T)·Σ does not guarantee.
  ModelParams mean = models.begin()->second;
  double k = 1.0;
  for (auto it = std::next(models.begin()); it != models.end(); ++it) {
    k += 1.0;
    for (std::size_t l = 0; l < mean.size(); ++l) {
      auto& m = mean[l].values;
      const auto& x = it->second[l].values;
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += (x[i] - m[i]) / k;
    }
  }
  return mean;
}

ModelParams task_arithmetic(const ModelParams& theta_b, const TaskParamSet& models, double lambda, bool warn_only) {
  check_lambda(lambda, warn_only);
  check_set(&theta_b, models, "task_arithmetic");
  // b + (t - b) can differ from t in the last ulp; return t itself.
  if (models.size() == 1 && lambda == 1.0) return models.begin()->second;
  ModelParams sum = theta_b.zeros_like();
  for (const auto& [id, p] : models) sum = sum + task_vector(p, theta_b).delta;
  return theta_b + lambda * sum;
}

TaskVector ties_trim(const TaskVector& delta, double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ConfigError("ties_trim: keep_fraction must be in (0, 1]");
  std::vector<double> flat;
  flat.reserve(delta.delta.numel());
  for (const auto& t : delta.delta) flat.insert(flat.end(), t.values.begin(), t.values.end());
  const std::size_t n = flat.size();
  const auto keep = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n)));
  if (keep >= n) return delta;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(flat[a]) > std::abs(flat[b]); });
  std::vector<bool> kept(n, false);
  for (std::size_t i = 0; i < keep; ++i) kept[order[i]] = true;

  TaskVector out = delta;
  std::size_t k = 0;
  for (auto& t : out.delta)
    for (auto& v : t.values) {
      if (!kept[k]) v = 0.0;
      ++k;
    }
  return out;
}

ModelParams ties_merge(const ModelParams& theta_b, const TaskParamSet& models, double lambda, double keep_fraction,
                       bool warn_only) {
  check_lambda(lambda, warn_only);
  check_set(&theta_b, models, "ties_merge");
  // A lone untrimmed task wins every election; return it as task_arithmetic does.
  if (models.size() == 1 && keep_fraction == 1.0 && lambda == 1.0) return models.begin()->second;
  std::vector<TaskVector> trimmed;
  for (const auto& [id, p] : models) trimmed.push_back(ties_trim(task_vector(p, theta_b), keep_fraction));

  ModelParams merged = theta_b.zeros_like();
  for (std::size_t l = 0; l < merged.size(); ++l) {
    auto& out = merged[l].values;
    for (std::size_t i = 0; i < out.size(); ++i) {
      double total = 0.0;
      for (const auto& tv : trimmed) total += tv.delta[l].values[i];
      const bool positive = total >= 0.0;
      double agree_sum = 0.0;
      std::size_t agree = 0;
      for (const auto& tv : trimmed) {
        const double d = tv.delta[l].values[i];
        if (d != 0.0 && (d > 0.0) == positive) {
          agree_sum += d;
          ++agree;
        }
      }
      out[i] = agree == 0 ? 0.0 : agree_sum / static_cast<double>(agree);
    }
  }
  return theta_b + lambda * merged;
}

ModelParams merge(const ModelParams& theta_b, const TaskParamSet& models, const MergeSpec& spec) {
  spec.validate();
  switch (spec.method) {
    case MergeMethod::WeightAveraging: return weight_average(models);
    case MergeMethod::TaskArithmetic: return task_arithmetic(theta_b, models, spec.lambda, spec.lambda_warn_only);
    case MergeMethod::Ties:
      return ties_merge(theta_b, models, spec.lambda, spec.keep_fraction, spec.lambda_warn_only);
  }
  throw ConfigError("merge: unknown method");
}

std::vector<double> default_lambda_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 10; ++i) grid.push_back(i / 10.0);
  return grid;
}

LambdaSelection select_lambda(const ModelParams& theta_b, const TaskParamSet& models,
                              const std::map<int, ClassifierHead>& heads, std::span<const TaskDataset> val_sets,
                              MergeSpec spec, std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("select_lambda: empty lambda grid");
  if (val_sets.empty()) throw ConfigError("select_lambda: no validation sets");
  LambdaSelection sel;
  double best_score = -1.0;
  for (double lambda : grid) {
    spec.lambda = lambda;
    const MlpEncoder encoder = MlpEncoder::from_params(merge(theta_b, models, spec));
    double total = 0.0;
    for (const auto& ds : val_sets) {
      const auto it = heads.find(ds.task_id);
      if (it == heads.end()) throw ConfigError("select_lambda: no head for task " + std::to_string(ds.task_id));
      total += current_eval(encoder, it->second, ds.split(Split::Val)).value();
    }
    const double score = total / static_cast<double>(val_sets.size());
    sel.scores.emplace_back(lambda, score);
    if (score > best_score || (score == best_score && lambda < sel.best)) {
      best_score = score;
      sel.best = lambda;
    }
  }
  return sel;
}

}  // namespace mmlab
