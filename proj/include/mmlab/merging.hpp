#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "mmlab/models.hpp"
#include "mmlab/synthdata.hpp"

namespace mmlab {

/// Fine-tuned encoders keyed by task id. Iteration order (ascending id) is
/// the summation order of every merge.
using TaskParamSet = std::map<int, ModelParams>;

enum class MergeMethod { WeightAveraging, TaskArithmetic, Ties };

std::string_view to_string(MergeMethod m);
MergeMethod parse_merge_method(std::string_view name);

struct MergeSpec {
  MergeMethod method = MergeMethod::WeightAveraging;
  double lambda = 1.0;
  double keep_fraction = 0.2;
  /// Out-of-range λ only warns (to stderr) instead of throwing.
  bool lambda_warn_only = false;

  void validate() const;
};

/// Θ_m = (1/T) Σ Θ_t.
ModelParams weight_average(const TaskParamSet& models);

/// Θ_m = Θ_b + λ Σ (Θ_t − Θ_b).
ModelParams task_arithmetic(const ModelParams& theta_b, const TaskParamSet& models, double lambda,
                            bool warn_only = false);

/// Keeps the ⌈keep·n⌉ largest-magnitude entries of the flattened vector;
/// equal magnitudes keep the lower flat index first.
TaskVector ties_trim(const TaskVector& delta, double keep_fraction);

/// Trim, elect a sign per coordinate from the summed trimmed deltas
/// (zero sum elects +), average the agreeing non-zero entries, then add
/// λ times the result to Θ_b.
ModelParams ties_merge(const ModelParams& theta_b, const TaskParamSet& models, double lambda, double keep_fraction,
                       bool warn_only = false);

/// Dispatches on spec.method (theta_b is ignored by weight averaging).
ModelParams merge(const ModelParams& theta_b, const TaskParamSet& models, const MergeSpec& spec);

struct LambdaSelection {
  double best = 0.0;
  std::vector<std::pair<double, double>> scores;  // (λ, mean validation accuracy)
};

/// Grid search maximizing mean current-protocol accuracy on the validation
/// splits; ties resolve to the smaller λ.
LambdaSelection select_lambda(const ModelParams& theta_b, const TaskParamSet& models,
                              const std::map<int, ClassifierHead>& heads, std::span<const TaskDataset> val_sets,
                              MergeSpec spec, std::span<const double> grid);

std::vector<double> default_lambda_grid();

}  // namespace mmlab
