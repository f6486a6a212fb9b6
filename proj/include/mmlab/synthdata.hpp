#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmlab/numkit.hpp"

namespace mmlab {

enum class Split : std::uint8_t { Train, Val, Test };

std::string_view to_string(Split s);
Split parse_split(std::string_view name);

struct LabeledBatch {
  Matrix x;
  std::vector<int> y;

  [[nodiscard]] std::size_t size() const { return y.size(); }
};

struct TaskDataset {
  int task_id = 0;
  int num_classes = 0;
  Matrix features;
  std::vector<int> labels;
  std::vector<Split> splits;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t size() const { return labels.size(); }
  [[nodiscard]] std::size_t input_dim() const { return static_cast<std::size_t>(features.cols()); }
  [[nodiscard]] std::vector<std::size_t> indices(Split s) const;
  /// Indices in `s` grouped by class.
  [[nodiscard]] std::vector<std::vector<std::size_t>> class_indices(Split s) const;
  [[nodiscard]] LabeledBatch subset(std::span<const std::size_t> idx) const;
  [[nodiscard]] LabeledBatch split(Split s) const { return subset(indices(s)); }

  /// Checks label range, split coverage and the minimum per-class count.
  void validate(std::size_t min_per_class_split = 2) const;
};

struct TaskSpec {
  int task_id = 0;
  int num_classes = 4;
  std::size_t samples_per_class = 300;
  std::size_t input_dim = 16;
  double spread = 2.0;
};

/// Gaussian blobs with means uniform in [-4, 4]^dim and a stratified
/// 70/10/20 train/val/test split.
TaskDataset gen_task(const TaskSpec& spec, std::uint64_t seed);

/// Per-class split sizes for `n` samples of one class (train, val, test).
struct SplitCounts {
  std::size_t train, val, test;
};
SplitCounts stratified_counts(std::size_t n);

/// k raw samples per class; `indices[c]` records where they came from.
struct FewShotAnchors {
  std::size_t k = 0;
  std::vector<Matrix> samples;
  std::vector<std::vector<std::size_t>> indices;

  [[nodiscard]] std::size_t num_classes() const { return samples.size(); }
  /// All anchor indices, class-major.
  [[nodiscard]] std::vector<std::size_t> flat_indices() const;
};

FewShotAnchors sample_few_shot(const TaskDataset& ds, std::size_t k, Split split, std::uint64_t seed);

/// ceil(fraction · |split|) indices drawn uniformly without replacement, sorted.
std::vector<std::size_t> sample_fraction(const TaskDataset& ds, double fraction, Split split,
                                         std::uint64_t seed);

// CSV: `label,f0,f1,...`; split file: `index,split`.
void write_dataset_csv(const TaskDataset& ds, const std::filesystem::path& path, const std::string& digest = {});
void write_splits_csv(const TaskDataset& ds, const std::filesystem::path& path, const std::string& digest = {});
/// Without a split file a stratified split is drawn with `split_seed`.
TaskDataset read_dataset_csv(const std::filesystem::path& path, int task_id,
                             const std::optional<std::filesystem::path>& splits_path = std::nullopt,
                             std::uint64_t split_seed = 0);

/// Shortest round-trip decimal form.
std::string format_double(double v);
double parse_double(std::string_view s);

}  // namespace mmlab
