#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace mmlab {

/// One accuracy measurement: `model,method,protocol,task,k_or_fraction,seed,accuracy`.
struct ReportRow {
  std::string model;     // finetuned | mtl | base | merged
  std::string method;    // ft | mtl | base | wa | ta | ties
  std::string protocol;  // current | knn | ft-classifier | aligned-m | orth-m
  int task = 0;
  std::string k_or_fraction = "-";
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

/// Task-mean accuracy for one (model, method, protocol, k, seed).
struct AverageRow {
  std::string model, method, protocol, k_or_fraction;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  std::size_t tasks = 0;
};

/// Mean and sample standard deviation of AverageRow over seeds.
struct SummaryRow {
  std::string model, method, protocol, k_or_fraction;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t seeds = 0;
};

class EvalReport {
 public:
  EvalReport() = default;
  explicit EvalReport(std::string config_digest) : digest_(std::move(config_digest)) {}

  /// Rejects accuracies outside [0, 1] and inconsistent correct/total counts.
  void add(ReportRow row);

  [[nodiscard]] const std::vector<ReportRow>& rows() const { return rows_; }
  [[nodiscard]] const std::string& config_digest() const { return digest_; }

  /// Freezes the per-seed averages; emission re-derives and compares them.
  void finalize();
  [[nodiscard]] const std::vector<AverageRow>& averages() const { return averages_; }
  [[nodiscard]] std::vector<AverageRow> compute_averages() const;
  [[nodiscard]] std::vector<SummaryRow> summary() const;

  /// Rows matching the filters ("" matches anything).
  [[nodiscard]] std::vector<ReportRow> select(std::string_view model, std::string_view method,
                                              std::string_view protocol, std::string_view k = {}) const;
  /// Task-mean accuracy for one seed.
  [[nodiscard]] double mean_accuracy(std::string_view model, std::string_view method, std::string_view protocol,
                                     std::uint64_t seed, std::string_view k = {}) const;

  void write_csv(const std::filesystem::path& path) const;
  /// Appends rows; an existing file must carry the same digest.
  void append_csv(const std::filesystem::path& path) const;
  void write_summary_csv(const std::filesystem::path& path) const;
  [[nodiscard]] nlohmann::ordered_json to_json() const;
  void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& extra = {}) const;

  static EvalReport read_csv(const std::filesystem::path& path);

 private:
  void check_averages() const;

  std::string digest_;
  std::vector<ReportRow> rows_;
  std::vector<AverageRow> averages_;
};

inline constexpr std::string_view kReportHeader = "model,method,protocol,task,k_or_fraction,seed,accuracy";

/// Reads the `# config_digest=` stamp of a CSV file, or "" if absent.
std::string read_csv_digest(const std::filesystem::path& path);

}  // namespace mmlab
