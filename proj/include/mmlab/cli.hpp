#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmlab/experiment.hpp"

namespace mmlab {

/// Entry point of the `mmlab` tool. Returns the process exit code
/// (0 ok, 1 config, 2 data/artifact, 3 numeric) and reports errors on stderr.
int run_cli(const std::vector<std::string>& args);

/// Datasets under `dir` written as task_<id>.csv (+ task_<id>.splits.csv), by ascending id.
std::vector<TaskDataset> load_task_dir(const std::filesystem::path& dir);
void save_task_dir(std::span<const TaskDataset> tasks, const std::filesystem::path& dir, const std::string& digest);

struct MergeRequest {
  std::optional<std::filesystem::path> base;
  std::vector<std::filesystem::path> inputs;
  MergeSpec spec;
  std::filesystem::path output;
  std::string digest;
};

/// Merges the encoder part of each input checkpoint, writes the merged
/// checkpoint and `<output>.manifest.json`; returns the merged parameters.
ModelParams cmd_merge(const MergeRequest& req);

struct EvalRequest {
  std::filesystem::path model;
  std::vector<std::filesystem::path> finetuned;
  std::vector<int> tasks;  // one per finetuned checkpoint; empty reads the sidecar metadata
  std::filesystem::path data_dir;
  Protocol protocol = Protocol::Current;
  std::optional<std::size_t> k;
  ProtocolSettings settings;
  std::uint64_t seed = 0;
  std::string model_label = "merged";
  std::string method_label = "-";
  std::optional<std::filesystem::path> report;
};

/// Evaluates one protocol on every requested task; appends to the report if set.
std::vector<ReportRow> cmd_eval(const EvalRequest& req);

/// Embeddings of one split as `task,split,label,e0..`.
void cmd_dump_embeddings(const std::filesystem::path& model, const std::filesystem::path& dataset, int task_id,
                         Split split, const std::filesystem::path& output);

}  // namespace mmlab
