#pragma once

// Config-driven pipeline: generate -> pretrain -> fine-tune -> merge ->
// evaluate -> report. Every random stream derives from the per-run root seed
// through named children ("data:<id>", "pretrain", "task:<id>", "mtl",
// "align:<task>:<protocol>"), so partial reruns reproduce the same values.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmlab/merging.hpp"
#include "mmlab/protocols.hpp"
#include "mmlab/report.hpp"
#include "mmlab/synthdata.hpp"
#include "mmlab/training.hpp"

namespace mmlab {

struct MergeEntry {
  MergeSpec spec;
  bool auto_lambda = false;
};

enum class BaseMode { Pretrained, Random };

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<TaskSpec> tasks;
  Architecture arch;
  bool head_bias = true;
  BaseMode base = BaseMode::Pretrained;
  TrainConfig pretrain;
  TrainConfig finetune;
  TrainConfig mtl;
  std::vector<MergeEntry> merges;
  std::vector<double> lambda_grid = default_lambda_grid();
  std::vector<Protocol> protocols = all_protocols();
  ProtocolSettings settings;
  std::vector<std::size_t> k_sweep;
  bool include_finetuned = true;
  bool include_mtl = true;
  bool include_base = true;
  std::size_t threads = 1;

  /// Canonical JSON (defaults filled in, threads omitted).
  [[nodiscard]] nlohmann::ordered_json to_json() const;
  /// Content hash of to_json().
  [[nodiscard]] std::string digest() const;
};

/// The bundled default suite: three tasks with 3/4/5 classes.
ExperimentConfig default_experiment_config();

/// Throws ConfigError naming the offending field, e.g. "protocols[2]".
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Trained artifacts for one root seed.
struct SeedArtifacts {
  std::uint64_t seed = 0;
  std::vector<TaskDataset> datasets;
  ModelParams base;
  double pretext_accuracy = 0.0;
  std::vector<TaskModel> finetuned;
  std::vector<TrainLog> finetune_logs;
  std::optional<MtlModel> mtl;
  std::vector<std::pair<MergeEntry, ModelParams>> merged;
};

SeedArtifacts train_seed(const ExperimentConfig& cfg, std::uint64_t seed);

struct AlignmentDiagnostic {
  std::uint64_t seed = 0;
  std::string model, method, protocol, k_or_fraction;
  int task = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double final_kl = 0.0;
  /// orth_penalty(M)/d², mapping variants only.
  std::optional<double> orth_penalty_per_entry;
};

struct SeedSummary {
  std::uint64_t seed = 0;
  double pretext_accuracy = 0.0;
  std::map<std::string, double> lambdas;
};

struct ExperimentResult {
  EvalReport report;
  std::vector<AlignmentDiagnostic> alignments;
  std::vector<SeedSummary> seeds;

  [[nodiscard]] nlohmann::ordered_json diagnostics_json() const;
};

/// Child-seed name of one protocol evaluation: "align:<task>:<protocol>",
/// suffixed ":k<k>" for k-sweep runs that differ from the configured k.
std::string protocol_seed_name(int task, Protocol protocol, std::optional<std::size_t> sweep_k = std::nullopt);

/// Evaluates every configured (model, protocol, task) for one seed.
void evaluate_seed(const ExperimentConfig& cfg, const SeedArtifacts& art, EvalReport& report,
                   std::vector<AlignmentDiagnostic>& diagnostics);

using ProgressFn = std::function<void(const std::string&)>;

/// Runs all seeds. With an output directory, writes checkpoints, datasets,
/// training logs, report.csv, report.json and summary.csv.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out_dir,
                                const ProgressFn& progress = {});

/// Writes a checkpoint plus `<path>.meta.json` carrying the config digest.
void save_artifact(const ModelParams& params, const std::filesystem::path& path, const std::string& digest,
                   const nlohmann::ordered_json& meta = {});
/// Digest recorded next to a checkpoint, or "" without a sidecar.
std::string artifact_digest(const std::filesystem::path& path);

/// Runs fn(0..n-1) on up to `threads` workers; results must be written by index.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Writes `task,split,label,e0..e{d-1}` for one split.
void write_embeddings_csv(const MlpEncoder& encoder, const TaskDataset& ds, Split split,
                          const std::filesystem::path& path, const std::string& digest = {});

}  // namespace mmlab
