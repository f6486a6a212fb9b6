#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mmlab/models.hpp"
#include "mmlab/synthdata.hpp"

namespace mmlab {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  bool head_bias = true;

  void validate(std::size_t train_size) const;
};

/// Gradients, homologous with the parameters they differentiate.
struct GradientBundle {
  ModelParams grads;
};

struct AdamState {
  ModelParams m;
  ModelParams v;
  std::size_t step = 0;

  static AdamState zeros_like(const ModelParams& params);
};

/// One bias-corrected Adam update, in place. Weight decay is decoupled.
void adam_step(ModelParams& params, const GradientBundle& g, AdamState& state, const TrainConfig& cfg);

struct LossAndGrad {
  double loss = 0.0;
  GradientBundle grad;
};

/// Mean softmax cross-entropy and its gradient with respect to to_params(model).
LossAndGrad backprop_ce(const TaskModel& model, const Matrix& x, std::span<const int> labels);

/// Mean cross-entropy of a logits batch; throws DataError on out-of-range labels.
double cross_entropy(const Matrix& logits, std::span<const int> labels);
/// dL/dlogits of the mean cross-entropy: (softmax − onehot) / n.
Matrix cross_entropy_grad(const Matrix& logits, std::span<const int> labels);

/// Backward pass through the encoder given dL/d(embeddings).
ModelParams encoder_backward(const MlpEncoder& encoder, const EncoderCache& cache, const Matrix& d_embeddings);

struct EpochLog {
  std::size_t epoch = 0;
  Split split = Split::Train;
  double loss = 0.0;
  double accuracy = 0.0;
};
using TrainLog = std::vector<EpochLog>;

/// `epoch,split,loss,accuracy` with a leading `# config_digest=` line when a digest is given.
void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path, const std::string& digest = {});

struct BatchMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
};
BatchMetrics evaluate_batch(const TaskModel& model, const LabeledBatch& batch);

struct PretrainResult {
  ModelParams encoder;
  ClassifierHead pretext_head;
  /// Pretext accuracy on the pooled val+test splits.
  double heldout_accuracy = 0.0;
};

/// Pretext label of a sample: parity of its class index.
inline int pretext_label(int label) { return label % 2; }

/// Trains a fresh encoder on the pooled class-parity pretext task.
PretrainResult pretrain(std::span<const TaskDataset> tasks, const Architecture& arch, const TrainConfig& cfg,
                        TrainLog* log = nullptr);
/// Encoder parameters of `pretrain`; the pretext head is discarded.
ModelParams pretrain_base(std::span<const TaskDataset> tasks, const Architecture& arch, const TrainConfig& cfg);

/// Full encoder plus a fresh head trained with cross-entropy from theta_b.
TaskModel finetune(const ModelParams& theta_b, const TaskDataset& ds, const TrainConfig& cfg,
                   TrainLog* log = nullptr);

struct MtlModel {
  MlpEncoder encoder;
  std::vector<ClassifierHead> heads;
  std::vector<int> task_ids;

  [[nodiscard]] TaskModel task_model(std::size_t i) const { return {encoder, heads[i], task_ids[i]}; }
};

/// Shared encoder and one head per task; every step sums one batch per task.
MtlModel train_mtl(const ModelParams& theta_b, std::span<const TaskDataset> tasks, const TrainConfig& cfg,
                   TrainLog* log = nullptr);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_layer;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = true;

  [[nodiscard]] std::string summary() const;
};

inline constexpr double kGradCheckFloor = 1e-6;

/// Central differences against `analytic`. Above `max_coords` parameters a
/// seeded random subsample is checked. Relative error uses
/// max(|analytic|, |numeric|, kGradCheckFloor) as the denominator.
GradCheckReport grad_check(const std::function<double(const ModelParams&)>& loss, const ModelParams& at,
                           const GradientBundle& analytic, double h, double tol, std::uint64_t seed = 0,
                           std::size_t max_coords = 10000);
GradCheckReport grad_check(const TaskModel& model, const LabeledBatch& batch, double h, double tol);

}  // namespace mmlab
