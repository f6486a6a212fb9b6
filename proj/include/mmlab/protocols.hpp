#pragma once

// Evaluation protocols for a merged encoder, and the alignment trainers that
// repair the mismatch between merged embeddings and a fine-tuned head.
//
// All alignment variants minimise the mean per-sample
//   KL( softmax(teacher logits) ‖ softmax(student logits) )
// where the teacher is the frozen fine-tuned model and the student is the
// merged encoder followed by either emb·M·W + b (only M trainable, M = I at
// start) or emb·W′ + b′ (W′, b′ initialised from the fine-tuned head). The
// orthogonal variant adds α‖MᵀM − I‖₁.

#include <optional>
#include <string>
#include <vector>

#include "mmlab/models.hpp"
#include "mmlab/synthdata.hpp"
#include "mmlab/training.hpp"

namespace mmlab {

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;

  [[nodiscard]] double value() const {
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  }
};

Accuracy score(std::span<const int> predicted, std::span<const int> labels);

/// argmax(f_m(X)·W + b) against the labels.
Accuracy current_eval(const MlpEncoder& encoder, const ClassifierHead& head, const LabeledBatch& test);

/// Nearest mean anchor distance: ŷ = argmin_y (1/k) Σ_i ‖e − a_{y,i}‖₂, lowest class on ties.
std::vector<int> knn_predict(const Matrix& embeddings, std::span<const Matrix> anchor_embeddings);
/// Anchors and test samples are both embedded by `encoder`.
Accuracy knn_eval(const MlpEncoder& encoder, const FewShotAnchors& anchors, const LabeledBatch& test);

enum class AlignVariant { ClassifierW, MappingM, OrthMappingM };

std::string_view to_string(AlignVariant v);

/// Which samples feed alignment training. Labels are never used by the loss.
struct DataSource {
  enum class Kind { FewShot, Fraction, Full };
  Kind kind = Kind::FewShot;
  std::size_t k = 5;
  double fraction = 0.01;
  Split split = Split::Test;

  /// "5" for few-shot, "0.01" for fractions, "full" for a whole split.
  [[nodiscard]] std::string tag() const;
};

struct AlignmentConfig {
  AlignVariant variant = AlignVariant::ClassifierW;
  double alpha = 0.01;
  std::size_t epochs = 200;
  double learning_rate = 1e-2;
  DataSource source;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Indices of the samples `source` selects from `ds`.
std::vector<std::size_t> alignment_indices(const TaskDataset& ds, const DataSource& source, std::uint64_t seed);

/// Full-batch alignment objective over precomputed student embeddings and
/// teacher distributions. Parameters are {"align.m"} for the mapping
/// variants and {"head.weight", "head.bias"?} for the classifier variant.
class AlignmentObjective {
 public:
  AlignmentObjective(Matrix student_embeddings, Matrix teacher_probs, ClassifierHead teacher_head,
                     AlignVariant variant, double alpha);

  [[nodiscard]] ModelParams initial_params() const;
  [[nodiscard]] double loss(const ModelParams& params) const;
  [[nodiscard]] LossAndGrad loss_and_grad(const ModelParams& params) const;
  /// Mean KL alone, without the orthogonality term.
  [[nodiscard]] double kl_loss(const ModelParams& params) const;
  [[nodiscard]] Matrix student_logits(const ModelParams& params) const;

  [[nodiscard]] AlignVariant variant() const { return variant_; }

 private:
  Matrix embeddings_;
  Matrix teacher_probs_;
  ClassifierHead head_;
  AlignVariant variant_;
  double alpha_;
};

struct AlignmentResult {
  AlignVariant variant = AlignVariant::ClassifierW;
  std::optional<Matrix> mapping;         // M (mapping variants)
  std::optional<ClassifierHead> head;    // W′, b′ (classifier variant)
  /// loss_history[e] is the objective after e updates (index 0 = initial).
  std::vector<double> loss_history;
  double final_kl = 0.0;

  /// Head equivalent to the aligned pipeline: W′ for the classifier variant,
  /// otherwise the original head applied after M.
  [[nodiscard]] Matrix apply(const ClassifierHead& original, const Matrix& embeddings) const;
};

AlignmentResult train_alignment(const MlpEncoder& merged_encoder, const TaskModel& finetuned, const Matrix& data,
                                const AlignmentConfig& cfg);

struct ProtocolOutcome {
  Accuracy accuracy;
  std::optional<AlignmentResult> alignment;
};

/// Aligned classifier W′ on sampled unlabeled data, then the current protocol with W′.
ProtocolOutcome ft_classifier_eval(const MlpEncoder& merged_encoder, const TaskModel& finetuned,
                                   const TaskDataset& ds, const AlignmentConfig& cfg);

/// Aligned mapping M (optionally orthogonality-regularised), then argmax(emb·M·W + b).
ProtocolOutcome aligned_m_eval(const MlpEncoder& merged_encoder, const TaskModel& finetuned, const TaskDataset& ds,
                               const AlignmentConfig& cfg);

enum class Protocol { Current, Knn, FtClassifier, AlignedM, OrthM };

std::string_view to_string(Protocol p);
Protocol parse_protocol(std::string_view name);
std::vector<Protocol> all_protocols();

struct ProtocolSettings {
  std::size_t knn_k = 5;
  Split knn_split = Split::Train;
  AlignmentConfig align;  // variant is overridden per protocol
  double orth_alpha = 0.01;
};

/// Runs one protocol for one task. `seed` drives anchor/data sampling.
ProtocolOutcome evaluate_protocol(Protocol protocol, const MlpEncoder& encoder, const TaskModel& finetuned,
                                  const TaskDataset& ds, const ProtocolSettings& settings, std::uint64_t seed);

/// "k" tag recorded in reports for a protocol: "-" for current, the anchor
/// count for knn, the alignment data tag otherwise.
std::string protocol_tag(Protocol protocol, const ProtocolSettings& settings);

struct BaseEvalRow {
  int task = 0;
  Protocol protocol = Protocol::Current;
  Accuracy accuracy;
};

/// Current and FT-Classifier (or any given protocols) with Θ_b as the encoder.
std::vector<BaseEvalRow> base_model_eval(const ModelParams& theta_b, std::span<const TaskModel> finetuned,
                                         std::span<const TaskDataset> tests, std::span<const Protocol> protocols,
                                         const ProtocolSettings& settings, std::uint64_t seed);

}  // namespace mmlab
