#include "mmlab/protocols.hpp"

#include <cmath>
#include <limits>

namespace mmlab {

Accuracy score(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) {
    throw ShapeError("score: " + std::to_string(predicted.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  }
  Accuracy acc{0, labels.size()};
  for (std::size_t i = 0; i < labels.size(); ++i) acc.correct += predicted[i] == labels[i] ? 1 : 0;
  return acc;
}

Accuracy current_eval(const MlpEncoder& encoder, const ClassifierHead& head, const LabeledBatch& test) {
  return score(predict_labels(head.apply(encode(encoder, test.x))), test.y);
}

std::vector<int> knn_predict(const Matrix& embeddings, std::span<const Matrix> anchor_embeddings) {
  if (anchor_embeddings.empty()) throw ConfigError("knn: no anchor classes");
  for (std::size_t c = 0; c < anchor_embeddings.size(); ++c) {
    if (anchor_embeddings[c].rows() == 0) throw ConfigError("knn: class " + std::to_string(c) + " has no anchors");
    if (anchor_embeddings[c].cols() != embeddings.cols()) {
      throw ShapeError("knn: anchors of class " + std::to_string(c) + " are " +
                       shape_str(anchor_embeddings[c].rows(), anchor_embeddings[c].cols()) + ", embeddings are " +
                       shape_str(embeddings.rows(), embeddings.cols()));
    }
  }
  std::vector<int> out(static_cast<std::size_t>(embeddings.rows()));
  for (Eigen::Index r = 0; r < embeddings.rows(); ++r) {
    double best = std::numeric_limits<double>::infinity();
    int best_class = 0;
    for (std::size_t c = 0; c < anchor_embeddings.size(); ++c) {
      const Matrix& anchors = anchor_embeddings[c];
      double total = 0.0;
      for (Eigen::Index i = 0; i < anchors.rows(); ++i) total += euclidean_distance(embeddings.row(r), anchors.row(i));
      const double mean = total / static_cast<double>(anchors.rows());
      if (mean < best) {
        best = mean;
        best_class = static_cast<int>(c);
      }
    }
    out[static_cast<std::size_t>(r)] = best_class;
  }
  return out;
}

Accuracy knn_eval(const MlpEncoder& encoder, const FewShotAnchors& anchors, const LabeledBatch& test) {
  std::vector<Matrix> embedded;
  embedded.reserve(anchors.samples.size());
  for (const auto& a : anchors.samples) embedded.push_back(encode(encoder, a));
  return score(knn_predict(encode(encoder, test.x), embedded), test.y);
}

std::string_view to_string(AlignVariant v) {
  switch (v) {
    case AlignVariant::ClassifierW: return "classifier-w";
    case AlignVariant::MappingM: return "mapping-m";
    case AlignVariant::OrthMappingM: return "orth-mapping-m";
  }
  return "?";
}

std::string DataSource::tag() const {
  switch (kind) {
    case Kind::FewShot: return std::to_string(k);
    case Kind::Fraction: return format_double(fraction);
    case Kind::Full: return "full";
  }
  return "?";
}

void AlignmentConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("alignment: alpha must be >= 0");
  if (!(learning_rate >= 0.0)) throw ConfigError("alignment: learning_rate must be >= 0");
  if (source.kind == DataSource::Kind::FewShot && source.k < 1) throw ConfigError("alignment: k must be >= 1");
  if (source.kind == DataSource::Kind::Fraction && !(source.fraction > 0.0 && source.fraction <= 1.0)) {
    throw ConfigError("alignment: fraction must be in (0, 1]");
  }
}

std::vector<std::size_t> alignment_indices(const TaskDataset& ds, const DataSource& source, std::uint64_t seed) {
  switch (source.kind) {
    case DataSource::Kind::FewShot: return sample_few_shot(ds, source.k, source.split, seed).flat_indices();
    case DataSource::Kind::Fraction: return sample_fraction(ds, source.fraction, source.split, seed);
    case DataSource::Kind::Full: return ds.indices(source.split);
  }
  return {};
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::string_view kMapping = "align.m";
}

AlignmentObjective::AlignmentObjective(Matrix student_embeddings, Matrix teacher_probs, ClassifierHead teacher_head,
                                       AlignVariant variant, double alpha)
    : embeddings_(std::move(student_embeddings)),
      teacher_probs_(std::move(teacher_probs)),
      head_(std::move(teacher_head)),
      variant_(variant),
      alpha_(alpha) {
  if (embeddings_.rows() == 0) throw ConfigError("alignment: empty data");
  if (embeddings_.rows() != teacher_probs_.rows()) {
    throw ShapeError("alignment: " + std::to_string(embeddings_.rows()) + " student rows vs " +
                     std::to_string(teacher_probs_.rows()) + " teacher rows");
  }
  if (embeddings_.cols() != head_.weight.rows()) {
    throw ShapeError("alignment: student embeddings " + shape_str(embeddings_.rows(), embeddings_.cols()) +
                     " do not fit head " + shape_str(head_.weight.rows(), head_.weight.cols()));
  }
  if (teacher_probs_.cols() != head_.weight.cols()) {
    throw ShapeError("alignment: teacher has " + std::to_string(teacher_probs_.cols()) + " classes, head has " +
                     std::to_string(head_.weight.cols()));
  }
}

ModelParams AlignmentObjective::initial_params() const {
  if (variant_ == AlignVariant::ClassifierW) return to_params(head_);
  ModelParams p;
  p.add(std::string(kMapping), Matrix(Matrix::Identity(embeddings_.cols(), embeddings_.cols())));
  return p;
}

Matrix AlignmentObjective::student_logits(const ModelParams& params) const {
  if (variant_ == AlignVariant::ClassifierW) return head_from_params(params).apply(embeddings_);
  return head_.apply(matmul(embeddings_, params.matrix(kMapping)));
}

double AlignmentObjective::kl_loss(const ModelParams& params) const {
  const Matrix q = softmax_rows(student_logits(params));
  double total = 0.0;
  for (Eigen::Index r = 0; r < q.rows(); ++r) total += kl_divergence(teacher_probs_.row(r), q.row(r));
  return total / static_cast<double>(q.rows());
}

double AlignmentObjective::loss(const ModelParams& params) const {
  double l = kl_loss(params);
  if (variant_ == AlignVariant::OrthMappingM) l += alpha_ * orth_penalty(params.matrix(kMapping));
  return l;
}

LossAndGrad AlignmentObjective::loss_and_grad(const ModelParams& params) const {
  const Matrix q = softmax_rows(student_logits(params));
  LossAndGrad r;
  for (Eigen::Index i = 0; i < q.rows(); ++i) r.loss += kl_divergence(teacher_probs_.row(i), q.row(i));
  r.loss /= static_cast<double>(q.rows());
  const Matrix d_logits = (q - teacher_probs_) / static_cast<double>(q.rows());

  if (variant_ == AlignVariant::ClassifierW) {
    const ClassifierHead head = head_from_params(params);
    r.grad.grads.add(std::string(kHeadWeight), matmul_tn(embeddings_, d_logits));
    if (head.use_bias) r.grad.grads.add(std::string(kHeadBias), Vector(d_logits.colwise().sum().transpose()));
    return r;
  }
  const Matrix m = params.matrix(kMapping);
  Matrix d_m = matmul_tn(embeddings_, matmul_nt(d_logits, head_.weight));
  if (variant_ == AlignVariant::OrthMappingM) {
    r.loss += alpha_ * orth_penalty(m);
    d_m += alpha_ * orth_penalty_grad(m);
  }
  r.grad.grads.add(std::string(kMapping), d_m);
  return r;
}

Matrix AlignmentResult::apply(const ClassifierHead& original, const Matrix& embeddings) const {
  if (head) return head->apply(embeddings);
  if (mapping) return original.apply(matmul(embeddings, *mapping));
  return original.apply(embeddings);
}

AlignmentResult train_alignment(const MlpEncoder& merged_encoder, const TaskModel& finetuned, const Matrix& data,
                                const AlignmentConfig& cfg) {
  cfg.validate();
  if (data.rows() == 0) throw ConfigError("alignment: empty data");
  if (merged_encoder.embed_dim() != finetuned.encoder.embed_dim()) {
    throw ShapeError("alignment: merged embed_dim " + std::to_string(merged_encoder.embed_dim()) +
                     " vs fine-tuned " + std::to_string(finetuned.encoder.embed_dim()));
  }
  const Matrix teacher_probs = softmax_rows(logits(finetuned, data));
  const AlignmentObjective objective(encode(merged_encoder, data), teacher_probs, finetuned.head, cfg.variant,
                                     cfg.alpha);

  TrainConfig adam;
  adam.learning_rate = cfg.learning_rate;
  ModelParams params = objective.initial_params();
  AdamState state = AdamState::zeros_like(params);

  AlignmentResult result;
  result.variant = cfg.variant;
  result.loss_history.reserve(cfg.epochs + 1);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const LossAndGrad lg = objective.loss_and_grad(params);
    if (!std::isfinite(lg.loss)) throw NumericError("alignment diverged at epoch " + std::to_string(epoch));
    result.loss_history.push_back(lg.loss);
    adam_step(params, lg.grad, state, adam);
  }
  result.loss_history.push_back(objective.loss(params));
  result.final_kl = objective.kl_loss(params);

  if (cfg.variant == AlignVariant::ClassifierW) {
    result.head = head_from_params(params);
  } else {
    result.mapping = params.matrix(kMapping);
  }
  return result;
}

namespace {

ProtocolOutcome align_and_score(const MlpEncoder& merged_encoder, const TaskModel& finetuned, const TaskDataset& ds,
                                const AlignmentConfig& cfg) {
  const LabeledBatch data = ds.subset(alignment_indices(ds, cfg.source, cfg.seed));
  AlignmentResult alignment = train_alignment(merged_encoder, finetuned, data.x, cfg);
  const LabeledBatch test = ds.split(Split::Test);
  const Accuracy acc = score(predict_labels(alignment.apply(finetuned.head, encode(merged_encoder, test.x))), test.y);
  return {acc, std::move(alignment)};
}

}  // namespace

ProtocolOutcome ft_classifier_eval(const MlpEncoder& merged_encoder, const TaskModel& finetuned,
                                   const TaskDataset& ds, const AlignmentConfig& cfg) {
  if (cfg.variant != AlignVariant::ClassifierW) throw ConfigError("ft_classifier_eval: variant must be classifier-w");
  return align_and_score(merged_encoder, finetuned, ds, cfg);
}

ProtocolOutcome aligned_m_eval(const MlpEncoder& merged_encoder, const TaskModel& finetuned, const TaskDataset& ds,
                               const AlignmentConfig& cfg) {
  if (cfg.variant == AlignVariant::ClassifierW) throw ConfigError("aligned_m_eval: variant must be a mapping variant");
  return align_and_score(merged_encoder, finetuned, ds, cfg);
}

std::string_view to_string(Protocol p) {
  switch (p) {
    case Protocol::Current: return "current";
    case Protocol::Knn: return "knn";
    case Protocol::FtClassifier: return "ft-classifier";
    case Protocol::AlignedM: return "aligned-m";
    case Protocol::OrthM: return "orth-m";
  }
  return "?";
}

Protocol parse_protocol(std::string_view name) {
  for (Protocol p : all_protocols())
    if (to_string(p) == name) return p;
  throw ConfigError("unknown protocol '" + std::string(name) +
                    "' (expected current, knn, ft-classifier, aligned-m or orth-m)");
}

std::vector<Protocol> all_protocols() {
  return {Protocol::Current, Protocol::Knn, Protocol::FtClassifier, Protocol::AlignedM, Protocol::OrthM};
}

std::string protocol_tag(Protocol protocol, const ProtocolSettings& settings) {
  switch (protocol) {
    case Protocol::Current: return "-";
    case Protocol::Knn: return std::to_string(settings.knn_k);
    default: return settings.align.source.tag();
  }
}

ProtocolOutcome evaluate_protocol(Protocol protocol, const MlpEncoder& encoder, const TaskModel& finetuned,
                                  const TaskDataset& ds, const ProtocolSettings& settings, std::uint64_t seed) {
  AlignmentConfig cfg = settings.align;
  cfg.seed = seed;
  switch (protocol) {
    case Protocol::Current: return {current_eval(encoder, finetuned.head, ds.split(Split::Test)), std::nullopt};
    case Protocol::Knn: {
      const FewShotAnchors anchors = sample_few_shot(ds, settings.knn_k, settings.knn_split, seed);
      return {knn_eval(encoder, anchors, ds.split(Split::Test)), std::nullopt};
    }
    case Protocol::FtClassifier:
      cfg.variant = AlignVariant::ClassifierW;
      return ft_classifier_eval(encoder, finetuned, ds, cfg);
    case Protocol::AlignedM:
      cfg.variant = AlignVariant::MappingM;
      return aligned_m_eval(encoder, finetuned, ds, cfg);
    case Protocol::OrthM:
      cfg.variant = AlignVariant::OrthMappingM;
      cfg.alpha = settings.orth_alpha;
      return aligned_m_eval(encoder, finetuned, ds, cfg);
  }
  throw ConfigError("unknown protocol");
}

std::vector<BaseEvalRow> base_model_eval(const ModelParams& theta_b, std::span<const TaskModel> finetuned,
                                         std::span<const TaskDataset> tests, std::span<const Protocol> protocols,
                                         const ProtocolSettings& settings, std::uint64_t seed) {
  if (finetuned.size() != tests.size()) throw ConfigError("base_model_eval: models and datasets differ in count");
  const MlpEncoder base = MlpEncoder::from_params(theta_b);
  std::vector<BaseEvalRow> rows;
  for (std::size_t t = 0; t < tests.size(); ++t) {
    for (Protocol p : protocols) {
      const std::uint64_t s = derive_seed(seed, "align:" + std::to_string(tests[t].task_id) + ":" + std::string(to_string(p)));
      rows.push_back({tests[t].task_id, p, evaluate_protocol(p, base, finetuned[t], tests[t], settings, s).accuracy});
    }
  }
  return rows;
}

}  // namespace mmlab
