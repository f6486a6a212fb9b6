#include "mmlab/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mmlab {

void TrainConfig::validate(std::size_t train_size) const {
  if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
  if (batch_size > train_size) {
    throw ConfigError("train config: batch_size " + std::to_string(batch_size) + " exceeds train split size " +
                      std::to_string(train_size));
  }
  if (!(learning_rate >= 0.0)) throw ConfigError("train config: learning_rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train config: Adam betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("train config: epsilon must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train config: weight_decay must be >= 0");
}

AdamState AdamState::zeros_like(const ModelParams& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

void adam_step(ModelParams& params, const GradientBundle& g, AdamState& state, const TrainConfig& cfg) {
  require_homologous(params, g.grads, "adam_step (gradients)");
  require_homologous(params, state.m, "adam_step (first moment)");
  require_homologous(params, state.v, "adam_step (second moment)");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t l = 0; l < params.size(); ++l) {
    auto& p = params[l].values;
    const auto& gr = g.grads[l].values;
    auto& m = state.m[l].values;
    auto& v = state.v[l].values;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gr[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gr[i] * gr[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= cfg.learning_rate * (mhat / (std::sqrt(vhat) + cfg.epsilon) + cfg.weight_decay * p[i]);
    }
  }
}

double cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw ShapeError("cross_entropy: " + std::to_string(logits.rows()) + " logit rows vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ShapeError("cross_entropy: empty batch");
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols()) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(logits.cols()) + ")");
    }
    const double peak = logits.row(r).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) sum += std::exp(logits(r, c) - peak);
    total += std::log(sum) + peak - logits(r, y);
  }
  return total / static_cast<double>(labels.size());
}

Matrix cross_entropy_grad(const Matrix& logits, std::span<const int> labels) {
  Matrix g = softmax_rows(logits);
  const double inv_n = 1.0 / static_cast<double>(labels.size());
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols()) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(logits.cols()) + ")");
    }
    g(r, y) -= 1.0;
  }
  return g * inv_n;
}

ModelParams encoder_backward(const MlpEncoder& encoder, const EncoderCache& cache, const Matrix& d_embeddings) {
  const std::size_t layers = encoder.num_layers();
  std::vector<Matrix> d_weights(layers);
  std::vector<Vector> d_biases(layers);
  Matrix delta = d_embeddings;
  for (std::size_t l = layers; l-- > 0;) {
    const Matrix& out = cache.activations[l + 1];
    if (l + 1 < layers) delta = delta.cwiseProduct((1.0 - out.array().square()).matrix());
    d_weights[l] = matmul_tn(cache.activations[l], delta);
    d_biases[l] = delta.colwise().sum().transpose();
    if (l > 0) delta = matmul_nt(delta, encoder.params().matrix(MlpEncoder::weight_name(l)));
  }
  ModelParams grads;
  for (std::size_t l = 0; l < layers; ++l) {
    grads.add(MlpEncoder::weight_name(l), d_weights[l]);
    grads.add(MlpEncoder::bias_name(l), d_biases[l]);
  }
  return grads;
}

namespace {

struct HeadGrad {
  Matrix d_weight;
  Vector d_bias;
  Matrix d_embeddings;
};

HeadGrad head_backward(const ClassifierHead& head, const Matrix& embeddings, const Matrix& d_logits) {
  return {matmul_tn(embeddings, d_logits), d_logits.colwise().sum().transpose(), matmul_nt(d_logits, head.weight)};
}

void append_head(ModelParams& grads, const ClassifierHead& head, const HeadGrad& hg, const std::string& prefix) {
  grads.add(prefix + "weight", hg.d_weight);
  if (head.use_bias) grads.add(prefix + "bias", hg.d_bias);
}

}  // namespace

LossAndGrad backprop_ce(const TaskModel& model, const Matrix& x, std::span<const int> labels) {
  if (labels.empty()) throw ShapeError("backprop_ce: empty batch");
  const EncoderCache cache = encode_with_cache(model.encoder, x);
  const Matrix out = model.head.apply(cache.embeddings());
  LossAndGrad r;
  r.loss = cross_entropy(out, labels);
  const HeadGrad hg = head_backward(model.head, cache.embeddings(), cross_entropy_grad(out, labels));
  r.grad.grads = encoder_backward(model.encoder, cache, hg.d_embeddings);
  append_head(r.grad.grads, model.head, hg, "head.");
  return r;
}

BatchMetrics evaluate_batch(const TaskModel& model, const LabeledBatch& batch) {
  const Matrix out = logits(model, batch.x);
  const auto pred = predict_labels(out);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.y[i] ? 1 : 0;
  return {cross_entropy(out, batch.y), static_cast<double>(correct) / static_cast<double>(batch.size())};
}

void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path, const std::string& digest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  if (!digest.empty()) out << "# config_digest=" << digest << '\n';
  out << "epoch,split,loss,accuracy\n";
  for (const auto& e : log)
    out << e.epoch << ',' << to_string(e.split) << ',' << format_double(e.loss) << ',' << format_double(e.accuracy) << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

namespace {

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return batches;
}

LabeledBatch gather(const LabeledBatch& data, std::span<const std::size_t> idx) {
  LabeledBatch b;
  b.x.resize(static_cast<Eigen::Index>(idx.size()), data.x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    b.x.row(static_cast<Eigen::Index>(r)) = data.x.row(static_cast<Eigen::Index>(idx[r]));
    b.y.push_back(data.y[idx[r]]);
  }
  return b;
}

void log_epoch(TrainLog* log, std::size_t epoch, const TaskModel& model, const LabeledBatch& train,
               const LabeledBatch* val) {
  if (log == nullptr) return;
  const auto tr = evaluate_batch(model, train);
  log->push_back({epoch, Split::Train, tr.loss, tr.accuracy});
  if (val != nullptr && val->size() > 0) {
    const auto va = evaluate_batch(model, *val);
    log->push_back({epoch, Split::Val, va.loss, va.accuracy});
  }
}

// Minibatch Adam on the full model; the shuffle stream is `rng`.
TaskModel train_classifier(TaskModel model, const LabeledBatch& train, const LabeledBatch* val,
                           const TrainConfig& cfg, Rng& rng, TrainLog* log) {
  cfg.validate(train.size());
  ModelParams params = to_params(model);
  AdamState state = AdamState::zeros_like(params);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  log_epoch(log, 0, model, train, val);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (const auto& idx : make_batches(order, cfg.batch_size)) {
      const LabeledBatch batch = gather(train, idx);
      const LossAndGrad lg = backprop_ce(model, batch.x, batch.y);
      if (!std::isfinite(lg.loss)) throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
      adam_step(params, lg.grad, state, cfg);
      model = task_model_from_params(params, model.task_id);
    }
    log_epoch(log, epoch, model, train, val);
  }
  return model;
}

LabeledBatch concat(const std::vector<LabeledBatch>& parts) {
  LabeledBatch out;
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.x.rows();
  if (parts.empty()) return out;
  out.x.resize(rows, parts.front().x.cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    if (p.x.cols() != out.x.cols()) throw ShapeError("pooled tasks disagree on input dimension");
    out.x.middleRows(r, p.x.rows()) = p.x;
    r += p.x.rows();
    out.y.insert(out.y.end(), p.y.begin(), p.y.end());
  }
  return out;
}

LabeledBatch pretext(LabeledBatch b) {
  for (auto& y : b.y) y = pretext_label(y);
  return b;
}

}  // namespace

PretrainResult pretrain(std::span<const TaskDataset> tasks, const Architecture& arch, const TrainConfig& cfg,
                        TrainLog* log) {
  if (tasks.empty()) throw ConfigError("pretrain_base: empty task list");
  std::vector<LabeledBatch> train_parts;
  std::vector<LabeledBatch> heldout_parts;
  for (const auto& t : tasks) {
    train_parts.push_back(pretext(t.split(Split::Train)));
    heldout_parts.push_back(pretext(t.split(Split::Val)));
    heldout_parts.push_back(pretext(t.split(Split::Test)));
  }
  const LabeledBatch train = concat(train_parts);
  const LabeledBatch heldout = concat(heldout_parts);
  if (static_cast<std::size_t>(train.x.cols()) != arch.input_dim) {
    throw ShapeError("pretrain_base: data has " + std::to_string(train.x.cols()) + " features, architecture expects " +
                     std::to_string(arch.input_dim));
  }

  Rng rng(cfg.seed);
  MlpEncoder encoder = MlpEncoder::initialize(arch, rng);
  ClassifierHead head = ClassifierHead::initialize(arch.embed_dim, 2, rng, cfg.head_bias);
  TaskModel model = train_classifier(TaskModel(std::move(encoder), std::move(head), -1), train, &heldout, cfg, rng, log);
  PretrainResult r{model.encoder.params(), model.head, evaluate_batch(model, heldout).accuracy};
  return r;
}

ModelParams pretrain_base(std::span<const TaskDataset> tasks, const Architecture& arch, const TrainConfig& cfg) {
  return pretrain(tasks, arch, cfg).encoder;
}

TaskModel finetune(const ModelParams& theta_b, const TaskDataset& ds, const TrainConfig& cfg, TrainLog* log) {
  MlpEncoder encoder = MlpEncoder::from_params(theta_b);
  if (encoder.params().size() != theta_b.size()) {
    throw StructureError("finetune: base parameters contain non-encoder layers");
  }
  const LabeledBatch train = ds.split(Split::Train);
  const LabeledBatch val = ds.split(Split::Val);
  Rng rng(cfg.seed);
  ClassifierHead head =
      ClassifierHead::initialize(encoder.embed_dim(), static_cast<std::size_t>(ds.num_classes), rng, cfg.head_bias);
  return train_classifier(TaskModel(std::move(encoder), std::move(head), ds.task_id), train, &val, cfg, rng, log);
}

MtlModel train_mtl(const ModelParams& theta_b, std::span<const TaskDataset> tasks, const TrainConfig& cfg,
                   TrainLog* log) {
  if (tasks.empty()) throw ConfigError("train_mtl: empty task list");
  MlpEncoder encoder = MlpEncoder::from_params(theta_b);
  const std::size_t num_tasks = tasks.size();
  std::vector<LabeledBatch> train(num_tasks);
  for (std::size_t t = 0; t < num_tasks; ++t) {
    train[t] = tasks[t].split(Split::Train);
    cfg.validate(train[t].size());
  }

  Rng rng(cfg.seed);
  MtlModel mtl{encoder, {}, {}};
  for (const auto& t : tasks) {
    mtl.heads.push_back(
        ClassifierHead::initialize(encoder.embed_dim(), static_cast<std::size_t>(t.num_classes), rng, cfg.head_bias));
    mtl.task_ids.push_back(t.task_id);
  }

  auto pack = [&](const MtlModel& m) {
    ModelParams p = m.encoder.params();
    for (std::size_t t = 0; t < num_tasks; ++t) {
      const std::string prefix = "head." + std::to_string(t) + ".";
      p.add(prefix + "weight", m.heads[t].weight);
      if (m.heads[t].use_bias) p.add(prefix + "bias", m.heads[t].bias);
    }
    return p;
  };
  auto unpack = [&](const ModelParams& p, MtlModel& m) {
    m.encoder = MlpEncoder::from_params(p);
    for (std::size_t t = 0; t < num_tasks; ++t) {
      const std::string prefix = "head." + std::to_string(t) + ".";
      m.heads[t].weight = p.matrix(prefix + "weight");
      if (m.heads[t].use_bias) m.heads[t].bias = p.vector(prefix + "bias");
    }
  };
  auto log_all = [&](std::size_t epoch) {
    if (log == nullptr) return;
    double loss = 0.0;
    double acc = 0.0;
    for (std::size_t t = 0; t < num_tasks; ++t) {
      const auto m = evaluate_batch(mtl.task_model(t), train[t]);
      loss += m.loss;
      acc += m.accuracy;
    }
    log->push_back({epoch, Split::Train, loss, acc / static_cast<double>(num_tasks)});
  };

  ModelParams params = pack(mtl);
  AdamState state = AdamState::zeros_like(params);
  std::vector<std::vector<std::size_t>> orders(num_tasks);
  for (std::size_t t = 0; t < num_tasks; ++t) {
    orders[t].resize(train[t].size());
    std::iota(orders[t].begin(), orders[t].end(), std::size_t{0});
  }
  log_all(0);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::vector<std::vector<std::size_t>>> batches(num_tasks);
    std::size_t steps = 0;
    for (std::size_t t = 0; t < num_tasks; ++t) {
      rng.shuffle(orders[t]);
      batches[t] = make_batches(orders[t], cfg.batch_size);
      steps = std::max(steps, batches[t].size());
    }
    for (std::size_t s = 0; s < steps; ++s) {
      ModelParams grads;
      ModelParams encoder_grad;
      std::vector<HeadGrad> head_grads;
      for (std::size_t t = 0; t < num_tasks; ++t) {
        const auto& idx = batches[t][s % batches[t].size()];
        const LabeledBatch batch = gather(train[t], idx);
        const EncoderCache cache = encode_with_cache(mtl.encoder, batch.x);
        const Matrix out = mtl.heads[t].apply(cache.embeddings());
        if (!std::isfinite(cross_entropy(out, batch.y))) throw NumericError("train_mtl: non-finite loss");
        HeadGrad hg = head_backward(mtl.heads[t], cache.embeddings(), cross_entropy_grad(out, batch.y));
        ModelParams eg = encoder_backward(mtl.encoder, cache, hg.d_embeddings);
        encoder_grad = t == 0 ? std::move(eg) : encoder_grad + eg;
        head_grads.push_back(std::move(hg));
      }
      grads = std::move(encoder_grad);
      for (std::size_t t = 0; t < num_tasks; ++t)
        append_head(grads, mtl.heads[t], head_grads[t], "head." + std::to_string(t) + ".");
      adam_step(params, {std::move(grads)}, state, cfg);
      unpack(params, mtl);
    }
    log_all(epoch);
  }
  return mtl;
}

// ---------------------------------------------------------------------------

std::string GradCheckReport::summary() const {
  std::ostringstream s;
  s << (passed ? "PASS" : "FAIL") << " max_rel_error=" << max_rel_error << " over " << checked
    << " coordinates; worst " << worst_layer << "[" << worst_index << "] analytic=" << worst_analytic
    << " numeric=" << worst_numeric;
  return s.str();
}

GradCheckReport grad_check(const std::function<double(const ModelParams&)>& loss, const ModelParams& at,
                           const GradientBundle& analytic, double h, double tol, std::uint64_t seed,
                           std::size_t max_coords) {
  if (!(h > 0.0)) throw ConfigError("grad_check: h must be positive");
  require_homologous(at, analytic.grads, "grad_check");

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t l = 0; l < at.size(); ++l)
    for (std::size_t i = 0; i < at[l].values.size(); ++i) coords.emplace_back(l, i);
  if (coords.size() > max_coords) {
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  ModelParams probe = at;
  for (const auto& [l, i] : coords) {
    const double orig = probe[l].values[i];
    probe[l].values[i] = orig + h;
    const double up = loss(probe);
    probe[l].values[i] = orig - h;
    const double down = loss(probe);
    probe[l].values[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic.grads[l].values[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (rel > report.max_rel_error || report.checked == 1) {
      report.max_rel_error = rel;
      report.worst_layer = at[l].name;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

GradCheckReport grad_check(const TaskModel& model, const LabeledBatch& batch, double h, double tol) {
  const LossAndGrad lg = backprop_ce(model, batch.x, batch.y);
  const ModelParams at = to_params(model);
  auto loss = [&](const ModelParams& p) {
    return cross_entropy(task_model_from_params(p, model.task_id).head.apply(
                             encode(MlpEncoder::from_params(p), batch.x)),
                         batch.y);
  };
  return grad_check(loss, at, lg.grad, h, tol);
}

}  // namespace mmlab
