#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mmlab/experiment.hpp"
#include "mmlab/training.hpp"
#include "support.hpp"

using namespace mmlab;
using testing::random_matrix;

namespace {

std::vector<TaskDataset> default_suite(std::uint64_t seed) {
  const ExperimentConfig cfg = default_experiment_config();
  std::vector<TaskDataset> out;
  for (const auto& spec : cfg.tasks) out.push_back(gen_task(spec, derive_seed(seed, "data:" + std::to_string(spec.task_id))));
  return out;
}

TrainConfig with_seed(TrainConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  return cfg;
}

double test_accuracy(const TaskModel& m, const TaskDataset& ds) {
  const LabeledBatch test = ds.split(Split::Test);
  const auto pred = predict_labels(logits(m, test.x));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == test.y[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

TaskModel small_model(std::size_t in, std::vector<std::size_t> hidden, std::size_t d, std::size_t c, Rng& rng,
                      bool bias = true) {
  const MlpEncoder enc = MlpEncoder::initialize(Architecture{in, std::move(hidden), d}, rng);
  return TaskModel(enc, ClassifierHead::initialize(d, c, rng, bias), 0);
}

// Epoch-mean train loss may rise by more than 5% over its running best only transiently:
// it must come back within 5% of that best inside three epochs, and end no higher.
bool loss_trend_ok(const TrainLog& log) {
  std::vector<double> loss;
  for (const auto& e : log)
    if (e.split == Split::Train) loss.push_back(e.loss);
  double best = loss.front();
  for (std::size_t e = 1; e < loss.size(); ++e) {
    if (loss[e] > 1.05 * best) {
      bool recovered = false;
      for (std::size_t f = e + 1; f < std::min(loss.size(), e + 4); ++f) recovered |= loss[f] <= 1.05 * best;
      if (!recovered) return false;
    }
    best = std::min(best, loss[e]);
  }
  return loss.back() <= 1.05 * best;
}

std::vector<double> train_losses(const TrainLog& log) {
  std::vector<double> out;
  for (const auto& e : log)
    if (e.split == Split::Train) out.push_back(e.loss);
  return out;
}

}  // namespace

TEST_CASE("cross-entropy of uniform logits is ln C") {
  for (int c : {2, 3, 7}) {
    const Matrix z = Matrix::Zero(5, c);
    const std::vector<int> y{0, 1, 0, 1, 1};
    CHECK(std::abs(cross_entropy(z, y) - std::log(static_cast<double>(c))) < 1e-15);
  }
}

TEST_CASE("cross-entropy gradient vanishes at a saturated one-hot prediction") {
  Matrix z = Matrix::Zero(3, 4);
  const std::vector<int> y{2, 0, 3};
  for (int r = 0; r < 3; ++r) z(r, y[static_cast<std::size_t>(r)]) = 20.0;
  // Each row: the true class is short by 3 off, each other class holds off; rows are averaged.
  const Matrix g = cross_entropy_grad(z, y);
  const double off = std::exp(-20.0) / (1.0 + 3.0 * std::exp(-20.0));
  const double expect = std::sqrt(3.0 * (9.0 * off * off + 3.0 * off * off)) / 3.0;
  CHECK(g.norm() == doctest::Approx(expect).epsilon(1e-6));
  CHECK(g.norm() < 1e-6);
}

TEST_CASE("backprop_ce rejects out-of-range labels") {
  Rng rng(1);
  const TaskModel m = small_model(4, {5}, 3, 3, rng);
  const Matrix x = random_matrix(2, 4, rng);
  const std::vector<int> bad{0, 3};
  CHECK_THROWS_AS((void)backprop_ce(m, x, bad), DataError);
}

TEST_CASE("grad_check: linear softmax model") {
  Rng rng(2);
  const TaskModel m = small_model(6, {}, 4, 3, rng);
  LabeledBatch b{random_matrix(10, 6, rng), {0, 1, 2, 0, 1, 2, 2, 1, 0, 0}};
  const GradCheckReport r = grad_check(m, b, 1e-5, 1e-6);
  CHECK_MESSAGE(r.passed, r.summary());
  CHECK(r.max_rel_error < 1e-6);
  CHECK(r.checked == to_params(m).numel());
}

TEST_CASE("grad_check: random 8-8-4 model and the default MLP") {
  Rng rng(3);
  const TaskModel small = small_model(8, {8}, 8, 4, rng);
  LabeledBatch b{random_matrix(12, 8, rng), {0, 1, 2, 3, 0, 1, 2, 3, 3, 2, 1, 0}};
  const GradCheckReport r = grad_check(small, b, 1e-5, 1e-4);
  CHECK_MESSAGE(r.max_rel_error < 1e-4, r.summary());

  const TaskModel big = small_model(16, {64, 64}, 32, 5, rng);
  LabeledBatch bb{random_matrix(16, 16, rng, 2.0), {0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0}};
  const GradCheckReport rb = grad_check(big, bb, 1e-5, 1e-4);
  CHECK_MESSAGE(rb.max_rel_error < 1e-4, rb.summary());

  const TaskModel nobias = small_model(8, {8}, 8, 4, rng, false);
  CHECK(grad_check(nobias, b, 1e-5, 1e-4).passed);
}

TEST_CASE("grad_check reports a corrupted gradient") {
  Rng rng(4);
  const TaskModel m = small_model(5, {6}, 4, 3, rng);
  const Matrix x = random_matrix(8, 5, rng);
  const std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1};
  LossAndGrad lg = backprop_ce(m, x, y);
  lg.grad.grads[1].values[2] += 0.5;
  const int id = m.task_id;
  auto loss = [&](const ModelParams& p) {
    const TaskModel tm = task_model_from_params(p, id);
    return cross_entropy(logits(tm, x), y);
  };
  const GradCheckReport r = grad_check(loss, to_params(m), lg.grad, 1e-5, 1e-4);
  CHECK_FALSE(r.passed);
  CHECK(r.worst_layer == to_params(m)[1].name);
  CHECK(r.worst_index == 2);
  CHECK(r.summary().find(r.worst_layer) != std::string::npos);
}

TEST_CASE("adam_step closed-form first step and zero gradient") {
  ModelParams p;
  p.add(Tensor{"x", {1}, {0.0}});
  GradientBundle g{p.zeros_like()};
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  AdamState st = AdamState::zeros_like(p);
  adam_step(p, g, st, cfg);
  CHECK(p.at("x").values[0] == 0.0);

  ModelParams q;
  q.add(Tensor{"x", {1}, {0.0}});
  GradientBundle one{q.zeros_like()};
  one.grads[0].values[0] = 1.0;
  AdamState s2 = AdamState::zeros_like(q);
  adam_step(q, one, s2, cfg);
  CHECK(q.at("x").values[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-14));
  CHECK(s2.step == 1);

  ModelParams other;
  other.add(Tensor{"y", {1}, {0.0}});
  CHECK_THROWS_AS(adam_step(other, one, s2, cfg), StructureError);
}

TEST_CASE("adam trajectories are deterministic") {
  Rng rng(5);
  ModelParams p;
  p.add(std::string("w"), random_matrix(3, 3, rng));
  ModelParams a = p, b = p;
  AdamState sa = AdamState::zeros_like(p), sb = AdamState::zeros_like(p);
  TrainConfig cfg;
  for (int i = 0; i < 50; ++i) {
    GradientBundle g{p.zeros_like()};
    for (auto& v : g.grads[0].values) v = rng.normal();
    adam_step(a, g, sa, cfg);
    adam_step(b, g, sb, cfg);
  }
  CHECK(bit_equal(a, b));
}

TEST_CASE("pretrain: zero epochs returns the seeded initialization") {
  const auto suite = default_suite(0);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 123;
  const ModelParams theta = pretrain_base(suite, Architecture{}, cfg);
  Rng rng(123);
  CHECK(bit_equal(theta, MlpEncoder::initialize(Architecture{}, rng).params()));
  CHECK_THROWS_AS((void)pretrain_base({}, Architecture{}, cfg), ConfigError);
}

TEST_CASE("pretrain is deterministic and learns the parity pretext") {
  const auto suite = default_suite(1);
  const TrainConfig cfg = with_seed(default_experiment_config().pretrain, 7);
  const PretrainResult a = pretrain(suite, Architecture{}, cfg);
  const PretrainResult b = pretrain(suite, Architecture{}, cfg);
  CHECK(bit_equal(a.encoder, b.encoder));
  CHECK(a.heldout_accuracy > 0.60);
}

TEST_CASE("finetune: zero learning rate leaves the encoder and the head at their start") {
  const auto suite = default_suite(2);
  Rng rng(9);
  const ModelParams theta_b = MlpEncoder::initialize(Architecture{}, rng).params();
  const ModelParams copy = theta_b;
  TrainConfig cfg = with_seed(default_experiment_config().finetune, 11);
  cfg.learning_rate = 0.0;
  cfg.epochs = 2;
  const TaskModel m = finetune(theta_b, suite[1], cfg);
  CHECK(bit_equal(m.encoder.params(), theta_b));
  Rng head_rng(11);
  const ClassifierHead init = ClassifierHead::initialize(32, 4, head_rng);
  CHECK(m.head.weight == init.weight);
  CHECK(m.head.bias == init.bias);
  CHECK(bit_equal(theta_b, copy));
}

TEST_CASE("finetune reaches 100% on spread-0 data") {
  TaskSpec spec;
  spec.num_classes = 4;
  spec.samples_per_class = 50;
  spec.spread = 0.0;
  const TaskDataset ds = gen_task(spec, 3);
  Rng rng(1);
  const ModelParams theta_b = MlpEncoder::initialize(Architecture{}, rng).params();
  const TaskModel m = finetune(theta_b, ds, with_seed(TrainConfig{}, 5));
  CHECK(test_accuracy(m, ds) == 1.0);
}

TEST_CASE("default suite: fine-tuning, MTL and the loss trend") {
  const auto cfg = default_experiment_config();
  const auto suite = default_suite(0);
  const ModelParams theta_b = pretrain_base(suite, cfg.arch, with_seed(cfg.pretrain, derive_seed(0, "pretrain")));

  std::vector<double> ft_acc;
  for (const auto& ds : suite) {
    TrainLog log;
    const TaskModel m = finetune(theta_b, ds, with_seed(cfg.finetune, derive_seed(0, "task:" + std::to_string(ds.task_id))), &log);
    ft_acc.push_back(test_accuracy(m, ds));
    if (ds.num_classes == 4) CHECK(ft_acc.back() >= 0.85);
    CHECK(loss_trend_ok(log));
  }
  TrainLog mtl_log;
  const MtlModel mtl = train_mtl(theta_b, suite, with_seed(cfg.mtl, derive_seed(0, "mtl")), &mtl_log);
  CHECK(loss_trend_ok(mtl_log));
  double mtl_mean = 0.0;
  for (std::size_t t = 0; t < suite.size(); ++t) mtl_mean += test_accuracy(mtl.task_model(t), suite[t]);
  mtl_mean /= static_cast<double>(suite.size());
  const double ft_mean = std::accumulate(ft_acc.begin(), ft_acc.end(), 0.0) / static_cast<double>(ft_acc.size());
  CHECK(std::abs(mtl_mean - ft_mean) <= 0.05);
}

TEST_CASE("MTL with one task reduces to fine-tuning") {
  const auto suite = default_suite(4);
  Rng rng(2);
  const ModelParams theta_b = MlpEncoder::initialize(Architecture{}, rng).params();
  TrainConfig cfg = with_seed(TrainConfig{}, 17);
  cfg.epochs = 3;
  TrainLog ft_log, mtl_log;
  const TaskModel ft = finetune(theta_b, suite[0], cfg, &ft_log);
  const MtlModel mtl = train_mtl(theta_b, std::span(suite).first(1), cfg, &mtl_log);
  CHECK(train_losses(ft_log) == train_losses(mtl_log));
  CHECK(bit_equal(ft.encoder.params(), mtl.encoder.params()));
}

TEST_CASE("MTL with zero learning rate changes nothing") {
  const auto suite = default_suite(5);
  Rng rng(3);
  const ModelParams theta_b = MlpEncoder::initialize(Architecture{}, rng).params();
  TrainConfig cfg = with_seed(TrainConfig{}, 19);
  cfg.learning_rate = 0.0;
  cfg.epochs = 1;
  const MtlModel m = train_mtl(theta_b, suite, cfg);
  CHECK(bit_equal(m.encoder.params(), theta_b));
  Rng head_rng(19);
  for (std::size_t t = 0; t < suite.size(); ++t) {
    const ClassifierHead init =
        ClassifierHead::initialize(32, static_cast<std::size_t>(suite[t].num_classes), head_rng);
    CHECK(m.heads[t].weight == init.weight);
  }
}

TEST_CASE("TrainConfig validation") {
  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(100), ConfigError);
  cfg.batch_size = 200;
  CHECK_THROWS_AS(cfg.validate(100), ConfigError);
  cfg.batch_size = 32;
  cfg.learning_rate = -1;
  CHECK_THROWS_AS(cfg.validate(100), ConfigError);
}

TEST_CASE("train log CSV carries the digest and header") {
  testing::TempDir dir("trainlog");
  TrainLog log{{0, Split::Train, 1.5, 0.25}, {0, Split::Val, 1.25, 0.5}};
  write_train_log_csv(log, dir / "log.csv", "d1");
  CHECK(testing::slurp(dir / "log.csv") == "# config_digest=d1\nepoch,split,loss,accuracy\n0,train,1.5,0.25\n0,val,1.25,0.5\n");
}
