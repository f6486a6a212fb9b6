#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include "mmlab/cli.hpp"
#include "support.hpp"

using namespace mmlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

int failures = 0;

void verdict(int id, const std::string& name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
  std::fflush(stdout);
}

const std::vector<std::string> kMethods{"wa", "ta", "ties"};

// Fine-tuned C=4 task on seed 0 of the default suite, plus its base.
struct Fixture {
  TaskDataset ds;
  ModelParams base;
  TaskModel model;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    const ExperimentConfig cfg = default_experiment_config();
    TaskDataset ds = gen_task(cfg.tasks[1], derive_seed(0, "data:1"));
    const std::vector<TaskDataset> suite{ds};
    TrainConfig pre = cfg.pretrain;
    pre.seed = derive_seed(0, "pretrain");
    ModelParams base = pretrain_base(suite, cfg.arch, pre);
    TrainConfig ft = cfg.finetune;
    ft.seed = derive_seed(0, "task:1");
    TaskModel m = finetune(base, ds, ft);
    return Fixture{std::move(ds), std::move(base), std::move(m)};
  }();
  return f;
}

Outcome gradients() {
  const auto t0 = Clock::now();
  Rng rng(101);
  const MlpEncoder enc = MlpEncoder::initialize(Architecture{8, {8}, 6}, rng);
  const TaskModel model(enc, ClassifierHead::initialize(6, 4, rng), 0);
  LabeledBatch batch{testing::random_matrix(16, 8, rng), {}};
  for (int i = 0; i < 16; ++i) batch.y.push_back(i % 4);
  const GradCheckReport ce = grad_check(model, batch, 1e-5, 1e-4);

  const Matrix emb = testing::random_matrix(20, 6, rng);
  Matrix teacher(20, 4);
  for (Eigen::Index i = 0; i < 20; ++i) teacher.row(i) = softmax(testing::random_vector(4, rng)).transpose();
  double worst_align = 0.0;
  bool align_ok = true;
  for (AlignVariant v : {AlignVariant::ClassifierW, AlignVariant::MappingM, AlignVariant::OrthMappingM}) {
    const AlignmentObjective obj(emb, teacher, model.head, v, 0.1);
    ModelParams at = obj.initial_params();
    for (auto& layer : at)
      for (auto& x : layer.values) x += 0.2 * rng.normal();
    const GradCheckReport r =
        grad_check([&](const ModelParams& p) { return obj.loss(p); }, at, obj.loss_and_grad(at).grad, 1e-5, 1e-4);
    worst_align = std::max(worst_align, r.max_rel_error);
    align_ok = align_ok && r.passed;
  }
  const double elapsed = seconds_since(t0);
  const bool pass = ce.passed && ce.max_rel_error < 1e-4 && align_ok && worst_align < 1e-4 && elapsed < 10.0;
  return {pass, "cross-entropy max rel err " + fmt(ce.max_rel_error, 8) + ", KL+orth max rel err " +
                    fmt(worst_align, 8) + " (tol 1e-4), " + fmt(elapsed, 2) + " s (limit 10 s)"};
}

ModelParams flat(std::vector<double> v) {
  ModelParams p;
  p.add(Tensor{"w", {static_cast<std::uint32_t>(v.size())}, std::move(v)});
  return p;
}

Outcome merge_identities() {
  const Fixture& f = fixture();
  const ModelParams ft = f.model.encoder.params();
  const bool ta = bit_equal(task_arithmetic(f.base, {{1, ft}}, 1.0), ft);
  const bool wa = bit_equal(weight_average({{0, ft}, {1, ft}, {2, ft}}), ft);
  const ModelParams zero = flat({0, 0});
  const TaskParamSet deltas{{0, flat({2, -1})}, {1, flat({1, 3})}};
  const auto keep1 = ties_merge(zero, deltas, 1.0, 1.0)[0].values;
  const auto keep_half = ties_merge(zero, deltas, 1.0, 0.5)[0].values;
  const bool ties = keep1 == std::vector<double>{1.5, 3.0} && keep_half == std::vector<double>{2.0, 3.0};
  std::ostringstream d;
  d << "TA(one task, lambda 1) bit-exact=" << ta << ", WA(identical x3) bit-exact=" << wa << ", Ties keep=1 -> ["
    << keep1[0] << "," << keep1[1] << "], keep=0.5 -> [" << keep_half[0] << "," << keep_half[1] << "]";
  return {ta && wa && ties, d.str()};
}

template <class E>
bool throws_exactly(const std::vector<std::uint8_t>& bytes) {
  try {
    (void)decode_checkpoint(bytes);
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome checkpoints() {
  testing::TempDir dir("accept_ckpt");
  const ModelParams full = to_params(fixture().model);
  save_checkpoint(full, dir / "m.mmlb");
  const bool model_ok = bit_equal(load_checkpoint(dir / "m.mmlb"), full);
  save_checkpoint(ModelParams{}, dir / "empty.mmlb");
  const bool empty_ok = load_checkpoint(dir / "empty.mmlb").empty() && fs::file_size(dir / "empty.mmlb") == 12;

  const std::vector<std::uint8_t> good = encode_checkpoint(full);
  auto magic = good;
  magic[0] = 'X';
  auto version = good;
  version[4] = 99;
  auto truncated = good;
  truncated.resize(good.size() - 5);
  const bool m = throws_exactly<BadMagicError>(magic) && !throws_exactly<VersionMismatchError>(magic);
  const bool v = throws_exactly<VersionMismatchError>(version) && !throws_exactly<BadMagicError>(version);
  const bool t = throws_exactly<TruncatedError>(truncated) && !throws_exactly<BadMagicError>(truncated);
  std::ostringstream d;
  d << "model round trip bit-exact=" << model_ok << ", empty file round trip=" << empty_ok << ", magic->BadMagic=" << m
    << ", version->VersionMismatch=" << v << ", truncation->Truncated=" << t;
  return {model_ok && empty_ok && m && v && t, d.str()};
}

struct RunArtifacts {
  fs::path dir;
  double seconds = 0.0;
  int exit_code = -1;
  EvalReport report;
  nlohmann::json json;
  std::vector<std::uint64_t> seeds;
};

double mean_over_seeds(const RunArtifacts& run, std::string_view model, std::string_view method,
                       std::string_view protocol, std::string_view k) {
  double total = 0.0;
  for (auto s : run.seeds) total += run.report.mean_accuracy(model, method, protocol, s, k);
  return total / static_cast<double>(run.seeds.size());
}

double current(const RunArtifacts& run, std::string_view method, std::optional<std::uint64_t> seed = {}) {
  const std::string_view model = method == "ft" ? "finetuned" : method == "base" ? "base" : "merged";
  return seed ? run.report.mean_accuracy(model, method, "current", *seed, "-")
              : mean_over_seeds(run, model, method, "current", "-");
}

double with_protocol(const RunArtifacts& run, std::string_view method, std::string_view protocol,
                     std::optional<std::uint64_t> seed = {}) {
  const std::string_view model = method == "base" ? "base" : "merged";
  return seed ? run.report.mean_accuracy(model, method, protocol, *seed, "5")
              : mean_over_seeds(run, model, method, protocol, "5");
}

Outcome misalignment_gap(const RunArtifacts& run) {
  bool all = run.seeds.size() == 5;
  std::ostringstream d;
  d << "FT - WA current per seed:";
  for (auto s : run.seeds) {
    const double gap = current(run, "ft", s) - current(run, "wa", s);
    all = all && gap >= 0.10;
    d << ' ' << fmt(gap, 3);
  }
  d << " (need >= 0.100 on all 5), pipeline " << fmt(run.seconds, 1) << " s (limit 300 s)";
  return {all && run.seconds <= 300.0, d.str()};
}

Outcome ftc_recovery(const RunArtifacts& run) {
  bool exceeds = true;
  std::ostringstream d;
  for (const auto& m : kMethods) {
    const double c = current(run, m), f = with_protocol(run, m, "ft-classifier");
    exceeds = exceeds && f > c;
    d << m << " current " << fmt(c, 3) << " -> ft-c " << fmt(f, 3) << "; ";
  }
  std::size_t recovered = 0;
  d << "WA gap recovered per seed:";
  for (auto s : run.seeds) {
    const double gap = current(run, "ft", s) - current(run, "wa", s);
    const double gain = with_protocol(run, "wa", "ft-classifier", s) - current(run, "wa", s);
    const double frac = gap > 0 ? gain / gap : 0.0;
    recovered += frac >= 0.5 ? 1 : 0;
    d << ' ' << fmt(frac, 2);
  }
  d << " (need >= 0.50 on >= 4 of 5)";
  return {exceeds && recovered >= 4, d.str()};
}

Outcome knn_superiority(const RunArtifacts& run) {
  bool all = true;
  std::ostringstream d;
  for (const auto& m : kMethods) {
    const double c = current(run, m), k = with_protocol(run, m, "knn");
    all = all && k >= c;
    d << m << " knn " << fmt(k, 3) << " vs current " << fmt(c, 3) << "; ";
  }
  return {all, d.str()};
}

Outcome orthogonality(const RunArtifacts& run) {
  double worst_penalty = 0.0;
  for (const auto& a : run.json["alignments"]) {
    if (a["protocol"] == "orth-m" && a["model"] == "merged" && a.contains("orth_penalty_per_entry")) {
      worst_penalty = std::max(worst_penalty, a["orth_penalty_per_entry"].get<double>());
    }
  }
  bool close = true;
  std::ostringstream d;
  d << "max orth_penalty/d^2 " << fmt(worst_penalty, 5) << " (limit 0.05); ";
  for (const auto& m : kMethods) {
    const double o = with_protocol(run, m, "orth-m"), a = with_protocol(run, m, "aligned-m");
    close = close && std::abs(o - a) <= 0.03;
    d << m << " orth-m " << fmt(o, 3) << " vs aligned-m " << fmt(a, 3) << "; ";
  }
  return {worst_penalty <= 0.05 && close, d.str()};
}

Outcome base_control(const RunArtifacts& run) {
  const double base_cur = current(run, "base"), base_ftc = with_protocol(run, "base", "ft-classifier");
  const double base_gain = base_ftc - base_cur;
  bool beats = true;
  double min_gain = 1.0;
  std::ostringstream d;
  d << "base current " << fmt(base_cur, 3) << ", ft-c " << fmt(base_ftc, 3) << ", gain " << fmt(base_gain, 3) << "; ";
  for (const auto& m : kMethods) {
    const double c = current(run, m), f = with_protocol(run, m, "ft-classifier");
    beats = beats && c > base_cur && f > base_ftc;
    min_gain = std::min(min_gain, f - c);
    d << m << " current " << fmt(c, 3) << ", ft-c " << fmt(f, 3) << ", gain " << fmt(f - c, 3) << "; ";
  }
  d << "need base gain < smallest merged gain " << fmt(min_gain, 3);
  return {beats && base_gain < min_gain, d.str()};
}

Outcome invariance() {
  Rng rng(2024);
  std::size_t identical = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index d = 32;
    std::vector<Matrix> anchors, rotated;
    const Matrix r = random_orthogonal(static_cast<std::size_t>(d), rng);
    for (int c = 0; c < 5; ++c) {
      anchors.push_back(testing::random_matrix(5, d, rng));
      rotated.push_back(anchors.back() * r);
    }
    const Matrix test = testing::random_matrix(50, d, rng, 1.5);
    identical += knn_predict(test, anchors) == knn_predict(test * r, rotated) ? 1 : 0;
  }

  const Fixture& f = fixture();
  const Matrix q = random_orthogonal(32, rng);
  ModelParams p = f.model.encoder.params();
  const std::size_t last = f.model.encoder.num_layers() - 1;
  ModelParams planted;
  for (const auto& t : p) {
    if (t.name == MlpEncoder::weight_name(last)) planted.add(t.name, Matrix(p.matrix(t.name) * q));
    else if (t.name == MlpEncoder::bias_name(last)) planted.add(t.name, Vector((p.vector(t.name).transpose() * q).transpose()));
    else planted.add(t);
  }
  const MlpEncoder rotated = MlpEncoder::from_params(planted);
  AlignmentConfig cfg;
  cfg.variant = AlignVariant::MappingM;
  cfg.source.kind = DataSource::Kind::Full;
  cfg.source.split = Split::Train;
  const double teacher = current_eval(f.model.encoder, f.model.head, f.ds.split(Split::Test)).value();
  const double before = current_eval(rotated, f.model.head, f.ds.split(Split::Test)).value();
  const ProtocolOutcome after = aligned_m_eval(rotated, f.model, f.ds, cfg);
  const double gap = std::abs(after.accuracy.value() - teacher);
  std::ostringstream d;
  d << "KNN identical predictions in " << identical << "/100 trials; planted rotation: teacher " << fmt(teacher, 4)
    << ", rotated " << fmt(before, 4) << ", after M " << fmt(after.accuracy.value(), 4) << ", final KL "
    << fmt(after.alignment->final_kl, 6) << " (need within 0.01 of teacher)";
  return {identical == 100 && gap <= 0.01, d.str()};
}

RunArtifacts run_pipeline(const fs::path& config, const fs::path& out, std::size_t threads) {
  RunArtifacts run;
  run.dir = out;
  const auto t0 = Clock::now();
  run.exit_code = run_cli({"--config", config.string(), "--out", out.string(), "--threads", std::to_string(threads), "run"});
  run.seconds = seconds_since(t0);
  if (run.exit_code != 0) throw std::runtime_error("mmlab run exited with " + std::to_string(run.exit_code));
  run.report = EvalReport::read_csv(out / "report.csv");
  run.json = nlohmann::json::parse(testing::slurp(out / "report.json"));
  run.seeds = load_experiment_config(config).seeds;
  return run;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config = argc > 1 ? fs::path(argv[1]) : fs::path(MMLAB_DEFAULT_CONFIG);
  testing::TempDir work("acceptance");

  verdict(1, "gradient correctness", gradients);
  verdict(2, "merge identities", merge_identities);
  verdict(3, "checkpoint round trip", checkpoints);

  std::optional<RunArtifacts> run;
  try {
    std::cerr << "running the default pipeline (" << config.string() << ")\n";
    run = run_pipeline(config, work / "run1", 1);
  } catch (const std::exception& e) {
    std::cerr << "pipeline failed: " << e.what() << '\n';
  }
  auto on_run = [&](Outcome (*fn)(const RunArtifacts&)) {
    return [&, fn] { return run ? fn(*run) : Outcome{false, "default pipeline did not complete"}; };
  };
  verdict(4, "misalignment gap", on_run(misalignment_gap));
  verdict(5, "FT-Classifier recovery", on_run(ftc_recovery));
  verdict(6, "KNN superiority", on_run(knn_superiority));
  verdict(7, "orthogonality convergence", on_run(orthogonality));
  verdict(8, "base-vs-merged control", on_run(base_control));
  verdict(9, "invariance suite", invariance);
  verdict(10, "determinism", [&] {
    if (!run) return Outcome{false, "default pipeline did not complete"};
    const std::size_t threads = std::max(2u, std::thread::hardware_concurrency());
    const RunArtifacts again = run_pipeline(config, work / "run2", threads);
    const bool same = testing::slurp(run->dir / "report.csv") == testing::slurp(again.dir / "report.csv") &&
                      testing::slurp(run->dir / "summary.csv") == testing::slurp(again.dir / "summary.csv");
    return Outcome{same, "rerun with " + std::to_string(threads) + " threads: report.csv and summary.csv " +
                             (same ? "byte-identical" : "differ")};
  });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
