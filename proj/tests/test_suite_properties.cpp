#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <thread>

#include "mmlab/experiment.hpp"
#include "support.hpp"

using namespace mmlab;

namespace {

const ExperimentResult& default_run() {
  static const ExperimentResult r = [] {
    ExperimentConfig cfg = load_experiment_config(MMLAB_DEFAULT_CONFIG);
    cfg.threads = std::max(1u, std::thread::hardware_concurrency());
    return run_experiment(cfg, std::nullopt);
  }();
  return r;
}

double seed_mean(const EvalReport& rep, std::string_view model, std::string_view method, std::string_view protocol,
                 std::string_view k) {
  double total = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) total += rep.mean_accuracy(model, method, protocol, s, k);
  return total / 5.0;
}

}  // namespace

TEST_CASE("WA current accuracy is below fine-tuned accuracy on every task and seed") {
  const EvalReport& rep = default_run().report;
  for (const auto& wa : rep.select("merged", "wa", "current")) {
    const auto ft = rep.select("finetuned", "ft", "current");
    const auto it = std::find_if(ft.begin(), ft.end(), [&](const ReportRow& r) { return r.task == wa.task && r.seed == wa.seed; });
    REQUIRE(it != ft.end());
    CHECK_MESSAGE(wa.accuracy < it->accuracy, "seed ", wa.seed, " task ", wa.task);
  }
}

TEST_CASE("aligned mappings never fall below the current protocol") {
  const EvalReport& rep = default_run().report;
  for (const char* m : {"wa", "ta", "ties"}) {
    const double cur = seed_mean(rep, "merged", m, "current", "-");
    CHECK_MESSAGE(seed_mean(rep, "merged", m, "aligned-m", "5") >= cur, m);
    CHECK_MESSAGE(seed_mean(rep, "merged", m, "ft-classifier", "5") > cur, m);
  }
}

TEST_CASE("FT-Classifier accuracy is non-decreasing in k within two points") {
  const EvalReport& rep = default_run().report;
  for (const char* m : {"wa", "ta", "ties"}) {
    double prev = 0.0;
    for (const char* k : {"1", "5", "10", "20"}) {
      const double acc = seed_mean(rep, "merged", m, "ft-classifier", k);
      CHECK_MESSAGE(acc >= prev - 0.02, m, " k=", k);
      prev = acc;
    }
  }
}

TEST_CASE("orthogonal mappings stay near orthogonal and near the free mapping") {
  const ExperimentResult& r = default_run();
  for (const auto& a : r.alignments) {
    if (a.protocol != "orth-m") continue;
    REQUIRE(a.orth_penalty_per_entry.has_value());
    CHECK(*a.orth_penalty_per_entry <= 0.05);
  }
  for (const char* m : {"wa", "ta", "ties"})
    CHECK(std::abs(seed_mean(r.report, "merged", m, "orth-m", "5") - seed_mean(r.report, "merged", m, "aligned-m", "5")) <= 0.03);
}

TEST_CASE("MTL stays within five points of fine-tuning and the pretext is learned") {
  const ExperimentResult& r = default_run();
  CHECK(std::abs(seed_mean(r.report, "mtl", "mtl", "current", "-") - seed_mean(r.report, "finetuned", "ft", "current", "-")) <= 0.05);
  for (const auto& s : r.seeds) CHECK(s.pretext_accuracy > 0.6);
}
