#include "mmlab/experiment.hpp"

#include <fstream>
#include <mutex>
#include <set>
#include <thread>

namespace mmlab {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config parsing

namespace {

// Typed access to one JSON object; every key must be consumed.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  [[nodiscard]] std::string where(std::string_view key = {}) const {
    std::string p = path_.empty() ? "config" : path_;
    if (!key.empty()) p += "." + std::string(key);
    return p;
  }

  [[nodiscard]] bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!j_.contains(key)) return fallback;
    seen_.insert(key);
    return convert<T>(j_.at(key), where(key));
  }

  template <typename T>
  static T convert(const json& v, const std::string& where) {
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && v.get<long long>() < 0 && !v.is_number_unsigned()) {
            throw ConfigError(where + ": expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(where + ": expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(where + ": expected a string");
      }
      return v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(where(key) + ": unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename T>
std::vector<T> get_list(Fields& f, const std::string& key, std::vector<T> fallback) {
  if (!f.has(key)) return fallback;
  const json& arr = f.raw(key);
  if (!arr.is_array()) throw ConfigError(f.where(key) + ": expected an array");
  std::vector<T> out;
  for (std::size_t i = 0; i < arr.size(); ++i)
    out.push_back(Fields::convert<T>(arr[i], f.where(key) + "[" + std::to_string(i) + "]"));
  return out;
}

TrainConfig parse_train(const json& j, const std::string& path, TrainConfig base) {
  Fields f(j, path);
  base.epochs = f.get<std::size_t>("epochs", base.epochs);
  base.batch_size = f.get<std::size_t>("batch_size", base.batch_size);
  base.learning_rate = f.get<double>("learning_rate", base.learning_rate);
  base.weight_decay = f.get<double>("weight_decay", base.weight_decay);
  base.beta1 = f.get<double>("beta1", base.beta1);
  base.beta2 = f.get<double>("beta2", base.beta2);
  base.epsilon = f.get<double>("epsilon", base.epsilon);
  f.finish();
  if (base.batch_size == 0) throw ConfigError(path + ".batch_size: must be positive");
  if (!(base.learning_rate >= 0.0)) throw ConfigError(path + ".learning_rate: must be >= 0");
  return base;
}

ordered_json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},         {"batch_size", t.batch_size}, {"learning_rate", t.learning_rate},
          {"weight_decay", t.weight_decay}, {"beta1", t.beta1},       {"beta2", t.beta2},
          {"epsilon", t.epsilon}};
}

DataSource parse_source(const json& j, const std::string& path, DataSource src) {
  Fields f(j, path);
  const auto kind = f.get<std::string>("kind", "few-shot");
  if (kind == "few-shot") {
    src.kind = DataSource::Kind::FewShot;
  } else if (kind == "fraction") {
    src.kind = DataSource::Kind::Fraction;
  } else if (kind == "full") {
    src.kind = DataSource::Kind::Full;
  } else {
    throw ConfigError(f.where("kind") + ": unknown data source '" + kind + "' (expected few-shot, fraction or full)");
  }
  src.k = f.get<std::size_t>("k", src.k);
  src.fraction = f.get<double>("fraction", src.fraction);
  try {
    src.split = parse_split(f.get<std::string>("split", std::string(to_string(src.split))));
  } catch (const ConfigError& e) {
    throw ConfigError(f.where("split") + ": " + e.what());
  }
  f.finish();
  if (src.kind == DataSource::Kind::FewShot && src.k < 1) throw ConfigError(f.where("k") + ": must be >= 1");
  if (src.kind == DataSource::Kind::Fraction && !(src.fraction > 0.0 && src.fraction <= 1.0)) {
    throw ConfigError(f.where("fraction") + ": must be in (0, 1]");
  }
  return src;
}

std::string source_kind(DataSource::Kind k) {
  switch (k) {
    case DataSource::Kind::FewShot: return "few-shot";
    case DataSource::Kind::Fraction: return "fraction";
    case DataSource::Kind::Full: return "full";
  }
  return "?";
}

}  // namespace

ExperimentConfig default_experiment_config() {
  ExperimentConfig cfg;
  for (int id = 0; id < 3; ++id) {
    TaskSpec t;
    t.task_id = id;
    t.num_classes = 3 + id;
    t.samples_per_class = 300;
    t.input_dim = 16;
    t.spread = 2.0;
    cfg.tasks.push_back(t);
  }
  // Calibrated so the default suite lands fine-tuned accuracy in 85-99%
  // and the pretrained base keeps little beyond the parity feature.
  cfg.pretrain.epochs = 20;
  cfg.pretrain.weight_decay = 10.0;
  cfg.finetune.epochs = 30;
  cfg.finetune.learning_rate = 5e-3;
  cfg.mtl.epochs = 30;
  cfg.merges = {{{MergeMethod::WeightAveraging, 1.0, 0.2, false}, false},
                {{MergeMethod::TaskArithmetic, 1.0, 0.2, false}, true},
                {{MergeMethod::Ties, 1.0, 0.2, false}, true}};
  cfg.k_sweep = {1, 5, 10, 20};
  return cfg;
}

ExperimentConfig parse_experiment_config(const json& j) {
  ExperimentConfig cfg = default_experiment_config();
  Fields root(j, "");

  cfg.seeds = get_list<std::uint64_t>(root, "seeds", cfg.seeds);
  if (cfg.seeds.empty()) throw ConfigError("config.seeds: must list at least one seed");
  cfg.threads = root.get<std::size_t>("threads", cfg.threads);

  if (root.has("suite")) {
    Fields suite(root.raw("suite"), "suite");
    const auto spc = suite.get<std::size_t>("samples_per_class", 300);
    const auto dim = suite.get<std::size_t>("input_dim", 16);
    const auto spread = suite.get<double>("spread", 2.0);
    if (suite.has("tasks")) {
      const json& tasks = suite.raw("tasks");
      if (!tasks.is_array() || tasks.empty()) throw ConfigError("suite.tasks: expected a non-empty array");
      cfg.tasks.clear();
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        Fields t(tasks[i], "suite.tasks[" + std::to_string(i) + "]");
        TaskSpec spec;
        spec.task_id = t.get<int>("id", static_cast<int>(i));
        spec.num_classes = t.get<int>("classes", 4);
        spec.samples_per_class = t.get<std::size_t>("samples_per_class", spc);
        spec.input_dim = dim;
        spec.spread = t.get<double>("spread", spread);
        t.finish();
        if (spec.num_classes < 2) throw ConfigError(t.where("classes") + ": must be >= 2");
        if (spec.samples_per_class < 10) throw ConfigError(t.where("samples_per_class") + ": must be >= 10");
        for (const auto& other : cfg.tasks)
          if (other.task_id == spec.task_id) throw ConfigError(t.where("id") + ": duplicate task id");
        cfg.tasks.push_back(spec);
      }
    } else {
      for (auto& t : cfg.tasks) {
        t.samples_per_class = spc;
        t.input_dim = dim;
        t.spread = spread;
      }
    }
    suite.finish();
  }

  cfg.arch.input_dim = cfg.tasks.front().input_dim;
  if (root.has("architecture")) {
    Fields a(root.raw("architecture"), "architecture");
    cfg.arch.hidden_dims = get_list<std::size_t>(a, "hidden", cfg.arch.hidden_dims);
    cfg.arch.embed_dim = a.get<std::size_t>("embed_dim", cfg.arch.embed_dim);
    cfg.head_bias = a.get<bool>("head_bias", cfg.head_bias);
    a.finish();
    if (cfg.arch.embed_dim < 1) throw ConfigError("architecture.embed_dim: must be >= 1");
  }

  if (root.has("base")) {
    const auto mode = Fields::convert<std::string>(root.raw("base"), "config.base");
    if (mode == "pretrained") {
      cfg.base = BaseMode::Pretrained;
    } else if (mode == "random") {
      cfg.base = BaseMode::Random;
    } else {
      throw ConfigError("config.base: unknown base mode '" + mode + "' (expected pretrained or random)");
    }
  }
  if (root.has("pretrain")) cfg.pretrain = parse_train(root.raw("pretrain"), "pretrain", cfg.pretrain);
  if (root.has("finetune")) cfg.finetune = parse_train(root.raw("finetune"), "finetune", cfg.finetune);
  if (root.has("mtl")) cfg.mtl = parse_train(root.raw("mtl"), "mtl", cfg.mtl);

  if (root.has("merges")) {
    const json& merges = root.raw("merges");
    if (!merges.is_array()) throw ConfigError("config.merges: expected an array");
    cfg.merges.clear();
    for (std::size_t i = 0; i < merges.size(); ++i) {
      const std::string path = "merges[" + std::to_string(i) + "]";
      Fields m(merges[i], path);
      MergeEntry e;
      try {
        e.spec.method = parse_merge_method(m.get<std::string>("method", "wa"));
      } catch (const ConfigError& err) {
        throw ConfigError(m.where("method") + ": " + err.what());
      }
      if (m.has("lambda")) {
        const json& l = m.raw("lambda");
        if (l.is_string() && l.get<std::string>() == "auto") {
          e.auto_lambda = true;
        } else {
          e.spec.lambda = Fields::convert<double>(l, m.where("lambda"));
        }
      } else {
        e.auto_lambda = e.spec.method != MergeMethod::WeightAveraging;
      }
      e.spec.keep_fraction = m.get<double>("keep_fraction", e.spec.keep_fraction);
      e.spec.lambda_warn_only = m.get<bool>("lambda_warn_only", false);
      m.finish();
      try {
        if (!e.auto_lambda) e.spec.validate();
      } catch (const ConfigError& err) {
        throw ConfigError(path + ": " + err.what());
      }
      cfg.merges.push_back(e);
    }
  }
  cfg.lambda_grid = get_list<double>(root, "lambda_grid", cfg.lambda_grid);
  if (cfg.lambda_grid.empty()) throw ConfigError("config.lambda_grid: must not be empty");

  if (root.has("protocols")) {
    const json& ps = root.raw("protocols");
    if (!ps.is_array()) throw ConfigError("config.protocols: expected an array");
    cfg.protocols.clear();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::string where = "protocols[" + std::to_string(i) + "]";
      const auto name = Fields::convert<std::string>(ps[i], where);
      try {
        cfg.protocols.push_back(parse_protocol(name));
      } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
      }
    }
  }

  if (root.has("knn")) {
    Fields k(root.raw("knn"), "knn");
    cfg.settings.knn_k = k.get<std::size_t>("k", cfg.settings.knn_k);
    try {
      cfg.settings.knn_split = parse_split(k.get<std::string>("split", "train"));
    } catch (const ConfigError& e) {
      throw ConfigError(k.where("split") + ": " + e.what());
    }
    k.finish();
    if (cfg.settings.knn_k < 1) throw ConfigError("knn.k: must be >= 1");
  }

  if (root.has("alignment")) {
    Fields a(root.raw("alignment"), "alignment");
    cfg.settings.align.epochs = a.get<std::size_t>("epochs", cfg.settings.align.epochs);
    cfg.settings.align.learning_rate = a.get<double>("learning_rate", cfg.settings.align.learning_rate);
    cfg.settings.orth_alpha = a.get<double>("alpha", cfg.settings.orth_alpha);
    if (a.has("source")) cfg.settings.align.source = parse_source(a.raw("source"), "alignment.source", cfg.settings.align.source);
    a.finish();
    if (!(cfg.settings.orth_alpha >= 0.0)) throw ConfigError("alignment.alpha: must be >= 0");
  }

  cfg.k_sweep = get_list<std::size_t>(root, "k_sweep", cfg.k_sweep);
  for (std::size_t i = 0; i < cfg.k_sweep.size(); ++i)
    if (cfg.k_sweep[i] < 1) throw ConfigError("config.k_sweep[" + std::to_string(i) + "]: must be >= 1");

  if (root.has("include")) {
    Fields inc(root.raw("include"), "include");
    cfg.include_finetuned = inc.get<bool>("finetuned", cfg.include_finetuned);
    cfg.include_mtl = inc.get<bool>("mtl", cfg.include_mtl);
    cfg.include_base = inc.get<bool>("base", cfg.include_base);
    inc.finish();
  }
  root.finish();

  for (const auto& t : cfg.tasks)
    if (t.input_dim != cfg.arch.input_dim) throw ConfigError("suite: tasks disagree on input_dim");
  for (auto* tc : {&cfg.pretrain, &cfg.finetune, &cfg.mtl}) tc->head_bias = cfg.head_bias;
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  try {
    return parse_experiment_config(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

ordered_json ExperimentConfig::to_json() const {
  ordered_json j;
  j["seeds"] = seeds;
  auto& tasks_j = j["suite"]["tasks"] = ordered_json::array();
  for (const auto& t : tasks) {
    tasks_j.push_back({{"id", t.task_id},
                       {"classes", t.num_classes},
                       {"samples_per_class", t.samples_per_class},
                       {"spread", t.spread}});
  }
  j["suite"]["input_dim"] = arch.input_dim;
  j["architecture"] = {{"hidden", arch.hidden_dims}, {"embed_dim", arch.embed_dim}, {"head_bias", head_bias}};
  j["base"] = base == BaseMode::Pretrained ? "pretrained" : "random";
  j["pretrain"] = train_json(pretrain);
  j["finetune"] = train_json(finetune);
  j["mtl"] = train_json(mtl);
  auto& merges_j = j["merges"] = ordered_json::array();
  for (const auto& m : merges) {
    ordered_json e{{"method", std::string(to_string(m.spec.method))}};
    if (m.auto_lambda) {
      e["lambda"] = "auto";
    } else {
      e["lambda"] = m.spec.lambda;
    }
    e["keep_fraction"] = m.spec.keep_fraction;
    merges_j.push_back(e);
  }
  j["lambda_grid"] = lambda_grid;
  auto& ps = j["protocols"] = ordered_json::array();
  for (auto p : protocols) ps.push_back(std::string(to_string(p)));
  j["knn"] = {{"k", settings.knn_k}, {"split", std::string(to_string(settings.knn_split))}};
  j["alignment"] = {{"epochs", settings.align.epochs},
                    {"learning_rate", settings.align.learning_rate},
                    {"alpha", settings.orth_alpha},
                    {"source",
                     {{"kind", source_kind(settings.align.source.kind)},
                      {"k", settings.align.source.k},
                      {"fraction", settings.align.source.fraction},
                      {"split", std::string(to_string(settings.align.source.split))}}}};
  j["k_sweep"] = k_sweep;
  j["include"] = {{"finetuned", include_finetuned}, {"mtl", include_mtl}, {"base", include_base}};
  return j;
}

std::string ExperimentConfig::digest() const { return hex64(fnv1a64(to_json().dump())); }

// ---------------------------------------------------------------------------
// Pipeline

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      std::size_t i = 0;
      {
        std::lock_guard lock(mu);
        if (next >= n || failure) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

namespace {

TrainConfig seeded(TrainConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  return cfg;
}

TaskParamSet encoder_set(const std::vector<TaskModel>& models) {
  TaskParamSet set;
  for (const auto& m : models) set.emplace(m.task_id, m.encoder.params());
  return set;
}

}  // namespace

SeedArtifacts train_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedArtifacts art;
  art.seed = seed;
  for (const auto& spec : cfg.tasks) art.datasets.push_back(gen_task(spec, derive_seed(seed, "data:" + std::to_string(spec.task_id))));

  TrainConfig pre = seeded(cfg.pretrain, derive_seed(seed, "pretrain"));
  if (cfg.base == BaseMode::Random) pre.epochs = 0;
  const PretrainResult pr = pretrain(art.datasets, cfg.arch, pre);
  art.base = pr.encoder;
  art.pretext_accuracy = pr.heldout_accuracy;

  for (const auto& ds : art.datasets) {
    TrainLog log;
    art.finetuned.push_back(finetune(art.base, ds, seeded(cfg.finetune, derive_seed(seed, "task:" + std::to_string(ds.task_id))), &log));
    art.finetune_logs.push_back(std::move(log));
  }
  if (cfg.include_mtl) art.mtl = train_mtl(art.base, art.datasets, seeded(cfg.mtl, derive_seed(seed, "mtl")));

  const TaskParamSet set = encoder_set(art.finetuned);
  std::map<int, ClassifierHead> heads;
  for (const auto& m : art.finetuned) heads.emplace(m.task_id, m.head);
  for (const auto& entry : cfg.merges) {
    MergeEntry resolved = entry;
    if (entry.auto_lambda) {
      resolved.spec.lambda = select_lambda(art.base, set, heads, art.datasets, entry.spec, cfg.lambda_grid).best;
      resolved.auto_lambda = false;
    }
    art.merged.emplace_back(resolved, merge(art.base, set, resolved.spec));
  }
  return art;
}

std::string protocol_seed_name(int task, Protocol protocol, std::optional<std::size_t> sweep_k) {
  std::string name = "align:" + std::to_string(task) + ":" + std::string(to_string(protocol));
  if (sweep_k) name += ":k" + std::to_string(*sweep_k);
  return name;
}

void evaluate_seed(const ExperimentConfig& cfg, const SeedArtifacts& art, EvalReport& report,
                   std::vector<AlignmentDiagnostic>& diagnostics) {
  struct Candidate {
    std::string model, method;
    std::function<const MlpEncoder&(std::size_t)> encoder;
    std::function<TaskModel(std::size_t)> teacher;
    bool sweep;
  };
  std::vector<Candidate> candidates;
  if (cfg.include_finetuned) {
    candidates.push_back({"finetuned", "ft", [&](std::size_t t) -> const MlpEncoder& { return art.finetuned[t].encoder; },
                          [&](std::size_t t) { return art.finetuned[t]; }, false});
  }
  if (cfg.include_mtl && art.mtl) {
    candidates.push_back({"mtl", "mtl", [&](std::size_t) -> const MlpEncoder& { return art.mtl->encoder; },
                          [&](std::size_t t) { return art.mtl->task_model(t); }, false});
  }
  const MlpEncoder base = MlpEncoder::from_params(art.base);
  if (cfg.include_base) {
    candidates.push_back({"base", "base", [&](std::size_t) -> const MlpEncoder& { return base; },
                          [&](std::size_t t) { return art.finetuned[t]; }, true});
  }
  std::vector<MlpEncoder> merged;
  merged.reserve(art.merged.size());
  for (const auto& [entry, params] : art.merged) merged.push_back(MlpEncoder::from_params(params));
  for (std::size_t m = 0; m < art.merged.size(); ++m) {
    candidates.push_back({"merged", std::string(to_string(art.merged[m].first.spec.method)),
                          [&merged, m](std::size_t) -> const MlpEncoder& { return merged[m]; },
                          [&](std::size_t t) { return art.finetuned[t]; }, true});
  }

  auto run = [&](const Candidate& c, std::size_t t, Protocol p, const ProtocolSettings& settings,
                 const std::string& seed_name) {
    const TaskDataset& ds = art.datasets[t];
    const TaskModel teacher = c.teacher(t);
    const ProtocolOutcome out =
        evaluate_protocol(p, c.encoder(t), teacher, ds, settings, derive_seed(art.seed, seed_name));
    ReportRow row{c.model, c.method, std::string(to_string(p)), ds.task_id, protocol_tag(p, settings), art.seed,
                  out.accuracy.value(), out.accuracy.correct, out.accuracy.total};
    if (out.alignment) {
      const auto& a = *out.alignment;
      AlignmentDiagnostic d{art.seed, c.model, c.method, row.protocol, row.k_or_fraction, ds.task_id,
                            a.loss_history.front(), a.loss_history.back(), a.final_kl, std::nullopt};
      if (a.mapping) d.orth_penalty_per_entry = orth_penalty(*a.mapping) / static_cast<double>(a.mapping->size());
      diagnostics.push_back(std::move(d));
    }
    report.add(std::move(row));
  };

  for (const auto& c : candidates) {
    for (std::size_t t = 0; t < art.datasets.size(); ++t) {
      const int task = art.datasets[t].task_id;
      for (Protocol p : cfg.protocols) run(c, t, p, cfg.settings, protocol_seed_name(task, p));
      if (!c.sweep) continue;
      for (std::size_t k : cfg.k_sweep) {
        for (Protocol p : cfg.protocols) {
          ProtocolSettings s = cfg.settings;
          if (p == Protocol::Knn) {
            if (k == s.knn_k) continue;
            s.knn_k = k;
          } else if (p == Protocol::FtClassifier) {
            if (s.align.source.kind != DataSource::Kind::FewShot || k == s.align.source.k) continue;
            s.align.source.k = k;
          } else {
            continue;
          }
          run(c, t, p, s, protocol_seed_name(task, p, k));
        }
      }
    }
  }
}

nlohmann::ordered_json ExperimentResult::diagnostics_json() const {
  ordered_json j;
  auto& seeds_j = j["seeds"] = ordered_json::array();
  for (const auto& s : seeds) {
    ordered_json lambdas = ordered_json::object();
    for (const auto& [k, v] : s.lambdas) lambdas[k] = v;
    seeds_j.push_back({{"seed", s.seed}, {"pretext_accuracy", s.pretext_accuracy}, {"lambdas", lambdas}});
  }
  auto& al = j["alignments"] = ordered_json::array();
  for (const auto& a : alignments) {
    ordered_json e{{"seed", a.seed},       {"model", a.model},
                   {"method", a.method},   {"protocol", a.protocol},
                   {"task", a.task},       {"k_or_fraction", a.k_or_fraction},
                   {"initial_loss", a.initial_loss}, {"final_loss", a.final_loss},
                   {"final_kl", a.final_kl}};
    if (a.orth_penalty_per_entry) e["orth_penalty_per_entry"] = *a.orth_penalty_per_entry;
    al.push_back(e);
  }
  return j;
}

void save_artifact(const ModelParams& params, const fs::path& path, const std::string& digest,
                   const ordered_json& meta) {
  save_checkpoint(params, path);
  ordered_json j{{"config_digest", digest}, {"params_digest", params_digest(params)}};
  if (meta.is_object())
    for (const auto& [k, v] : meta.items()) j[k] = v;
  std::ofstream out(fs::path(path.string() + ".meta.json"), std::ios::trunc);
  if (!out) throw IoError("cannot write metadata for '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

std::string artifact_digest(const fs::path& path) {
  const fs::path meta(path.string() + ".meta.json");
  if (!fs::exists(meta)) return {};
  std::ifstream in(meta);
  try {
    const json j = json::parse(in);
    return j.value("config_digest", std::string{});
  } catch (const json::exception& e) {
    throw IoError(meta.string() + ": " + e.what());
  }
}

void write_embeddings_csv(const MlpEncoder& encoder, const TaskDataset& ds, Split split, const fs::path& path,
                          const std::string& digest) {
  const auto idx = ds.indices(split);
  const LabeledBatch batch = ds.subset(idx);
  const Matrix emb = encode(encoder, batch.x);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  if (!digest.empty()) out << "# config_digest=" << digest << '\n';
  out << "task,split,label";
  for (Eigen::Index j = 0; j < emb.cols(); ++j) out << ",e" << j;
  out << '\n';
  for (Eigen::Index r = 0; r < emb.rows(); ++r) {
    out << ds.task_id << ',' << to_string(split) << ',' << batch.y[static_cast<std::size_t>(r)];
    for (Eigen::Index j = 0; j < emb.cols(); ++j) out << ',' << format_double(emb(r, j));
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

namespace {

void write_seed_artifacts(const ExperimentConfig& cfg, const SeedArtifacts& art, const fs::path& dir,
                          const std::string& digest) {
  fs::create_directories(dir / "data");
  for (const auto& ds : art.datasets) {
    const std::string stem = "task_" + std::to_string(ds.task_id);
    write_dataset_csv(ds, dir / "data" / (stem + ".csv"), digest);
    write_splits_csv(ds, dir / "data" / (stem + ".splits.csv"), digest);
  }
  save_artifact(art.base, dir / "base.mmlb", digest, {{"kind", "base"}});
  for (std::size_t t = 0; t < art.finetuned.size(); ++t) {
    const auto& m = art.finetuned[t];
    const std::string stem = "finetuned_task_" + std::to_string(m.task_id);
    save_artifact(to_params(m), dir / (stem + ".mmlb"), digest, {{"kind", "finetuned"}, {"task", m.task_id}});
    write_train_log_csv(art.finetune_logs[t], dir / (stem + ".log.csv"), digest);
  }
  if (art.mtl) {
    ModelParams p = art.mtl->encoder.params();
    for (std::size_t t = 0; t < art.mtl->heads.size(); ++t) {
      const std::string prefix = "head." + std::to_string(art.mtl->task_ids[t]) + ".";
      p.add(prefix + "weight", art.mtl->heads[t].weight);
      if (art.mtl->heads[t].use_bias) p.add(prefix + "bias", art.mtl->heads[t].bias);
    }
    save_artifact(p, dir / "mtl.mmlb", digest, {{"kind", "mtl"}});
  }
  for (const auto& [entry, params] : art.merged) {
    const std::string name = "merged_" + std::string(to_string(entry.spec.method)) + ".mmlb";
    ordered_json inputs = ordered_json::array();
    for (const auto& m : art.finetuned) inputs.push_back({{"task", m.task_id}, {"params_digest", params_digest(m.encoder.params())}});
    save_artifact(params, dir / name, digest,
                  {{"kind", "merged"},
                   {"method", std::string(to_string(entry.spec.method))},
                   {"lambda", entry.spec.lambda},
                   {"keep_fraction", entry.spec.keep_fraction},
                   {"base_digest", params_digest(art.base)},
                   {"inputs", inputs}});
  }
  (void)cfg;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::optional<fs::path>& out_dir,
                                const ProgressFn& progress) {
  const std::string digest = cfg.digest();
  std::mutex log_mu;
  auto say = [&](const std::string& msg) {
    if (!progress) return;
    std::lock_guard lock(log_mu);
    progress(msg);
  };

  const std::size_t n = cfg.seeds.size();
  std::vector<EvalReport> partial(n, EvalReport(digest));
  std::vector<std::vector<AlignmentDiagnostic>> diags(n);
  std::vector<SeedSummary> summaries(n);

  parallel_for(n, cfg.threads, [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i];
    std::string stage = "train";
    try {
      say("seed " + std::to_string(seed) + ": training");
      const SeedArtifacts art = train_seed(cfg, seed);
      summaries[i].seed = seed;
      summaries[i].pretext_accuracy = art.pretext_accuracy;
      for (const auto& [entry, params] : art.merged) summaries[i].lambdas[std::string(to_string(entry.spec.method))] = entry.spec.lambda;
      if (out_dir) {
        stage = "write artifacts";
        write_seed_artifacts(cfg, art, *out_dir / ("seed_" + std::to_string(seed)), digest);
      }
      stage = "evaluate";
      say("seed " + std::to_string(seed) + ": evaluating");
      evaluate_seed(cfg, art, partial[i], diags[i]);
    } catch (const Error& e) {
      const std::string msg = "seed " + std::to_string(seed) + ", stage '" + stage + "': " + e.what();
      if (dynamic_cast<const ConfigError*>(&e)) throw ConfigError(msg);
      if (dynamic_cast<const NumericError*>(&e)) throw NumericError(msg);
      if (dynamic_cast<const IoError*>(&e)) throw IoError(msg);
      throw DataError(msg);
    }
  });

  ExperimentResult result;
  result.report = EvalReport(digest);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& row : partial[i].rows()) result.report.add(row);
    result.alignments.insert(result.alignments.end(), diags[i].begin(), diags[i].end());
  }
  result.report.finalize();
  result.seeds = std::move(summaries);

  if (out_dir) {
    fs::create_directories(*out_dir);
    {
      std::ofstream cfg_out(*out_dir / "config.resolved.json", std::ios::trunc);
      cfg_out << cfg.to_json().dump(2) << '\n';
    }
    result.report.write_csv(*out_dir / "report.csv");
    result.report.write_summary_csv(*out_dir / "summary.csv");
    result.report.write_json(*out_dir / "report.json", result.diagnostics_json());
  }
  return result;
}

}  // namespace mmlab
