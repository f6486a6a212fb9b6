#include "mmlab/cli.hpp"

#include <fstream>
#include <iostream>
#include <regex>

#include <CLI11.hpp>

namespace mmlab {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string task_stem(int id) { return "task_" + std::to_string(id); }

ModelParams encoder_part(const ModelParams& p) {
  ModelParams enc = p.filtered(kEncoderPrefix);
  if (enc.size() == 0) throw StructureError("checkpoint has no '" + std::string(kEncoderPrefix) + "*' layers");
  return enc;
}

ModelParams load_required(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing artifact '" + path.string() + "'");
  return load_checkpoint(path);
}

int read_task_meta(const fs::path& ckpt) {
  const fs::path meta(ckpt.string() + ".meta.json");
  if (fs::exists(meta)) {
    std::ifstream in(meta);
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (!j.is_discarded() && j.contains("task") && j["task"].is_number_integer()) return j["task"].get<int>();
  }
  throw ConfigError("cannot tell the task of '" + ckpt.string() + "'; pass --task");
}

// Every stamped artifact must carry the same digest; returns it ("" if none).
std::string common_digest(const std::vector<std::pair<fs::path, std::string>>& stamped) {
  std::string seen;
  fs::path first;
  for (const auto& [path, digest] : stamped) {
    if (digest.empty()) continue;
    if (seen.empty()) {
      seen = digest;
      first = path;
    } else if (digest != seen) {
      throw DataError("artifacts from different configs: '" + first.string() + "' has digest " + seen + ", '" +
                      path.string() + "' has " + digest);
    }
  }
  return seen;
}

void write_json_file(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
}

}  // namespace

std::vector<TaskDataset> load_task_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("missing data directory '" + dir.string() + "'");
  static const std::regex pattern(R"(task_(\d+)\.csv)");
  std::vector<std::pair<int, fs::path>> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) found.emplace_back(std::stoi(m[1]), entry.path());
  }
  if (found.empty()) throw IoError("no task_<id>.csv files in '" + dir.string() + "'");
  std::sort(found.begin(), found.end());
  std::vector<TaskDataset> out;
  for (const auto& [id, path] : found) {
    const fs::path splits = dir / (task_stem(id) + ".splits.csv");
    out.push_back(read_dataset_csv(path, id, fs::exists(splits) ? std::optional(splits) : std::nullopt));
  }
  return out;
}

void save_task_dir(std::span<const TaskDataset> tasks, const fs::path& dir, const std::string& digest) {
  fs::create_directories(dir);
  for (const auto& ds : tasks) {
    write_dataset_csv(ds, dir / (task_stem(ds.task_id) + ".csv"), digest);
    write_splits_csv(ds, dir / (task_stem(ds.task_id) + ".splits.csv"), digest);
  }
}

ModelParams cmd_merge(const MergeRequest& req) {
  if (req.inputs.empty()) throw ConfigError("merge: no input checkpoints");
  req.spec.validate();
  TaskParamSet set;
  ordered_json inputs = ordered_json::array();
  for (std::size_t i = 0; i < req.inputs.size(); ++i) {
    set.emplace(static_cast<int>(i), encoder_part(load_required(req.inputs[i])));
    inputs.push_back({{"path", req.inputs[i].string()}, {"file_digest", file_digest(req.inputs[i])}});
  }
  ModelParams base;
  ordered_json manifest;
  if (req.base) {
    base = encoder_part(load_required(*req.base));
    manifest["base"] = {{"path", req.base->string()}, {"file_digest", file_digest(*req.base)}};
  } else if (req.spec.method != MergeMethod::WeightAveraging) {
    throw ConfigError("merge: method '" + std::string(to_string(req.spec.method)) + "' needs --base");
  } else {
    base = set.begin()->second.zeros_like();
  }
  const ModelParams merged = merge(base, set, req.spec);

  if (req.output.has_parent_path()) fs::create_directories(req.output.parent_path());
  save_artifact(merged, req.output, req.digest, {{"kind", "merged"}, {"method", std::string(to_string(req.spec.method))}});
  manifest["config_digest"] = req.digest;
  manifest["method"] = std::string(to_string(req.spec.method));
  manifest["lambda"] = req.spec.lambda;
  manifest["keep_fraction"] = req.spec.keep_fraction;
  manifest["inputs"] = inputs;
  manifest["output"] = {{"path", req.output.string()},
                        {"file_digest", file_digest(req.output)},
                        {"params_digest", params_digest(merged)}};
  write_json_file(fs::path(req.output.string() + ".manifest.json"), manifest);
  return merged;
}

std::vector<ReportRow> cmd_eval(const EvalRequest& req) {
  if (req.finetuned.empty()) throw ConfigError("eval: no fine-tuned checkpoints");
  if (!req.tasks.empty() && req.tasks.size() != req.finetuned.size()) {
    throw ConfigError("eval: --task must be given once per fine-tuned checkpoint");
  }
  std::vector<std::pair<fs::path, std::string>> stamped;
  const MlpEncoder encoder = MlpEncoder::from_params(encoder_part(load_required(req.model)));
  stamped.emplace_back(req.model, artifact_digest(req.model));

  const auto datasets = load_task_dir(req.data_dir);
  for (const auto& ds : datasets) {
    const fs::path p = req.data_dir / (task_stem(ds.task_id) + ".csv");
    stamped.emplace_back(p, read_csv_digest(p));
  }

  ProtocolSettings settings = req.settings;
  std::optional<std::size_t> sweep_k;
  if (req.k) {
    if (req.protocol == Protocol::Knn && *req.k != settings.knn_k) {
      sweep_k = req.k;
      settings.knn_k = *req.k;
    } else if (req.protocol == Protocol::FtClassifier && settings.align.source.kind == DataSource::Kind::FewShot &&
               *req.k != settings.align.source.k) {
      sweep_k = req.k;
      settings.align.source.k = *req.k;
    } else if (req.protocol != Protocol::Knn) {
      settings.align.source.k = *req.k;
    }
  }

  std::vector<ReportRow> rows;
  for (std::size_t i = 0; i < req.finetuned.size(); ++i) {
    const int task = req.tasks.empty() ? read_task_meta(req.finetuned[i]) : req.tasks[i];
    const TaskModel teacher = task_model_from_params(load_required(req.finetuned[i]), task);
    stamped.emplace_back(req.finetuned[i], artifact_digest(req.finetuned[i]));
    const auto it = std::find_if(datasets.begin(), datasets.end(), [&](const TaskDataset& d) { return d.task_id == task; });
    if (it == datasets.end()) throw IoError("no dataset for task " + std::to_string(task) + " in '" + req.data_dir.string() + "'");
    const ProtocolOutcome out = evaluate_protocol(req.protocol, encoder, teacher, *it, settings,
                                                  derive_seed(req.seed, protocol_seed_name(task, req.protocol, sweep_k)));
    rows.push_back({req.model_label, req.method_label, std::string(to_string(req.protocol)), task,
                    protocol_tag(req.protocol, settings), req.seed, out.accuracy.value(), out.accuracy.correct,
                    out.accuracy.total});
  }
  const std::string digest = common_digest(stamped);
  if (req.report) {
    EvalReport report(digest);
    for (const auto& r : rows) report.add(r);
    if (req.report->has_parent_path()) fs::create_directories(req.report->parent_path());
    report.append_csv(*req.report);
  }
  return rows;
}

void cmd_dump_embeddings(const fs::path& model, const fs::path& dataset, int task_id, Split split,
                         const fs::path& output) {
  const MlpEncoder encoder = MlpEncoder::from_params(encoder_part(load_required(model)));
  if (!fs::exists(dataset)) throw IoError("missing dataset '" + dataset.string() + "'");
  fs::path splits = dataset;
  splits.replace_extension(".splits.csv");
  const TaskDataset ds = read_dataset_csv(dataset, task_id, fs::exists(splits) ? std::optional(splits) : std::nullopt);
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  write_embeddings_csv(encoder, ds, split, output, artifact_digest(model));
}

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out = "out";
  std::string config;
  std::size_t threads = 1;
  bool no_bias = false;
};

ExperimentConfig resolve_config(const Globals& g, bool single_seed) {
  ExperimentConfig cfg = g.config.empty() ? default_experiment_config() : load_experiment_config(g.config);
  if (g.no_bias) {
    cfg.head_bias = false;
    for (auto* tc : {&cfg.pretrain, &cfg.finetune, &cfg.mtl}) tc->head_bias = false;
  }
  if (single_seed || g.seed_given) cfg.seeds = {g.seed};
  cfg.threads = g.threads;
  return cfg;
}

int exit_code_of(const Error& e) { return static_cast<int>(e.exit_code()); }

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Model-merging evaluation lab", "mmlab"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Root seed")->each([&](const std::string&) { g.seed_given = true; });
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--config", g.config, "JSON experiment config");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--no-bias", g.no_bias, "Train heads without a bias term");

  std::string data_dir, base_path, model_path, report_path, dataset_path, output_path, protocol_name = "current",
                                                                                        method_name = "wa",
                                                                                        split_name = "test",
                                                                                        model_label = "merged",
                                                                                        method_label;
  std::vector<std::string> inputs;
  std::vector<int> tasks;
  double lambda = 1.0, keep = 0.2;
  std::size_t k = 0;
  int task_id = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic task suite");

  auto* pre = app.add_subcommand("pretrain", "Pretext-pretrain the base encoder");
  pre->add_option("--data", data_dir, "Directory of task_<id>.csv files")->required();

  auto* ft = app.add_subcommand("finetune", "Fine-tune one model per task from the base");
  ft->add_option("--base", base_path, "Base checkpoint")->required();
  ft->add_option("--data", data_dir, "Directory of task_<id>.csv files")->required();
  ft->add_option("--task", tasks, "Only these task ids");

  auto* mtl = app.add_subcommand("mtl", "Train the multi-task baseline");
  mtl->add_option("--base", base_path, "Base checkpoint")->required();
  mtl->add_option("--data", data_dir, "Directory of task_<id>.csv files")->required();

  auto* mg = app.add_subcommand("merge", "Merge fine-tuned checkpoints");
  mg->add_option("checkpoints", inputs, "Fine-tuned checkpoints")->required();
  mg->add_option("--method", method_name, "wa | ta | ties");
  mg->add_option("--lambda", lambda, "Scaling coefficient");
  mg->add_option("--keep", keep, "Ties keep fraction");
  mg->add_option("--base", base_path, "Base checkpoint (ta, ties)");
  mg->add_option("--output", output_path, "Merged checkpoint path");

  auto* ev = app.add_subcommand("eval", "Evaluate an encoder under one protocol");
  ev->add_option("--model", model_path, "Encoder checkpoint")->required();
  ev->add_option("--finetuned", inputs, "Fine-tuned checkpoints (teachers)")->required();
  ev->add_option("--task", tasks, "Task id per fine-tuned checkpoint");
  ev->add_option("--data", data_dir, "Directory of task_<id>.csv files")->required();
  ev->add_option("--protocol", protocol_name, "current | knn | ft-classifier | aligned-m | orth-m");
  auto* k_opt = ev->add_option("--k", k, "Anchors per class (knn) or few-shot size (alignment)");
  ev->add_option("--report", report_path, "Report CSV to append to");
  ev->add_option("--name", model_label, "Model label in the report");
  ev->add_option("--method", method_label, "Method label in the report");

  auto* dump = app.add_subcommand("dump-embeddings", "Write embeddings of one split");
  dump->add_option("--model", model_path, "Encoder checkpoint")->required();
  dump->add_option("--dataset", dataset_path, "Dataset CSV")->required();
  dump->add_option("--task", task_id, "Task id");
  dump->add_option("--split", split_name, "train | val | test");
  dump->add_option("--output", output_path, "Output CSV")->required();

  auto* run = app.add_subcommand("run", "Run the full pipeline from a config");

  std::vector<const char*> argv;
  argv.push_back("mmlab");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::Config);
  }

  try {
    const fs::path out(g.out);
    if (*run) {
      const ExperimentConfig cfg = resolve_config(g, false);
      const auto result = run_experiment(cfg, out, [](const std::string& msg) { std::cerr << msg << '\n'; });
      std::cerr << "wrote " << (out / "report.csv").string() << " (" << result.report.rows().size() << " rows)\n";
      return 0;
    }
    const ExperimentConfig cfg = resolve_config(g, true);
    const std::string digest = cfg.digest();
    const std::uint64_t seed = cfg.seeds.front();

    if (*gen) {
      std::vector<TaskDataset> ds;
      for (const auto& spec : cfg.tasks) ds.push_back(gen_task(spec, derive_seed(seed, "data:" + std::to_string(spec.task_id))));
      save_task_dir(ds, out, digest);
    } else if (*pre) {
      const auto ds = load_task_dir(data_dir);
      TrainConfig tc = cfg.pretrain;
      tc.seed = derive_seed(seed, "pretrain");
      if (cfg.base == BaseMode::Random) tc.epochs = 0;
      TrainLog log;
      const PretrainResult r = pretrain(ds, cfg.arch, tc, &log);
      fs::create_directories(out);
      save_artifact(r.encoder, out / "base.mmlb", digest, {{"kind", "base"}, {"pretext_accuracy", r.heldout_accuracy}});
      write_train_log_csv(log, out / "base.log.csv", digest);
    } else if (*ft) {
      const auto ds = load_task_dir(data_dir);
      const ModelParams base = encoder_part(load_required(base_path));
      fs::create_directories(out);
      for (const auto& d : ds) {
        if (!tasks.empty() && std::find(tasks.begin(), tasks.end(), d.task_id) == tasks.end()) continue;
        TrainConfig tc = cfg.finetune;
        tc.seed = derive_seed(seed, "task:" + std::to_string(d.task_id));
        TrainLog log;
        const TaskModel m = finetune(base, d, tc, &log);
        const std::string stem = "finetuned_" + task_stem(d.task_id);
        save_artifact(to_params(m), out / (stem + ".mmlb"), digest, {{"kind", "finetuned"}, {"task", d.task_id}});
        write_train_log_csv(log, out / (stem + ".log.csv"), digest);
      }
    } else if (*mtl) {
      const auto ds = load_task_dir(data_dir);
      TrainConfig tc = cfg.mtl;
      tc.seed = derive_seed(seed, "mtl");
      const MtlModel m = train_mtl(encoder_part(load_required(base_path)), ds, tc);
      ModelParams p = m.encoder.params();
      for (std::size_t t = 0; t < m.heads.size(); ++t) {
        const std::string prefix = "head." + std::to_string(m.task_ids[t]) + ".";
        p.add(prefix + "weight", m.heads[t].weight);
        if (m.heads[t].use_bias) p.add(prefix + "bias", m.heads[t].bias);
      }
      fs::create_directories(out);
      save_artifact(p, out / "mtl.mmlb", digest, {{"kind", "mtl"}});
    } else if (*mg) {
      MergeRequest req;
      req.spec.method = parse_merge_method(method_name);
      req.spec.lambda = lambda;
      req.spec.keep_fraction = keep;
      if (!base_path.empty()) req.base = base_path;
      for (const auto& p : inputs) req.inputs.emplace_back(p);
      req.output = output_path.empty() ? out / ("merged_" + method_name + ".mmlb") : fs::path(output_path);
      req.digest = digest;
      cmd_merge(req);
    } else if (*ev) {
      EvalRequest req;
      req.model = model_path;
      for (const auto& p : inputs) req.finetuned.emplace_back(p);
      req.tasks = tasks;
      req.data_dir = data_dir;
      req.protocol = parse_protocol(protocol_name);
      if (k_opt->count() > 0) req.k = k;
      req.settings = cfg.settings;
      req.seed = seed;
      req.model_label = model_label;
      req.method_label = method_label.empty() ? "-" : method_label;
      req.report = report_path.empty() ? out / "report.csv" : fs::path(report_path);
      for (const auto& r : cmd_eval(req)) {
        std::cout << r.model << ',' << r.method << ',' << r.protocol << ',' << r.task << ',' << r.k_or_fraction << ','
                  << r.seed << ',' << format_double(r.accuracy) << '\n';
      }
    } else if (*dump) {
      cmd_dump_embeddings(model_path, dataset_path, task_id, parse_split(split_name), output_path);
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_of(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::Data);
  }
}

}  // namespace mmlab
