#include "mmlab/synthdata.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mmlab {

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

std::vector<std::size_t> TaskDataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == s) out.push_back(i);
  return out;
}

std::vector<std::vector<std::size_t>> TaskDataset::class_indices(Split s) const {
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == s) out[static_cast<std::size_t>(labels[i])].push_back(i);
  return out;
}

LabeledBatch TaskDataset::subset(std::span<const std::size_t> idx) const {
  LabeledBatch b;
  b.x.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
  b.y.reserve(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    b.x.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(idx[r]));
    b.y.push_back(labels[idx[r]]);
  }
  return b;
}

void TaskDataset::validate(std::size_t min_per_class_split) const {
  if (num_classes < 2) throw DataError("task " + std::to_string(task_id) + ": fewer than 2 classes");
  if (static_cast<std::size_t>(features.rows()) != labels.size() || labels.size() != splits.size()) {
    throw DataError("task " + std::to_string(task_id) + ": features/labels/splits length mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw DataError("task " + std::to_string(task_id) + ": label " + std::to_string(y) +
                      " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    const auto per_class = class_indices(s);
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      if (per_class[c].size() < min_per_class_split) {
        throw DataError("task " + std::to_string(task_id) + ": class " + std::to_string(c) + " has " +
                        std::to_string(per_class[c].size()) + " samples in " +
                        std::string(to_string(s)) + " split, need " + std::to_string(min_per_class_split));
      }
    }
  }
}

SplitCounts stratified_counts(std::size_t n) {
  const auto val = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n))));
  const auto test = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(n))));
  if (n < val + test + 2) throw ConfigError("stratified split: " + std::to_string(n) + " samples per class is too few");
  return {n - val - test, val, test};
}

namespace {

void assign_stratified_splits(TaskDataset& ds, Rng& rng) {
  ds.splits.assign(ds.labels.size(), Split::Train);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.labels.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  for (auto& members : by_class) {
    rng.shuffle(members);
    const SplitCounts counts = stratified_counts(members.size());
    for (std::size_t j = 0; j < members.size(); ++j) {
      ds.splits[members[j]] = j < counts.train ? Split::Train
                              : j < counts.train + counts.val ? Split::Val
                                                              : Split::Test;
    }
  }
}

}  // namespace

TaskDataset gen_task(const TaskSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2) throw ConfigError("gen_task: class count must be >= 2");
  if (spec.samples_per_class < 10) throw ConfigError("gen_task: samples per class must be >= 10");
  if (spec.input_dim < 1) throw ConfigError("gen_task: input_dim must be >= 1");
  if (!(spec.spread >= 0.0)) throw ConfigError("gen_task: spread must be >= 0");

  Rng rng(seed);
  const auto classes = static_cast<std::size_t>(spec.num_classes);
  const auto dim = static_cast<Eigen::Index>(spec.input_dim);
  Matrix means(static_cast<Eigen::Index>(classes), dim);
  for (Eigen::Index i = 0; i < means.size(); ++i) means.data()[i] = rng.uniform(-4.0, 4.0);

  TaskDataset ds;
  ds.task_id = spec.task_id;
  ds.num_classes = spec.num_classes;
  ds.seed = seed;
  ds.features.resize(static_cast<Eigen::Index>(classes * spec.samples_per_class), dim);
  ds.labels.reserve(classes * spec.samples_per_class);
  Eigen::Index row = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i, ++row) {
      for (Eigen::Index j = 0; j < dim; ++j)
        ds.features(row, j) = means(static_cast<Eigen::Index>(c), j) + spec.spread * rng.normal();
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  assign_stratified_splits(ds, rng);
  return ds;
}

std::vector<std::size_t> FewShotAnchors::flat_indices() const {
  std::vector<std::size_t> out;
  for (const auto& c : indices) out.insert(out.end(), c.begin(), c.end());
  return out;
}

FewShotAnchors sample_few_shot(const TaskDataset& ds, std::size_t k, Split split, std::uint64_t seed) {
  if (k < 1) throw ConfigError("sample_few_shot: k must be >= 1");
  Rng rng(seed);
  FewShotAnchors anchors;
  anchors.k = k;
  auto per_class = ds.class_indices(split);
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    auto& pool = per_class[c];
    if (pool.size() < k) {
      throw ConfigError("sample_few_shot: class " + std::to_string(c) + " of task " +
                        std::to_string(ds.task_id) + " has " + std::to_string(pool.size()) + " samples in " +
                        std::string(to_string(split)) + " split, k = " + std::to_string(k));
    }
    // Partial Fisher-Yates: the first k slots become a uniform draw.
    for (std::size_t i = 0; i < k; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.uniform_index(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    anchors.samples.push_back(ds.subset(pool).x);
    anchors.indices.push_back(pool);
  }
  return anchors;
}

std::vector<std::size_t> sample_fraction(const TaskDataset& ds, double fraction, Split split, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("sample_fraction: fraction must be in (0, 1]");
  auto pool = ds.indices(split);
  const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(pool.size())));
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_index(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(n);
  std::sort(pool.begin(), pool.end());
  return pool;
}

// ---------------------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, res.ptr};
}

double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataError("not a number: '" + std::string(s) + "'");
  }
  return v;
}

namespace {

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

long parse_int(std::string_view s) {
  long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError("not an integer: '" + std::string(s) + "'");
  return v;
}

// Skips comment lines (the config digest stamp) and blank lines.
bool next_data_line(std::istream& in, std::string& line) {
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty() && line[0] != '#') return true;
  }
  return false;
}

}  // namespace

void write_dataset_csv(const TaskDataset& ds, const std::filesystem::path& path, const std::string& digest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  if (!digest.empty()) out << "# config_digest=" << digest << '\n';
  out << "label";
  for (Eigen::Index j = 0; j < ds.features.cols(); ++j) out << ",f" << j;
  out << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[i];
    for (Eigen::Index j = 0; j < ds.features.cols(); ++j)
      out << ',' << format_double(ds.features(static_cast<Eigen::Index>(i), j));
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_splits_csv(const TaskDataset& ds, const std::filesystem::path& path, const std::string& digest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  if (!digest.empty()) out << "# config_digest=" << digest << '\n';
  out << "index,split\n";
  for (std::size_t i = 0; i < ds.splits.size(); ++i) out << i << ',' << to_string(ds.splits[i]) << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

TaskDataset read_dataset_csv(const std::filesystem::path& path, int task_id,
                             const std::optional<std::filesystem::path>& splits_path, std::uint64_t split_seed) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
  std::string line;
  if (!next_data_line(in, line)) throw DataError(path.string() + ": empty dataset file");
  const auto header = split_csv(line);
  if (header.empty() || header[0] != "label" || header.size() < 2) {
    throw DataError(path.string() + ": header must be 'label,f0,f1,...'");
  }
  const std::size_t dim = header.size() - 1;

  std::vector<double> values;
  TaskDataset ds;
  ds.task_id = task_id;
  ds.seed = split_seed;
  std::size_t line_no = 1;
  while (next_data_line(in, line)) {
    ++line_no;
    const auto cells = split_csv(line);
    if (cells.size() != dim + 1) {
      throw DataError(path.string() + ": row " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                      " columns, expected " + std::to_string(dim + 1));
    }
    const long label = parse_int(cells[0]);
    if (label < 0) throw DataError(path.string() + ": negative label on row " + std::to_string(line_no));
    ds.labels.push_back(static_cast<int>(label));
    for (std::size_t j = 1; j < cells.size(); ++j) values.push_back(parse_double(cells[j]));
  }
  ds.features = make_matrix(static_cast<Eigen::Index>(ds.labels.size()), static_cast<Eigen::Index>(dim), values);
  ds.num_classes = ds.labels.empty() ? 0 : *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;

  if (splits_path) {
    std::ifstream sin(*splits_path);
    if (!sin) throw IoError("cannot open split file '" + splits_path->string() + "'");
    if (!next_data_line(sin, line) || line != "index,split") {
      throw DataError(splits_path->string() + ": header must be 'index,split'");
    }
    ds.splits.assign(ds.labels.size(), Split::Train);
    std::vector<bool> seen(ds.labels.size(), false);
    while (next_data_line(sin, line)) {
      const auto cells = split_csv(line);
      if (cells.size() != 2) throw DataError(splits_path->string() + ": malformed row '" + line + "'");
      const long idx = parse_int(cells[0]);
      if (idx < 0 || static_cast<std::size_t>(idx) >= ds.labels.size() || seen[static_cast<std::size_t>(idx)]) {
        throw DataError(splits_path->string() + ": bad or repeated index " + std::to_string(idx));
      }
      seen[static_cast<std::size_t>(idx)] = true;
      ds.splits[static_cast<std::size_t>(idx)] = parse_split(cells[1]);
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
      throw DataError(splits_path->string() + ": not every sample has a split");
    }
  } else {
    Rng rng(split_seed);
    assign_stratified_splits(ds, rng);
  }
  ds.validate();
  return ds;
}

}  // namespace mmlab
