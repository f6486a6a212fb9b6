#include "mmlab/report.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "mmlab/errors.hpp"
#include "mmlab/synthdata.hpp"

namespace mmlab {

namespace {

constexpr std::string_view kDigestPrefix = "# config_digest=";

using AverageKey = std::tuple<std::string, std::string, std::string, std::string, std::uint64_t>;
using SummaryKey = std::tuple<std::string, std::string, std::string, std::string>;

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void write_digest(std::ostream& out, const std::string& digest) {
  if (!digest.empty()) out << kDigestPrefix << digest << '\n';
}

void write_rows(std::ostream& out, const std::vector<ReportRow>& rows) {
  for (const auto& r : rows) {
    out << r.model << ',' << r.method << ',' << r.protocol << ',' << r.task << ',' << r.k_or_fraction << ','
        << r.seed << ',' << format_double(r.accuracy) << '\n';
  }
}

}  // namespace

void EvalReport::add(ReportRow row) {
  if (!(row.accuracy >= 0.0 && row.accuracy <= 1.0)) {
    throw NumericError("report: accuracy " + format_double(row.accuracy) + " outside [0, 1]");
  }
  if (row.total > 0 && row.accuracy != static_cast<double>(row.correct) / static_cast<double>(row.total)) {
    throw NumericError("report: accuracy does not equal correct/total");
  }
  for (const auto* field : {&row.model, &row.method, &row.protocol, &row.k_or_fraction}) {
    if (field->find(',') != std::string::npos || field->empty()) {
      throw ConfigError("report: field '" + *field + "' is empty or contains a comma");
    }
  }
  rows_.push_back(std::move(row));
  averages_.clear();
}

std::vector<AverageRow> EvalReport::compute_averages() const {
  std::vector<AverageKey> order;
  std::map<AverageKey, std::pair<double, std::size_t>> acc;
  for (const auto& r : rows_) {
    AverageKey key{r.model, r.method, r.protocol, r.k_or_fraction, r.seed};
    auto [it, inserted] = acc.try_emplace(key, 0.0, 0);
    if (inserted) order.push_back(key);
    it->second.first += r.accuracy;
    it->second.second += 1;
  }
  std::vector<AverageRow> out;
  for (const auto& key : order) {
    const auto& [sum, n] = acc.at(key);
    out.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), std::get<3>(key), std::get<4>(key),
                   sum / static_cast<double>(n), n});
  }
  return out;
}

void EvalReport::finalize() { averages_ = compute_averages(); }

void EvalReport::check_averages() const {
  const auto fresh = compute_averages();
  if (averages_.empty()) return;
  if (fresh.size() != averages_.size()) throw NumericError("report: stored averages are stale");
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    if (std::abs(fresh[i].accuracy - averages_[i].accuracy) > 1e-12) {
      throw NumericError("report: stored average for " + fresh[i].model + "/" + fresh[i].method + "/" +
                         fresh[i].protocol + " disagrees with its rows");
    }
  }
}

std::vector<SummaryRow> EvalReport::summary() const {
  std::vector<SummaryKey> order;
  std::map<SummaryKey, std::vector<double>> values;
  for (const auto& a : compute_averages()) {
    SummaryKey key{a.model, a.method, a.protocol, a.k_or_fraction};
    auto [it, inserted] = values.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(a.accuracy);
  }
  std::vector<SummaryRow> out;
  for (const auto& key : order) {
    const auto& v = values.at(key);
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    out.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), std::get<3>(key), mean, sd, v.size()});
  }
  return out;
}

std::vector<ReportRow> EvalReport::select(std::string_view model, std::string_view method, std::string_view protocol,
                                          std::string_view k) const {
  std::vector<ReportRow> out;
  for (const auto& r : rows_) {
    if ((model.empty() || r.model == model) && (method.empty() || r.method == method) &&
        (protocol.empty() || r.protocol == protocol) && (k.empty() || r.k_or_fraction == k)) {
      out.push_back(r);
    }
  }
  return out;
}

double EvalReport::mean_accuracy(std::string_view model, std::string_view method, std::string_view protocol,
                                 std::uint64_t seed, std::string_view k) const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : select(model, method, protocol, k)) {
    if (r.seed != seed) continue;
    sum += r.accuracy;
    ++n;
  }
  if (n == 0) {
    throw ConfigError("report: no rows for " + std::string(model) + "/" + std::string(method) + "/" +
                      std::string(protocol) + " seed " + std::to_string(seed));
  }
  return sum / static_cast<double>(n);
}

void EvalReport::write_csv(const std::filesystem::path& path) const {
  check_averages();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_digest(out, digest_);
  out << kReportHeader << '\n';
  write_rows(out, rows_);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void EvalReport::append_csv(const std::filesystem::path& path) const {
  if (!std::filesystem::exists(path) || std::filesystem::file_size(path) == 0) {
    write_csv(path);
    return;
  }
  const std::string existing = read_csv_digest(path);
  if (existing != digest_) {
    throw ConfigError("report '" + path.string() + "' carries config digest '" + existing +
                      "', refusing to append rows with digest '" + digest_ + "'");
  }
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open '" + path.string() + "' for appending");
  write_rows(out, rows_);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void EvalReport::write_summary_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_digest(out, digest_);
  out << "model,method,protocol,k_or_fraction,mean,std,seeds\n";
  for (const auto& s : summary()) {
    out << s.model << ',' << s.method << ',' << s.protocol << ',' << s.k_or_fraction << ',' << format_double(s.mean)
        << ',' << format_double(s.stddev) << ',' << s.seeds << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

nlohmann::ordered_json EvalReport::to_json() const {
  check_averages();
  nlohmann::ordered_json j;
  j["config_digest"] = digest_;
  auto& rows = j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows_) {
    rows.push_back({{"model", r.model},
                    {"method", r.method},
                    {"protocol", r.protocol},
                    {"task", r.task},
                    {"k_or_fraction", r.k_or_fraction},
                    {"seed", r.seed},
                    {"accuracy", r.accuracy},
                    {"correct", r.correct},
                    {"total", r.total}});
  }
  auto& avgs = j["averages"] = nlohmann::ordered_json::array();
  for (const auto& a : compute_averages()) {
    avgs.push_back({{"model", a.model},
                    {"method", a.method},
                    {"protocol", a.protocol},
                    {"k_or_fraction", a.k_or_fraction},
                    {"seed", a.seed},
                    {"accuracy", a.accuracy},
                    {"tasks", a.tasks}});
  }
  auto& summ = j["summary"] = nlohmann::ordered_json::array();
  for (const auto& s : summary()) {
    summ.push_back({{"model", s.model},
                    {"method", s.method},
                    {"protocol", s.protocol},
                    {"k_or_fraction", s.k_or_fraction},
                    {"mean", s.mean},
                    {"std", s.stddev},
                    {"seeds", s.seeds}});
  }
  return j;
}

void EvalReport::write_json(const std::filesystem::path& path, const nlohmann::ordered_json& extra) const {
  nlohmann::ordered_json j = to_json();
  if (extra.is_object())
    for (const auto& [k, v] : extra.items()) j[k] = v;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string read_csv_digest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (std::getline(in, line) && line.starts_with(kDigestPrefix)) return line.substr(kDigestPrefix.size());
  return {};
}

EvalReport EvalReport::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report '" + path.string() + "'");
  EvalReport report(read_csv_digest(path));
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kReportHeader) throw DataError(path.string() + ": unexpected report header '" + line + "'");
      header = true;
      continue;
    }
    const auto cells = split_line(line);
    if (cells.size() != 7) throw DataError(path.string() + ": malformed report row '" + line + "'");
    ReportRow r;
    r.model = cells[0];
    r.method = cells[1];
    r.protocol = cells[2];
    r.task = std::stoi(cells[3]);
    r.k_or_fraction = cells[4];
    r.seed = std::stoull(cells[5]);
    r.accuracy = parse_double(cells[6]);
    report.add(std::move(r));
  }
  if (!header) throw DataError(path.string() + ": missing report header");
  return report;
}

}  // namespace mmlab
