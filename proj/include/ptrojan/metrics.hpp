#pragma once

#include <algorithm>
#include <concepts>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "ptrojan/corpus.hpp"
#include "ptrojan/model.hpp"

namespace ptrojan {

/// Anything that maps (prompt, max_new) to a generated token sequence.
template <class D>
concept Decoder = requires(D d, std::span<const int> prompt, std::size_t n) {
  { d(prompt, n) } -> std::convertible_to<std::vector<int>>;
};

inline auto greedy_decoder(const ModelParams& params) {
  return [&params](std::span<const int> prompt, std::size_t max_new) {
    return greedy_decode(params, prompt, max_new);
  };
}

/// Held-out evaluation examples: clean examples per task, and triggered
/// copies of target-task prompts whose expected output is the attack target.
struct EvalSet {
  std::map<Task, std::vector<Example>> clean;
  std::vector<Example> triggered;
};

/// Percent of triggered prompts whose greedy output equals `target` exactly.
template <Decoder D>
double asr(D&& decode, std::span<const Example> triggered, const std::vector<int>& target) {
  if (triggered.empty()) throw std::invalid_argument("asr: empty triggered set");
  std::size_t hits = 0;
  for (const auto& ex : triggered) {
    if (decode(std::span<const int>(ex.prompt), target.size() + 1) == target) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(triggered.size());
}

inline double asr(const ModelParams& params, std::span<const Example> triggered,
                  const std::vector<int>& target) {
  return asr(greedy_decoder(params), triggered, target);
}

/// Percent of clean examples whose greedy output equals the gold response
/// exactly (label token, answer digits or reversed sequence).
template <Decoder D>
double acc(D&& decode, std::span<const Example> clean) {
  if (clean.empty()) throw std::invalid_argument("acc: empty eval set");
  std::size_t hits = 0;
  for (const auto& ex : clean) {
    const std::vector<int> out = decode(std::span<const int>(ex.prompt), ex.response.size() + 1);
    if (!out.empty() && out == ex.response) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(clean.size());
}

inline double acc(const ModelParams& params, std::span<const Example> clean) {
  return acc(greedy_decoder(params), clean);
}

/// 100 * post / initial; empty when the initial ASR is zero.
inline std::optional<double> persis(double asr_post, double asr_initial) {
  if (!(asr_initial > 0.0)) return std::nullopt;
  return 100.0 * asr_post / asr_initial;
}

inline std::string format_percent(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

/// One long-format result row.
struct MetricRecord {
  std::string arm;
  std::string stage;
  std::string task;
  std::string metric;
  double value = 0.0;
  std::string seed;
  std::string config_hash;

  auto key() const { return std::tie(config_hash, arm, stage, task, metric, seed); }
  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

inline const std::vector<std::string>& table_columns() {
  static const std::vector<std::string> cols = {"arm",   "stage", "task",       "metric",
                                                "value", "seed",  "config_hash"};
  return cols;
}

enum class TableFormat { Csv, Text };

inline std::vector<MetricRecord> sorted_records(std::vector<MetricRecord> rows) {
  std::stable_sort(rows.begin(), rows.end(),
                   [](const MetricRecord& a, const MetricRecord& b) { return a.key() < b.key(); });
  return rows;
}

/// Renders records sorted by (config, arm, stage, task, metric, seed);
/// values with two decimals.
inline std::string emit_table(std::vector<MetricRecord> rows, TableFormat format) {
  rows = sorted_records(std::move(rows));
  std::vector<std::vector<std::string>> cells;
  cells.push_back(table_columns());
  for (const auto& r : rows) {
    cells.push_back({r.arm, r.stage, r.task, r.metric, format_percent(r.value), r.seed, r.config_hash});
  }
  std::ostringstream os;
  if (format == TableFormat::Csv) {
    for (const auto& row : cells) {
      for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
      os << '\n';
    }
    return os.str();
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  for (const auto& row : cells) {
    std::string line;
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::string cell = row[i];
      // numbers right-aligned, text left-aligned
      const bool numeric = i == 4 && &row != &cells.front();
      const std::string pad(width[i] - cell.size(), ' ');
      line += (i ? "  " : "") + (numeric ? pad + cell : cell + pad);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    os << line << '\n';
  }
  return os.str();
}

inline std::vector<MetricRecord> parse_csv_table(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  std::vector<MetricRecord> out;
  bool header = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != table_columns().size()) throw std::invalid_argument("csv: bad row '" + line + "'");
    if (header) {
      if (f != table_columns()) throw std::invalid_argument("csv: unexpected header");
      header = false;
      continue;
    }
    out.push_back({f[0], f[1], f[2], f[3], std::stod(f[4]), f[5], f[6]});
  }
  return out;
}

}  // namespace ptrojan
