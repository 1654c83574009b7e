#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "memechain/corpus.hpp"
#include "memechain/pipeline.hpp"

namespace memechain {

class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

using LabelMap = std::unordered_map<std::string, int>;

// Ground truth of every labeled test record.
inline LabelMap test_labels(const LabeledCorpus& corpus) {
  LabelMap out;
  for (const auto& r : corpus.records())
    if (r.split == Split::test && r.label) out.emplace(r.id, *r.label);
  return out;
}

inline double accuracy(std::span<const PipelineResult> results, const LabelMap& labels) {
  if (results.empty()) throw MetricError("accuracy of an empty result set");
  std::size_t correct = 0;
  for (const auto& r : results) {
    auto it = labels.find(r.meme_id);
    if (it == labels.end()) throw MetricError("no ground-truth label for '" + r.meme_id + "'");
    if (r.prediction == it->second) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(results.size());
}

// Mann-Whitney statistic: the fraction of (positive, negative) pairs where the
// positive scores higher, with ties counting one half. O(n log n).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw MetricError("scores and labels differ in length");
  std::size_t pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw MetricError("labels must be 0 or 1");
    if (std::isnan(scores[i])) throw MetricError("score is NaN");
    pos += static_cast<std::size_t>(labels[i]);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw MetricError("AUC needs at least one positive and one negative label");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double wins = 0.0;
  std::size_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, p = 0, n = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? p : n) += 1;
      ++j;
    }
    wins += static_cast<double>(p) * static_cast<double>(neg_below) + 0.5 * static_cast<double>(p) * static_cast<double>(n);
    neg_below += n;
    i = j;
  }
  return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t total() const noexcept { return tp + fp + tn + fn; }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

struct MetricsReport {
  std::string label;
  std::size_t n = 0;
  double accuracy = 0.0;
  std::optional<double> auc;  // empty when the labels hold a single class
  Confusion confusion;
  std::size_t unparseable_count = 0;
  AblationConfig config;
};

// Results without a ground-truth label are left out. Unparseable responses
// count as prediction 0 and are tallied separately.
inline MetricsReport evaluate(std::span<const PipelineResult> results, const LabelMap& labels,
                              const AblationConfig& config) {
  MetricsReport m;
  m.config = config;
  m.label = ablation_label(config);
  std::vector<PipelineResult> scored;
  std::vector<double> scores;
  std::vector<int> truth;
  for (const auto& r : results) {
    auto it = labels.find(r.meme_id);
    if (it == labels.end()) continue;
    scored.push_back(r);
    scores.push_back(r.score);
    truth.push_back(it->second);
    const int y = it->second;
    if (r.prediction == 1) (y == 1 ? m.confusion.tp : m.confusion.fp) += 1;
    else (y == 0 ? m.confusion.tn : m.confusion.fn) += 1;
    if (r.unparseable) ++m.unparseable_count;
  }
  m.n = scored.size();
  if (m.n == 0) return m;
  m.accuracy = accuracy(scored, labels);
  try {
    m.auc = auc(scores, truth);
  } catch (const MetricError&) {
    m.auc.reset();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Formatting

namespace detail {

inline std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

inline std::string percent(std::optional<double> v) { return v ? fixed(*v * 100.0, 1) : "n/a"; }

// Percent in tenths, as printed.
inline long long tenths(double fraction) { return std::llround(fraction * 1000.0); }

inline std::string signed_tenths(long long t) {
  if (t == 0) return "0.0";
  const auto mag = t < 0 ? -t : t;
  return std::string(t < 0 ? "-" : "+") + std::to_string(mag / 10) + "." + std::to_string(mag % 10);
}

inline const char* mark(bool on) { return on ? "x" : " "; }

}  // namespace detail

inline std::string metrics_markdown(std::span<const MetricsReport> reports) {
  std::ostringstream out;
  out << "| Config | EPM | EIE | CRA | K | N | ACC | AUC | TP | FP | TN | FN | Unparseable |\n"
      << "|---|:-:|:-:|:-:|--:|--:|--:|--:|--:|--:|--:|--:|--:|\n";
  for (const auto& m : reports) {
    out << "| " << m.label << " | " << detail::mark(m.config.use_epm) << " | " << detail::mark(m.config.use_eie)
        << " | " << detail::mark(m.config.use_cra) << " | " << m.config.k << " | " << m.n << " | "
        << detail::percent(m.accuracy) << " | " << detail::percent(m.auc) << " | " << m.confusion.tp << " | "
        << m.confusion.fp << " | " << m.confusion.tn << " | " << m.confusion.fn << " | " << m.unparseable_count
        << " |\n";
  }
  return out.str();
}

inline std::string metrics_csv(std::span<const MetricsReport> reports) {
  std::ostringstream out;
  out << "config,epm,eie,cra,k,n,acc,auc,tp,fp,tn,fn,unparseable\n";
  for (const auto& m : reports) {
    out << m.label << ',' << m.config.use_epm << ',' << m.config.use_eie << ',' << m.config.use_cra << ','
        << m.config.k << ',' << m.n << ',' << detail::fixed(m.accuracy, 6) << ','
        << (m.auc ? detail::fixed(*m.auc, 6) : "") << ',' << m.confusion.tp << ',' << m.confusion.fp << ','
        << m.confusion.tn << ',' << m.confusion.fn << ',' << m.unparseable_count << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  MetricsReport metrics;
  long long delta_tenths = 0;  // ACC minus reference ACC, in tenths of a percent

  std::string acc_cell() const {
    return detail::percent(metrics.accuracy) + " (" + detail::signed_tenths(delta_tenths) + ")";
  }
};

// Rows follow the ablation grid order (baseline first, full model last);
// other configurations trail in input order. Deltas are taken against the
// baseline row, or the first row when no baseline ran, using the printed
// one-decimal values so they always agree with the table.
inline std::vector<AblationRow> ablation_report(std::span<const MetricsReport> reports) {
  const auto grid = ablation_grid();
  auto rank = [&](const AblationConfig& c) {
    for (std::size_t i = 0; i < grid.size(); ++i)
      if (grid[i].use_epm == c.use_epm && grid[i].use_eie == c.use_eie && grid[i].use_cra == c.use_cra) return i;
    return grid.size();
  };
  std::vector<AblationRow> rows;
  for (const auto& m : reports) rows.push_back({m, 0});
  std::stable_sort(rows.begin(), rows.end(),
                   [&](const AblationRow& a, const AblationRow& b) { return rank(a.metrics.config) < rank(b.metrics.config); });
  if (rows.empty()) return rows;
  const auto ref = detail::tenths(rows.front().metrics.accuracy);
  for (auto& r : rows) r.delta_tenths = detail::tenths(r.metrics.accuracy) - ref;
  return rows;
}

inline std::string ablation_markdown(std::span<const AblationRow> rows) {
  std::ostringstream out;
  out << "| Config | EPM | EIE | CRA | N | ACC (delta) | AUC | Unparseable |\n"
      << "|---|:-:|:-:|:-:|--:|--:|--:|--:|\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    out << "| " << m.label << " | " << detail::mark(m.config.use_epm) << " | " << detail::mark(m.config.use_eie)
        << " | " << detail::mark(m.config.use_cra) << " | " << m.n << " | " << r.acc_cell() << " | "
        << detail::percent(m.auc) << " | " << m.unparseable_count << " |\n";
  }
  return out.str();
}

inline std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream out;
  out << "config,epm,eie,cra,k,n,acc,auc,unparseable,delta\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    out << m.label << ',' << m.config.use_epm << ',' << m.config.use_eie << ',' << m.config.use_cra << ','
        << m.config.k << ',' << m.n << ',' << detail::percent(m.accuracy) << ','
        << (m.auc ? detail::percent(m.auc) : "") << ',' << m.unparseable_count << ','
        << detail::signed_tenths(r.delta_tenths) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentRun {
  MetricsReport metrics;
  RunOutcome outcome;
};

inline std::optional<std::filesystem::path> checkpoint_in(const std::optional<std::filesystem::path>& dir,
                                                          const std::string& name) {
  if (!dir) return std::nullopt;
  return *dir / (name + ".jsonl");
}

// Runs each configuration in turn, checkpointing to <checkpoint_dir>/<label>.jsonl.
inline std::vector<ExperimentRun> run_ablation(const CoePipeline& pipeline, std::span<const AblationConfig> configs,
                                               RunOptions options,
                                               const std::optional<std::filesystem::path>& checkpoint_dir = {}) {
  const auto labels = test_labels(pipeline.corpus());
  std::vector<ExperimentRun> out;
  for (const auto& c : configs) {
    options.checkpoint = checkpoint_in(checkpoint_dir, ablation_label(c));
    auto outcome = run_dataset(pipeline, c, options);
    auto m = evaluate(outcome.results, labels, c);
    out.push_back({std::move(m), std::move(outcome)});
  }
  return out;
}

struct KSweepRow {
  std::size_t k = 0;
  MetricsReport metrics;
};

// Full pipeline once per k, everything else fixed; checkpoints go to
// <checkpoint_dir>/k<k>.jsonl.
inline std::vector<KSweepRow> k_sweep(const CoePipeline& pipeline, std::span<const std::size_t> ks,
                                      AblationConfig base, RunOptions options,
                                      const std::optional<std::filesystem::path>& checkpoint_dir = {}) {
  if (ks.empty()) throw std::invalid_argument("k sweep needs at least one k");
  for (auto k : ks)
    if (k == 0) throw std::invalid_argument("k must be >= 1");
  const auto labels = test_labels(pipeline.corpus());
  std::vector<KSweepRow> out;
  for (auto k : ks) {
    base.k = k;
    options.checkpoint = checkpoint_in(checkpoint_dir, "k" + std::to_string(k));
    const auto outcome = run_dataset(pipeline, base, options);
    out.push_back({k, evaluate(outcome.results, labels, base)});
  }
  return out;
}

inline std::string k_sweep_csv(std::span<const KSweepRow> rows) {
  std::ostringstream out;
  out << "k,acc,auc,n,unparseable\n";
  for (const auto& r : rows)
    out << r.k << ',' << detail::fixed(r.metrics.accuracy, 6) << ','
        << (r.metrics.auc ? detail::fixed(*r.metrics.auc, 6) : "") << ',' << r.metrics.n << ','
        << r.metrics.unparseable_count << '\n';
  return out.str();
}

struct KSweepPoint {
  std::size_t k = 0;
  double acc = 0.0;
  std::optional<double> auc;
  std::size_t n = 0;
  std::size_t unparseable = 0;

  friend bool operator==(const KSweepPoint&, const KSweepPoint&) = default;
};

inline std::vector<KSweepPoint> read_k_sweep_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "k,acc,auc,n,unparseable")
    throw std::invalid_argument("not a k-sweep CSV (bad header)");
  std::vector<KSweepPoint> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 5) throw std::invalid_argument("k-sweep CSV row " + std::to_string(row) + ": expected 5 cells");
    try {
      KSweepPoint p;
      p.k = std::stoul(cells[0]);
      p.acc = std::stod(cells[1]);
      if (!cells[2].empty()) p.auc = std::stod(cells[2]);
      p.n = std::stoul(cells[3]);
      p.unparseable = std::stoul(cells[4]);
      out.push_back(p);
    } catch (const std::logic_error&) {
      throw std::invalid_argument("k-sweep CSV row " + std::to_string(row) + ": bad number");
    }
  }
  return out;
}

}  // namespace memechain
