#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ccl/dataset.hpp"
#include "ccl/errors.hpp"

// QA answer scoring: exact match, token-level F1, and substring accuracy
// over SQuAD-style normalized strings, plus the teacher-normalized score
// (M_fc - M_noctx) / (M_teacher - M_noctx) and macro aggregation across
// datasets with in/out-of-domain sub-aggregates.

namespace ccl {

// Lowercase, strip punctuation, drop the articles "a"/"an"/"the" as whole
// tokens, collapse whitespace.
inline std::string normalize_answer(std::string_view text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (char c : text) {
    const auto uc = static_cast<unsigned char>(c);
    if (std::ispunct(uc)) continue;
    lowered.push_back(static_cast<char>(std::tolower(uc)));
  }
  std::istringstream iss(lowered);
  std::string word, out;
  while (iss >> word) {
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

inline std::vector<std::string> normalized_tokens(std::string_view text) {
  std::istringstream iss(normalize_answer(text));
  std::vector<std::string> tokens;
  std::string word;
  while (iss >> word) tokens.push_back(word);
  return tokens;
}

inline double exact_match(std::string_view pred, std::string_view gold) {
  return normalize_answer(pred) == normalize_answer(gold) ? 1.0 : 0.0;
}

// Harmonic mean of precision/recall over the normalized-token multiset
// overlap. Both sides empty scores 1; exactly one side empty scores 0.
inline double token_f1(std::string_view pred, std::string_view gold) {
  const auto pred_tokens = normalized_tokens(pred);
  const auto gold_tokens = normalized_tokens(gold);
  if (pred_tokens.empty() && gold_tokens.empty()) return 1.0;
  if (pred_tokens.empty() || gold_tokens.empty()) return 0.0;
  std::map<std::string, int> gold_counts;
  for (const auto& t : gold_tokens) gold_counts[t]++;
  int overlap = 0;
  for (const auto& t : pred_tokens) {
    auto it = gold_counts.find(t);
    if (it != gold_counts.end() && it->second > 0) {
      ++overlap;
      --it->second;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / pred_tokens.size();
  const double recall = static_cast<double>(overlap) / gold_tokens.size();
  return 2.0 * precision * recall / (precision + recall);
}

// 1 when the normalized gold answer appears contiguously in the normalized
// prediction. Deliberately generous; see token_f1 for the primary metric.
inline double substring_accuracy(std::string_view pred, std::string_view gold) {
  return normalize_answer(pred).find(normalize_answer(gold)) != std::string::npos
             ? 1.0
             : 0.0;
}

// (M_fc - M_noctx) / (M_teacher - M_noctx). Not clamped; may exceed 1 or go
// negative.
inline double teacher_normalized(double m_compressor, double m_teacher,
                                 double m_no_context) {
  if (m_teacher == m_no_context)
    throw InvalidArgumentError(
        "teacher_normalized: teacher and no-context scores coincide");
  return (m_compressor - m_no_context) / (m_teacher - m_no_context);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct MetricSet {
  double em = 0.0;
  double f1 = 0.0;
  double substring = 0.0;
};

inline MetricSet operator+(const MetricSet& a, const MetricSet& b) {
  return {a.em + b.em, a.f1 + b.f1, a.substring + b.substring};
}

inline MetricSet operator-(const MetricSet& a, const MetricSet& b) {
  return {a.em - b.em, a.f1 - b.f1, a.substring - b.substring};
}

inline MetricSet operator/(const MetricSet& a, double d) {
  return {a.em / d, a.f1 / d, a.substring / d};
}

struct StudentScore {
  std::string system;   // compressor variant
  int ratio = 1;
  std::string regime;   // "single" or "multi"
  MetricSet raw;
  MetricSet normalized;  // teacher-normalized, filled during aggregation/eval
};

struct DatasetEval {
  std::string dataset;
  Domain domain = Domain::In;
  MetricSet teacher_full;
  MetricSet teacher_noctx;
  std::vector<StudentScore> students;
};

struct AggregateRow {
  std::string system;
  int ratio = 1;
  std::string regime;
  MetricSet raw;
  MetricSet normalized;
};

struct EvalReport {
  std::vector<DatasetEval> datasets;
  MetricSet teacher_full_macro;
  MetricSet teacher_noctx_macro;
  std::vector<AggregateRow> macro;       // unweighted mean across all datasets
  std::vector<AggregateRow> in_domain;   // mean across in-domain datasets
  std::vector<AggregateRow> out_domain;  // mean across out-of-domain datasets
  std::vector<AggregateRow> domain_gap;  // in minus out, when both exist
};

namespace detail {

inline std::vector<AggregateRow> mean_rows(const std::vector<DatasetEval>& subset) {
  std::vector<AggregateRow> rows;
  if (subset.empty()) return rows;
  const size_t n_students = subset.front().students.size();
  for (const DatasetEval& d : subset)
    if (d.students.size() != n_students)
      throw InvalidArgumentError("aggregate: datasets disagree on student set");
  for (size_t s = 0; s < n_students; ++s) {
    AggregateRow row;
    row.system = subset.front().students[s].system;
    row.ratio = subset.front().students[s].ratio;
    row.regime = subset.front().students[s].regime;
    for (const DatasetEval& d : subset) {
      const StudentScore& score = d.students[s];
      if (score.system != row.system || score.ratio != row.ratio ||
          score.regime != row.regime)
        throw InvalidArgumentError("aggregate: datasets disagree on student order");
      row.raw = row.raw + score.raw;
      row.normalized = row.normalized + score.normalized;
    }
    row.raw = row.raw / static_cast<double>(subset.size());
    row.normalized = row.normalized / static_cast<double>(subset.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

// Fills per-student normalized scores (per dataset), then macro-averages
// raw and normalized metrics with equal dataset weights, with separate
// in-domain / out-of-domain sub-aggregates and their gap.
inline EvalReport aggregate(std::vector<DatasetEval> datasets) {
  if (datasets.empty()) throw InvalidArgumentError("aggregate: no datasets");
  for (DatasetEval& d : datasets) {
    for (StudentScore& s : d.students) {
      s.normalized.em =
          teacher_normalized(s.raw.em, d.teacher_full.em, d.teacher_noctx.em);
      s.normalized.f1 =
          teacher_normalized(s.raw.f1, d.teacher_full.f1, d.teacher_noctx.f1);
      s.normalized.substring = teacher_normalized(
          s.raw.substring, d.teacher_full.substring, d.teacher_noctx.substring);
    }
  }
  EvalReport report;
  report.datasets = datasets;
  for (const DatasetEval& d : datasets) {
    report.teacher_full_macro = report.teacher_full_macro + d.teacher_full;
    report.teacher_noctx_macro = report.teacher_noctx_macro + d.teacher_noctx;
  }
  report.teacher_full_macro =
      report.teacher_full_macro / static_cast<double>(datasets.size());
  report.teacher_noctx_macro =
      report.teacher_noctx_macro / static_cast<double>(datasets.size());

  report.macro = detail::mean_rows(datasets);
  std::vector<DatasetEval> in_subset, out_subset;
  for (const DatasetEval& d : datasets)
    (d.domain == Domain::In ? in_subset : out_subset).push_back(d);
  report.in_domain = detail::mean_rows(in_subset);
  report.out_domain = detail::mean_rows(out_subset);
  if (!report.in_domain.empty() && !report.out_domain.empty()) {
    for (size_t i = 0; i < report.in_domain.size(); ++i) {
      AggregateRow gap = report.in_domain[i];
      gap.raw = report.in_domain[i].raw - report.out_domain[i].raw;
      gap.normalized =
          report.in_domain[i].normalized - report.out_domain[i].normalized;
      report.domain_gap.push_back(std::move(gap));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void csv_row(std::string& out, const std::string& dataset,
                    const std::string& system, const std::string& ratio,
                    const std::string& regime, const MetricSet& raw,
                    const MetricSet& normalized) {
  out += dataset + "," + system + "," + ratio + "," + regime + "," + fmt(raw.em) +
         "," + fmt(raw.f1) + "," + fmt(raw.substring) + "," + fmt(normalized.em) +
         "," + fmt(normalized.f1) + "\n";
}

}  // namespace detail

inline std::string to_csv(const EvalReport& report) {
  std::string out =
      "dataset,system,ratio,regime,em,f1,substring_acc,relative_em,relative_f1\n";
  auto emit_block = [&out](const std::string& dataset, const MetricSet& full,
                           const MetricSet& noctx,
                           const std::vector<StudentScore>& students) {
    detail::csv_row(out, dataset, "teacher-full", "", "", full, {1.0, 1.0, 1.0});
    detail::csv_row(out, dataset, "teacher-noctx", "", "", noctx, {0.0, 0.0, 0.0});
    for (const StudentScore& s : students)
      detail::csv_row(out, dataset, s.system, std::to_string(s.ratio), s.regime,
                      s.raw, s.normalized);
  };
  for (const DatasetEval& d : report.datasets)
    emit_block(d.dataset, d.teacher_full, d.teacher_noctx, d.students);
  auto emit_aggregate = [&out](const std::string& name,
                               const std::vector<AggregateRow>& rows) {
    for (const AggregateRow& r : rows)
      detail::csv_row(out, name, r.system, std::to_string(r.ratio), r.regime,
                      r.raw, r.normalized);
  };
  emit_aggregate("macro", report.macro);
  emit_aggregate("macro-in", report.in_domain);
  emit_aggregate("macro-out", report.out_domain);
  emit_aggregate("gap-in-minus-out", report.domain_gap);
  return out;
}

// Plain-text comparison table: one row per system, columns Original /
// ratio x regime / No Ctx, values x100. A second block shows the
// teacher-normalized F1.
inline std::string to_table(const EvalReport& report) {
  // Column layout from the macro rows present.
  std::vector<std::pair<int, std::string>> columns;
  for (const AggregateRow& r : report.macro) {
    const auto col = std::make_pair(r.ratio, r.regime);
    if (std::find(columns.begin(), columns.end(), col) == columns.end())
      columns.push_back(col);
  }
  std::sort(columns.begin(), columns.end());
  std::vector<std::string> systems;
  for (const AggregateRow& r : report.macro)
    if (std::find(systems.begin(), systems.end(), r.system) == systems.end())
      systems.push_back(r.system);

  auto find_row = [&](const std::string& system, int ratio,
                      const std::string& regime) -> const AggregateRow* {
    for (const AggregateRow& r : report.macro)
      if (r.system == system && r.ratio == ratio && r.regime == regime) return &r;
    return nullptr;
  };

  std::ostringstream out;
  auto cell = [](double v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%8.2f", 100.0 * v);
    return std::string(buf);
  };
  auto blank = [] { return std::string(8, ' '); };

  out << "F1, macro-averaged across datasets (x100)\n";
  out << "system                 | Original |";
  for (const auto& [ratio, regime] : columns) {
    char head[16];
    std::snprintf(head, sizeof head, " %3dx %-4s|", ratio,
                  regime.empty() ? "-" : regime.c_str());
    out << head;
  }
  out << "  No Ctx\n";
  out << "teacher                | " << cell(report.teacher_full_macro.f1) << " |";
  for (size_t i = 0; i < columns.size(); ++i) out << " " << blank() << "|";
  out << " " << cell(report.teacher_noctx_macro.f1) << "\n";
  for (const std::string& system : systems) {
    out << system << std::string(system.size() < 23 ? 23 - system.size() : 1, ' ')
        << "| " << blank() << " |";
    for (const auto& [ratio, regime] : columns) {
      const AggregateRow* r = find_row(system, ratio, regime);
      out << " " << (r != nullptr ? cell(r->raw.f1) : blank()) << "|";
    }
    out << "\n";
  }

  out << "\nTeacher-normalized F1 (x100)\n";
  for (const std::string& system : systems) {
    out << system << std::string(system.size() < 23 ? 23 - system.size() : 1, ' ')
        << "|";
    for (const auto& [ratio, regime] : columns) {
      const AggregateRow* r = find_row(system, ratio, regime);
      out << " " << (r != nullptr ? cell(r->normalized.f1) : blank()) << "|";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace ccl
