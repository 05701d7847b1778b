#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "doc2dict/preprocessing.hpp"
#include "doc2dict/structured_codec.hpp"

namespace d2d {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Span {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  std::string matched_text;

  friend bool operator==(const Span& a, const Span& b) { return a.start == b.start && a.end == b.end; }
};

inline constexpr std::size_t kMaxGapChars = 3;

namespace detail {

inline bool align_filler(char c) { return c == ' ' || c == '.' || c == ','; }

inline char fold_ascii(char c) { return c >= 'A' && c <= 'Z' ? static_cast<char>(c + 32) : c; }

}  // namespace detail

// Every non-overlapping occurrence of `value` in `document`, scanning left to
// right. Case is folded (ASCII); spaces, periods and commas in the value are
// optional, and up to kMaxGapChars of them may appear in the document between
// any two remaining value characters. A span runs from the first to the last
// matched value character, extended over the value's own trailing filler
// when the document repeats it literally.
inline std::vector<Span> fuzzy_align(std::string_view value, std::string_view document) {
  std::string core;
  for (char c : value) {
    if (!detail::align_filler(c)) core += detail::fold_ascii(c);
  }
  std::size_t trail = 0;
  while (trail < value.size() && detail::align_filler(value[value.size() - 1 - trail])) ++trail;
  const std::string_view suffix = value.substr(value.size() - trail);

  std::vector<Span> out;
  if (core.empty()) return out;
  std::size_t i = 0;
  while (i < document.size()) {
    if (detail::fold_ascii(document[i]) != core[0]) {
      ++i;
      continue;
    }
    std::size_t pos = i + 1;
    bool ok = true;
    for (std::size_t k = 1; k < core.size() && ok; ++k) {
      std::size_t gap = 0;
      while (pos < document.size() && gap <= kMaxGapChars && detail::align_filler(document[pos])) {
        ++pos;
        ++gap;
      }
      ok = gap <= kMaxGapChars && pos < document.size() && detail::fold_ascii(document[pos]) == core[k];
      ++pos;
    }
    if (!ok) {
      ++i;
      continue;
    }
    if (!suffix.empty() && document.substr(pos, suffix.size()) == suffix) pos += suffix.size();
    out.push_back({i, pos, std::string(document.substr(i, pos - i))});
    i = pos;
  }
  return out;
}

struct AlignmentScore {
  double precision = 0.0;
  double recall = 0.0;
};

inline bool spans_overlap(const Span& a, const Span& b) { return a.start < b.end && b.start < a.end; }

// An automatic span is a true positive when it overlaps any gold span; recall
// counts gold spans overlapped by any automatic span. Empty sides score 0.
inline AlignmentScore score_alignment(std::span<const Span> automatic, std::span<const Span> gold) {
  AlignmentScore s;
  std::size_t tp = 0, covered = 0;
  for (const auto& a : automatic) {
    if (std::any_of(gold.begin(), gold.end(), [&](const Span& g) { return spans_overlap(a, g); })) ++tp;
  }
  for (const auto& g : gold) {
    if (std::any_of(automatic.begin(), automatic.end(), [&](const Span& a) { return spans_overlap(a, g); })) ++covered;
  }
  if (!automatic.empty()) s.precision = static_cast<double>(tp) / static_cast<double>(automatic.size());
  if (!gold.empty()) s.recall = static_cast<double>(covered) / static_cast<double>(gold.size());
  return s;
}

// ---------------------------------------------------------------------------
// Entity-level metrics

enum class Averaging { micro, macro };

struct Prediction {
  Record record;
  bool parse_failed = false;

  static Prediction from(const ParseOutcome& o) { return {o.ok() ? *o.record : Record{}, !o.ok()}; }
};

struct PRF {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

inline double harmonic(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

inline PRF prf_from_counts(std::int64_t tp, std::int64_t n_pred, std::int64_t n_gold) {
  PRF m;
  if (n_pred > 0) m.precision = static_cast<double>(tp) / static_cast<double>(n_pred);
  if (n_gold > 0) m.recall = static_cast<double>(tp) / static_cast<double>(n_gold);
  m.f1 = harmonic(m.precision, m.recall);
  return m;
}

struct KeyMetrics {
  std::int64_t tp = 0, n_pred = 0, n_gold = 0;
  PRF scores;
};

struct MetricReport {
  std::map<std::string, KeyMetrics> per_key;
  PRF micro;
  PRF macro;  // unweighted mean over keys seen in predictions or golds
  Averaging averaging = Averaging::micro;
  double parse_failure_rate = 0.0;
  std::size_t documents = 0;

  const PRF& headline() const { return averaging == Averaging::micro ? micro : macro; }

  std::string to_text() const {
    std::ostringstream os;
    os << "documents=" << documents << "\naveraging=" << (averaging == Averaging::micro ? "micro" : "macro")
       << "\nf1=" << headline().f1 << "\nmicro_precision=" << micro.precision << "\nmicro_recall=" << micro.recall
       << "\nmicro_f1=" << micro.f1 << "\nmacro_precision=" << macro.precision << "\nmacro_recall=" << macro.recall
       << "\nmacro_f1=" << macro.f1 << "\nparse_failure_rate=" << parse_failure_rate << '\n';
    for (const auto& [k, m] : per_key) {
      os << "key." << k << ".precision=" << m.scores.precision << "\nkey." << k << ".recall=" << m.scores.recall
         << "\nkey." << k << ".f1=" << m.scores.f1 << "\nkey." << k << ".tp=" << m.tp << "\nkey." << k
         << ".predicted=" << m.n_pred << "\nkey." << k << ".gold=" << m.n_gold << '\n';
    }
    return os.str();
  }
};

namespace detail {

inline std::string metric_fold(const std::string& s, bool cased) { return cased ? s : lowercase_transform(s); }

}  // namespace detail

// Greedy multiset matching of (key, value) pairs per document; each gold pair
// can be consumed once. With exact equality this is also a maximum matching.
inline MetricReport entity_f1(std::span<const Prediction> predictions, std::span<const Record> golds, bool cased,
                              Averaging averaging = Averaging::micro) {
  if (predictions.size() != golds.size()) {
    throw MetricError("entity_f1: " + std::to_string(predictions.size()) + " predictions for " +
                      std::to_string(golds.size()) + " gold records");
  }
  MetricReport rep;
  rep.averaging = averaging;
  rep.documents = golds.size();
  std::size_t failures = 0;
  for (std::size_t d = 0; d < golds.size(); ++d) {
    if (predictions[d].parse_failed) ++failures;
    const Record empty;
    const Record& pred = predictions[d].parse_failed ? empty : predictions[d].record;
    std::vector<std::pair<std::string, std::string>> remaining;
    for (const auto& [k, v] : golds[d].pairs) {
      const std::string key = detail::metric_fold(k, cased);
      remaining.emplace_back(key, detail::metric_fold(v.text, cased));
      ++rep.per_key[key].n_gold;
    }
    std::vector<bool> used(remaining.size(), false);
    for (const auto& [k, v] : pred.pairs) {
      const std::string key = detail::metric_fold(k, cased);
      const std::string val = detail::metric_fold(v.text, cased);
      auto& km = rep.per_key[key];
      ++km.n_pred;
      for (std::size_t g = 0; g < remaining.size(); ++g) {
        if (!used[g] && remaining[g].first == key && remaining[g].second == val) {
          used[g] = true;
          ++km.tp;
          break;
        }
      }
    }
  }
  std::int64_t tp = 0, np = 0, ng = 0;
  for (auto& [k, m] : rep.per_key) {
    m.scores = prf_from_counts(m.tp, m.n_pred, m.n_gold);
    tp += m.tp;
    np += m.n_pred;
    ng += m.n_gold;
    rep.macro.precision += m.scores.precision;
    rep.macro.recall += m.scores.recall;
    rep.macro.f1 += m.scores.f1;
  }
  rep.micro = prf_from_counts(tp, np, ng);
  if (!rep.per_key.empty()) {
    const double n = static_cast<double>(rep.per_key.size());
    rep.macro.precision /= n;
    rep.macro.recall /= n;
    rep.macro.f1 /= n;
  }
  if (!golds.empty()) rep.parse_failure_rate = static_cast<double>(failures) / static_cast<double>(golds.size());
  return rep;
}

inline MetricReport entity_f1(std::span<const Record> predictions, std::span<const Record> golds, bool cased,
                              Averaging averaging = Averaging::micro) {
  std::vector<Prediction> p;
  p.reserve(predictions.size());
  for (const auto& r : predictions) p.push_back({r, false});
  return entity_f1(std::span<const Prediction>(p), golds, cased, averaging);
}

// Fraction of documents whose prediction equals the gold record as a multiset.
inline double exact_match_rate(std::span<const Prediction> predictions, std::span<const Record> golds) {
  if (predictions.size() != golds.size()) throw MetricError("exact_match_rate: length mismatch");
  if (golds.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (!predictions[i].parse_failed && canonically_equal(predictions[i].record, golds[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(golds.size());
}

// ---------------------------------------------------------------------------
// Alignment audit over a dataset: fuzzy-match each record value back into its
// document and score against reference spans.

struct KeyAlignment {
  std::size_t values = 0;
  std::size_t automatic_spans = 0;
  std::size_t gold_spans = 0;
  std::size_t tp_spans = 0;       // automatic spans overlapping a gold span
  std::size_t covered_gold = 0;   // gold spans overlapped by an automatic span
  double precision() const { return automatic_spans ? static_cast<double>(tp_spans) / automatic_spans : 0.0; }
  double recall() const { return gold_spans ? static_cast<double>(covered_gold) / gold_spans : 0.0; }
};

struct AlignmentReport {
  std::map<std::string, KeyAlignment> per_key;

  std::string to_table() const {
    std::ostringstream os;
    os << "key                  values  auto  gold  precision  recall\n";
    for (const auto& [k, a] : per_key) {
      char line[160];
      std::snprintf(line, sizeof line, "%-20s %6zu %5zu %5zu  %9.3f  %6.3f\n", k.c_str(), a.values,
                    a.automatic_spans, a.gold_spans, a.precision(), a.recall());
      os << line;
    }
    return os.str();
  }

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, a] : per_key) {
      os << "key." << k << ".values=" << a.values << "\nkey." << k << ".auto_spans=" << a.automatic_spans << "\nkey."
         << k << ".gold_spans=" << a.gold_spans << "\nkey." << k << ".precision=" << a.precision() << "\nkey." << k
         << ".recall=" << a.recall() << '\n';
    }
    return os.str();
  }
};

inline void accumulate_alignment(AlignmentReport& rep, const std::string& key, std::span<const Span> automatic,
                                 std::span<const Span> gold) {
  auto& a = rep.per_key[key];
  ++a.values;
  a.automatic_spans += automatic.size();
  a.gold_spans += gold.size();
  for (const auto& s : automatic) {
    if (std::any_of(gold.begin(), gold.end(), [&](const Span& g) { return spans_overlap(s, g); })) ++a.tp_spans;
  }
  for (const auto& g : gold) {
    if (std::any_of(automatic.begin(), automatic.end(), [&](const Span& s) { return spans_overlap(s, g); })) {
      ++a.covered_gold;
    }
  }
}

}  // namespace d2d
