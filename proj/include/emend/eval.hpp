// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "emend/corpus.hpp"
#include "emend/utf8.hpp"

// Edit extraction, F-beta scoring against multi-annotator gold edits,
// OOV segmentation, and small/large edit classification.

namespace emend {

namespace detail {

enum class AlignOp { kMatch, kSub, kDel, kIns };

// Minimal unit-cost alignment (matches free), deterministic backtrace:
// match, then substitution, then deletion, then insertion.
template <class T>
std::vector<AlignOp> align_ops(const std::vector<T>& a,
                               const std::vector<T>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1, 0));
  for (size_t i = 0; i <= n; ++i) dp[i][0] = static_cast<int>(i);
  for (size_t j = 0; j <= m; ++j) dp[0][j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i)
    for (size_t j = 1; j <= m; ++j) {
      int best = dp[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      best = std::min(best, dp[i - 1][j] + 1);
      best = std::min(best, dp[i][j - 1] + 1);
      dp[i][j] = best;
    }
  std::vector<AlignOp> ops;
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && a[i - 1] == b[j - 1] &&
        dp[i][j] == dp[i - 1][j - 1]) {
      ops.push_back(AlignOp::kMatch);
      --i;
      --j;
    } else if (i > 0 && j > 0 && dp[i][j] == dp[i - 1][j - 1] + 1) {
      ops.push_back(AlignOp::kSub);
      --i;
      --j;
    } else if (i > 0 && dp[i][j] == dp[i - 1][j] + 1) {
      ops.push_back(AlignOp::kDel);
      --i;
    } else {
      ops.push_back(AlignOp::kIns);
      --j;
    }
  }
  std::reverse(ops.begin(), ops.end());
  return ops;
}

template <class T>
int edit_distance(const std::vector<T>& a, const std::vector<T>& b) {
  int d = 0;
  for (AlignOp op : align_ops(a, b))
    if (op != AlignOp::kMatch) ++d;
  return d;
}

}  // namespace detail

/// Unit-cost Levenshtein distance over Unicode code points (spaces
/// included).
inline int char_edit_distance(const std::string& a, const std::string& b) {
  return detail::edit_distance(utf8_decode(a), utf8_decode(b));
}

/// Minimal token-level edits turning `source` into `hypothesis`: a
/// cheapest alignment with runs of adjacent non-match operations merged
/// into single contiguous edits.
inline std::vector<Edit> extract_edits(
    const std::vector<std::string>& source,
    const std::vector<std::string>& hypothesis) {
  std::vector<detail::AlignOp> ops = detail::align_ops(source, hypothesis);
  std::vector<Edit> edits;
  bool open = false;
  Edit cur;
  size_t i = 0, j = 0;
  auto close = [&]() {
    if (open) edits.push_back(cur);
    open = false;
  };
  for (detail::AlignOp op : ops) {
    if (op == detail::AlignOp::kMatch) {
      close();
      ++i;
      ++j;
      continue;
    }
    if (!open) {
      cur = Edit{};
      cur.start = static_cast<int>(i);
      cur.end = static_cast<int>(i);
      open = true;
    }
    switch (op) {
      case detail::AlignOp::kSub:
        cur.replacement.push_back(hypothesis[j]);
        ++i;
        ++j;
        break;
      case detail::AlignOp::kDel:
        ++i;
        break;
      case detail::AlignOp::kIns:
        cur.replacement.push_back(hypothesis[j]);
        ++j;
        break;
      default:
        break;
    }
    cur.end = static_cast<int>(i);
  }
  close();
  return edits;
}

/// Applies non-overlapping edits (sorted by span) to a token sequence.
inline std::vector<std::string> apply_edits(
    const std::vector<std::string>& source, const std::vector<Edit>& edits) {
  std::vector<std::string> out;
  int pos = 0;
  int n = static_cast<int>(source.size());
  for (const Edit& e : edits) {
    if (e.start < pos || e.end < e.start || e.end > n)
      throw DataError("edits out of order or out of bounds");
    for (int k = pos; k < e.start; ++k)
      out.push_back(source[static_cast<size_t>(k)]);
    for (const std::string& t : e.replacement) out.push_back(t);
    pos = e.end;
  }
  for (int k = pos; k < n; ++k) out.push_back(source[static_cast<size_t>(k)]);
  return out;
}

struct FScore {
  double precision = 0.0;  // percent
  double recall = 0.0;
  double f = 0.0;
};

/// F_beta from precision and recall (any common scale).
inline double f_beta_from_pr(double p, double r, double beta = 0.5) {
  double b2 = beta * beta;
  double denom = b2 * p + r;
  if (denom <= 0.0) return 0.0;
  return (1.0 + b2) * p * r / denom;
}

/// Percent-scale P, R, F_beta from match counts. No proposed edits gives
/// P=0 and no gold gives R=0; when both are absent everywhere the run
/// made no mistakes, so F is pinned to 100.
inline FScore f_beta(long long tp, long long proposed, long long gold,
                     double beta = 0.5) {
  if (tp < 0 || proposed < 0 || gold < 0)
    throw Error("f_beta: negative count");
  if (tp > proposed || tp > gold)
    throw Error("f_beta: true positives exceed proposed or gold count");
  FScore s;
  s.precision = proposed > 0 ? 100.0 * static_cast<double>(tp) / proposed : 0.0;
  s.recall = gold > 0 ? 100.0 * static_cast<double>(tp) / gold : 0.0;
  if (proposed == 0 && gold == 0)
    s.f = 100.0;
  else
    s.f = f_beta_from_pr(s.precision, s.recall, beta);
  return s;
}

struct SentenceScore {
  int annotator = 0;
  long long tp = 0;
  long long proposed = 0;
  long long gold = 0;
};

struct ScoreReport {
  long long tp = 0;
  long long proposed = 0;
  long long gold = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
  std::vector<SentenceScore> sentences;
};

namespace detail {

inline bool same_correction(const Edit& a, const Edit& b) {
  return a.start == b.start && a.end == b.end && a.replacement == b.replacement;
}

inline long long count_matches(const std::vector<Edit>& sys,
                               const std::vector<Edit>& gold) {
  long long tp = 0;
  std::vector<char> used(gold.size(), 0);
  for (const Edit& e : sys)
    for (size_t g = 0; g < gold.size(); ++g)
      if (!used[g] && same_correction(e, gold[g])) {
        used[g] = 1;
        ++tp;
        break;
      }
  return tp;
}

}  // namespace detail

/// Scores tokenized system outputs against gold edits, keeping only
/// edits (system and gold alike) that satisfy `keep`, and only sentences
/// with `sentence_mask` set (empty mask = all). Per sentence the
/// annotator is chosen greedily: the one whose edit set maximizes the
/// running corpus F_beta after this sentence (ties to the lowest id).
inline ScoreReport score_m2_filtered(
    const std::vector<std::vector<std::string>>& outputs,
    const M2Document& gold,
    const std::function<bool(const std::vector<std::string>&, const Edit&)>&
        keep,
    const std::vector<char>& sentence_mask = {}, double beta = 0.5) {
  if (outputs.size() != gold.size())
    throw DataError("system output has " + std::to_string(outputs.size()) +
                    " sentences but gold has " + std::to_string(gold.size()));
  if (!sentence_mask.empty() && sentence_mask.size() != gold.size())
    throw DataError("sentence mask size mismatch");
  ScoreReport report;
  for (size_t s = 0; s < gold.size(); ++s) {
    if (!sentence_mask.empty() && !sentence_mask[s]) continue;
    std::vector<Edit> sys;
    for (Edit& e : extract_edits(gold[s].tokens, outputs[s]))
      if (!keep || keep(gold[s].tokens, e)) sys.push_back(std::move(e));
    long long proposed = static_cast<long long>(sys.size());
    bool first = true;
    SentenceScore best;
    double best_f = 0.0;
    for (const auto& [annot, edits] : gold[s].annotators) {
      std::vector<Edit> kept_gold;
      for (const Edit& e : edits)
        if (!keep || keep(gold[s].tokens, e)) kept_gold.push_back(e);
      SentenceScore cand;
      cand.annotator = annot;
      cand.proposed = proposed;
      cand.gold = static_cast<long long>(kept_gold.size());
      cand.tp = detail::count_matches(sys, kept_gold);
      FScore fs = f_beta(report.tp + cand.tp, report.proposed + cand.proposed,
                         report.gold + cand.gold, beta);
      if (first || fs.f > best_f) {
        best = cand;
        best_f = fs.f;
        first = false;
      }
    }
    report.tp += best.tp;
    report.proposed += best.proposed;
    report.gold += best.gold;
    report.sentences.push_back(best);
  }
  FScore total = f_beta(report.tp, report.proposed, report.gold, beta);
  report.precision = total.precision;
  report.recall = total.recall;
  report.f = total.f;
  return report;
}

inline ScoreReport score_m2(const std::vector<std::vector<std::string>>& outputs,
                            const M2Document& gold, double beta = 0.5) {
  return score_m2_filtered(outputs, gold, nullptr, {}, beta);
}

/// Small/large change classification over the span surfaces. Small iff
/// the character distance is at most 2 and either side is at most 8
/// characters, or the distance is under a quarter of the shorter length
/// (+0.1 smoothing).
inline bool edit_is_small(const std::string& src_text,
                          const std::string& tgt_text) {
  int dist = char_edit_distance(src_text, tgt_text);
  size_t ls = utf8_length(src_text);
  size_t lt = utf8_length(tgt_text);
  if (dist <= 2 && (ls <= 8 || lt <= 8)) return true;
  double ratio = dist / (static_cast<double>(std::min(ls, lt)) + 0.1);
  return ratio < 0.25;
}

inline std::string join_tokens(const std::vector<std::string>& toks, int start,
                               int end) {
  std::string out;
  for (int i = start; i < end; ++i) {
    if (i > start) out += ' ';
    out += toks[static_cast<size_t>(i)];
  }
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& toks) {
  return join_tokens(toks, 0, static_cast<int>(toks.size()));
}

inline bool classify_edit_small(const std::vector<std::string>& source,
                                const Edit& e) {
  return edit_is_small(join_tokens(source, e.start, e.end),
                       join_tokens(e.replacement));
}

/// True at index s iff source sentence s contains at least one
/// out-of-vocabulary token.
inline std::vector<char> segment_oov(
    const std::vector<std::vector<std::string>>& sources,
    const Vocabulary& vocab) {
  std::vector<char> flags;
  flags.reserve(sources.size());
  for (const auto& toks : sources) {
    bool oov = false;
    for (const std::string& t : toks)
      if (!vocab.contains(t)) {
        oov = true;
        break;
      }
    flags.push_back(oov ? 1 : 0);
  }
  return flags;
}

inline std::string format_fixed(double v, int decimals = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

/// Human-readable table plus machine-readable key=value lines.
inline std::string format_score_report(const ScoreReport& r,
                                       const std::string& label = "") {
  std::string out;
  if (!label.empty()) out += "[" + label + "]\n";
  out += "P       R       F0.5\n";
  out += format_fixed(r.precision) + "   " + format_fixed(r.recall) + "   " +
         format_fixed(r.f) + "\n";
  out += "tp=" + std::to_string(r.tp) + "\n";
  out += "proposed=" + std::to_string(r.proposed) + "\n";
  out += "gold=" + std::to_string(r.gold) + "\n";
  out += "precision=" + format_fixed(r.precision) + "\n";
  out += "recall=" + format_fixed(r.recall) + "\n";
  out += "f0.5=" + format_fixed(r.f) + "\n";
  return out;
}

}  // namespace emend
