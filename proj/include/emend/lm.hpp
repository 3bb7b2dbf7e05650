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

#include <array>
#include <cmath>
#include <map>
#include <unordered_map>

#include "emend/eval.hpp"
#include "emend/serialize.hpp"

// Modified Kneser-Ney n-gram language model plus the log-linear n-best
// reranker and its lambda grid search.

namespace emend {

/// Interpolated modified Kneser-Ney model. Highest order uses raw
/// counts; lower orders use left-extension type counts, except grams
/// starting at the sentence boundary, which keep raw counts (they can
/// never be extended left). Three discounts per order from
/// count-of-count statistics. Stored ARPA-style: a probability per
/// event gram, a backoff weight per observed context. Words outside the
/// training data score a fixed unigram floor that sits outside the
/// normalized event space.
class KnLm {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kFirstWord = 2;

  static constexpr const char* kBosText = "<s>";
  static constexpr const char* kEosText = "</s>";

  static KnLm train(const std::vector<std::vector<std::string>>& sentences,
                    int order) {
    if (order < 1) throw UsageError("lm order must be at least 1");
    if (sentences.empty()) throw DataError("cannot train lm on empty corpus");
    KnLm lm;
    lm.order_ = order;
    lm.tables_.resize(static_cast<size_t>(order));
    lm.bos_bow_.assign(static_cast<size_t>(order > 1 ? order - 1 : 0), 0.0);

    // raw event-anchored counts at every order
    std::vector<std::map<std::vector<int>, long long>> raw(
        static_cast<size_t>(order));
    long long total_events = 0;
    for (const auto& sent : sentences) {
      if (sent.empty()) throw DataError("empty sentence in lm corpus");
      std::vector<int> padded(static_cast<size_t>(order - 1), kBos);
      for (const std::string& w : sent) padded.push_back(lm.intern(w));
      padded.push_back(kEos);
      for (size_t i = static_cast<size_t>(order - 1); i < padded.size(); ++i) {
        ++total_events;
        for (int k = 1; k <= order; ++k) {
          std::vector<int> key(padded.begin() + static_cast<long>(i) - k + 1,
                               padded.begin() + static_cast<long>(i) + 1);
          ++raw[static_cast<size_t>(k - 1)][key];
        }
      }
    }

    // adjusted counts: top order raw; below, count distinct left
    // extensions, except boundary-initial grams keep raw counts
    std::vector<std::map<std::vector<int>, long long>> adj(
        static_cast<size_t>(order));
    adj[static_cast<size_t>(order - 1)] = raw[static_cast<size_t>(order - 1)];
    for (int k = order - 1; k >= 1; --k) {
      auto& out = adj[static_cast<size_t>(k - 1)];
      for (const auto& [key, c] : raw[static_cast<size_t>(k - 1)])
        if (key[0] == kBos) out[key] = c;
      for (const auto& [key, c] : raw[static_cast<size_t>(k)]) {
        std::vector<int> suffix(key.begin() + 1, key.end());
        if (suffix[0] != kBos) ++out[suffix];
      }
    }

    // discounts per order and count class
    std::vector<std::array<double, 3>> disc(static_cast<size_t>(order));
    for (int k = 1; k <= order; ++k) {
      long long n[5] = {0, 0, 0, 0, 0};
      for (const auto& [key, c] : adj[static_cast<size_t>(k - 1)])
        if (c >= 1 && c <= 4) ++n[c];
      double y = (n[1] + 2 * n[2]) > 0
                     ? static_cast<double>(n[1]) / (n[1] + 2.0 * n[2])
                     : 0.0;
      auto& d = disc[static_cast<size_t>(k - 1)];
      for (int i = 1; i <= 3; ++i) {
        double v = n[i] == 0
                       ? static_cast<double>(i)
                       : i - (i + 1.0) * y * static_cast<double>(n[i + 1]) /
                                 static_cast<double>(n[i]);
        d[static_cast<size_t>(i - 1)] =
            std::min(std::max(v, 0.0), static_cast<double>(i));
      }
    }
    auto discount_of = [&](int k, long long c) {
      const auto& d = disc[static_cast<size_t>(k - 1)];
      return c >= 3 ? d[2] : d[static_cast<size_t>(c - 1)];
    };

    // interpolated estimation, lowest order first; the base distribution
    // is uniform over the observed event types
    const double n_omega =
        static_cast<double>(adj[0].size());  // observed words + EOS
    for (int k = 1; k <= order; ++k) {
      const auto& table = adj[static_cast<size_t>(k - 1)];
      auto it = table.begin();
      while (it != table.end()) {
        // one context group: keys sharing the first k-1 tokens
        std::vector<int> ctx(it->first.begin(), it->first.end() - 1);
        auto group_end = it;
        double a_total = 0.0;
        long long n_class[3] = {0, 0, 0};
        while (group_end != table.end() &&
               std::equal(ctx.begin(), ctx.end(), group_end->first.begin())) {
          long long c = group_end->second;
          a_total += static_cast<double>(c);
          ++n_class[c >= 3 ? 2 : c - 1];
          ++group_end;
        }
        const auto& d = disc[static_cast<size_t>(k - 1)];
        double gamma =
            (d[0] * n_class[0] + d[1] * n_class[1] + d[2] * n_class[2]) /
            a_total;
        for (auto g = it; g != group_end; ++g) {
          long long c = g->second;
          double lower;
          if (k == 1) {
            lower = 1.0 / n_omega;
          } else {
            std::vector<int> suffix(g->first.begin() + 1, g->first.end());
            lower = std::exp(
                tables_at(lm, k - 1).at(suffix).logp);
          }
          double p = (static_cast<double>(c) - discount_of(k, c)) / a_total +
                     gamma * lower;
          Entry e;
          e.logp = std::log(p);
          tables_at(lm, k).emplace(g->first, e);
        }
        // record the context's backoff weight
        double lgamma = std::log(gamma);
        if (k == 1) {
          lm.log_gamma_empty_ = lgamma;
        } else if (std::all_of(ctx.begin(), ctx.end(),
                               [](int t) { return t == kBos; })) {
          lm.bos_bow_[static_cast<size_t>(k - 2)] = lgamma;
        } else {
          auto ctx_entry = tables_at(lm, k - 1).find(ctx);
          if (ctx_entry == tables_at(lm, k - 1).end())
            throw Error("lm context missing from lower-order table");
          ctx_entry->second.bow = lgamma;
          ctx_entry->second.has_bow = true;
        }
        it = group_end;
      }
    }

    lm.log_floor_ = std::log(1.0 / (static_cast<double>(total_events) +
                                    n_omega + 1.0));
    return lm;
  }

  int order() const { return order_; }

  /// Observed event types: every training word plus the end marker.
  std::vector<std::string> event_vocab() const {
    std::vector<std::string> out{kEosText};
    out.insert(out.end(), id_to_word_.begin(), id_to_word_.end());
    return out;
  }

  /// Natural-log p(word | context), longest matching suffix with ARPA
  /// backoff semantics. Unknown words score the fixed floor.
  double cond_logprob(const std::vector<std::string>& context,
                      const std::string& word) const {
    int wid = token_id(word);
    if (wid < kFirstWord && wid != kEos) return log_floor_;
    std::vector<int> ctx;
    size_t take = std::min(context.size(), static_cast<size_t>(order_ - 1));
    for (size_t i = context.size() - take; i < context.size(); ++i)
      ctx.push_back(token_id(context[i]));
    // an unknown context token blocks any longer match
    for (size_t i = ctx.size(); i-- > 0;)
      if (ctx[i] < 0) {
        ctx.erase(ctx.begin(), ctx.begin() + static_cast<long>(i) + 1);
        break;
      }
    double acc = 0.0;
    for (size_t start = 0; start <= ctx.size(); ++start) {
      std::vector<int> key(ctx.begin() + static_cast<long>(start), ctx.end());
      key.push_back(wid);
      const auto& table = tables_[key.size() - 1];
      auto it = table.find(key);
      if (it != table.end()) return acc + it->second.logp;
      key.pop_back();  // the current context; add its backoff and shorten
      acc += context_bow(key);
    }
    // a known word always has a unigram entry; only EOS-free degenerate
    // corpora could reach here
    return log_floor_;
  }

  /// Sum of conditional logs over the tokens and the end marker, with
  /// boundary padding on the left.
  double sentence_logprob(const std::vector<std::string>& tokens) const {
    std::vector<std::string> history(static_cast<size_t>(order_ - 1),
                                     kBosText);
    double total = 0.0;
    for (const std::string& t : tokens) {
      total += cond_logprob(history, t);
      history.push_back(t);
    }
    total += cond_logprob(history, kEosText);
    return total;
  }

  double log_floor() const { return log_floor_; }

  void save(const std::string& path) const {
    BinWriter w(path);
    w.bytes("NKLM", 4);
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(order_));
    w.u64(id_to_word_.size());
    for (const std::string& s : id_to_word_) w.str(s);
    w.f64(log_floor_);
    w.f64(log_gamma_empty_);
    w.f64_array(bos_bow_);
    for (int k = 1; k <= order_; ++k) {
      const auto& table = tables_[static_cast<size_t>(k - 1)];
      w.u64(table.size());
      for (const auto& [key, e] : table) {
        for (int id : key) w.u32(static_cast<std::uint32_t>(id));
        w.f64(e.logp);
        w.u8(e.has_bow ? 1 : 0);
        w.f64(e.bow);
      }
    }
    w.close();
  }

  static KnLm load(const std::string& path) {
    BinReader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "NKLM")
      throw DataError("not a language model file: " + path);
    if (r.u32() != 1) throw DataError("unsupported lm version in " + path);
    KnLm lm;
    lm.order_ = static_cast<int>(r.u32());
    if (lm.order_ < 1 || lm.order_ > 16)
      throw DataError("implausible lm order in " + path);
    std::uint64_t words = r.u64();
    for (std::uint64_t i = 0; i < words; ++i) lm.intern(r.str());
    lm.log_floor_ = r.f64();
    lm.log_gamma_empty_ = r.f64();
    lm.bos_bow_ = r.f64_array();
    lm.tables_.resize(static_cast<size_t>(lm.order_));
    for (int k = 1; k <= lm.order_; ++k) {
      std::uint64_t n = r.u64();
      auto& table = lm.tables_[static_cast<size_t>(k - 1)];
      auto hint = table.end();
      for (std::uint64_t i = 0; i < n; ++i) {
        std::vector<int> key(static_cast<size_t>(k));
        for (int& id : key) id = static_cast<int>(r.u32());
        Entry e;
        e.logp = r.f64();
        e.has_bow = r.u8() != 0;
        e.bow = r.f64();
        hint = table.emplace_hint(hint, std::move(key), e);
      }
    }
    return lm;
  }

  /// Text export for inspection, log10 probabilities.
  void export_arpa(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    constexpr double kLn10 = 2.302585092994046;
    out << "\\data\\\n";
    for (int k = 1; k <= order_; ++k)
      out << "ngram " << k << "="
          << tables_[static_cast<size_t>(k - 1)].size() + (k < order_ ? 1 : 0)
          << "\n";
    for (int k = 1; k <= order_; ++k) {
      out << "\n\\" << k << "-grams:\n";
      if (k < order_) {
        // boundary context row
        out << "-99";
        for (int i = 0; i < k; ++i) out << (i ? " " : "\t") << kBosText;
        out << "\t" << bos_bow_[static_cast<size_t>(k - 1)] / kLn10 << "\n";
      }
      for (const auto& [key, e] : tables_[static_cast<size_t>(k - 1)]) {
        out << e.logp / kLn10 << "\t";
        for (size_t i = 0; i < key.size(); ++i)
          out << (i ? " " : "") << token_text(key[i]);
        if (e.has_bow) out << "\t" << e.bow / kLn10;
        out << "\n";
      }
    }
    out << "\n\\end\\\n";
    if (!out) throw DataError("write failed: " + path);
  }

 private:
  struct Entry {
    double logp = 0.0;
    double bow = 0.0;
    bool has_bow = false;
  };

  int order_ = 0;
  std::unordered_map<std::string, int> word_to_id_;
  std::vector<std::string> id_to_word_;  // id = index + kFirstWord
  std::vector<std::map<std::vector<int>, Entry>> tables_;
  std::vector<double> bos_bow_;  // all-boundary contexts, length 1..order-1
  double log_gamma_empty_ = 0.0;
  double log_floor_ = 0.0;

  static std::map<std::vector<int>, Entry>& tables_at(KnLm& lm, int k) {
    return lm.tables_[static_cast<size_t>(k - 1)];
  }

  int intern(const std::string& w) {
    if (w == kBosText) return kBos;
    if (w == kEosText) return kEos;
    auto it = word_to_id_.find(w);
    if (it != word_to_id_.end()) return it->second;
    int id = kFirstWord + static_cast<int>(id_to_word_.size());
    id_to_word_.push_back(w);
    word_to_id_[w] = id;
    return id;
  }

  int token_id(const std::string& w) const {
    if (w == kBosText) return kBos;
    if (w == kEosText) return kEos;
    auto it = word_to_id_.find(w);
    return it == word_to_id_.end() ? -1 : it->second;
  }

  const std::string& token_text(int id) const {
    static const std::string bos = kBosText, eos = kEosText;
    if (id == kBos) return bos;
    if (id == kEos) return eos;
    return id_to_word_[static_cast<size_t>(id - kFirstWord)];
  }

  double context_bow(const std::vector<int>& ctx) const {
    if (ctx.empty()) return 0.0;
    if (std::all_of(ctx.begin(), ctx.end(),
                    [](int t) { return t == kBos; }))
      return bos_bow_[ctx.size() - 1];
    const auto& table = tables_[ctx.size() - 1];
    auto it = table.find(ctx);
    if (it != table.end() && it->second.has_bow) return it->second.bow;
    return 0.0;
  }
};

// ---- n-best candidates and reranking ----

struct Candidate {
  std::vector<std::string> tokens;
  double nn_logprob = 0.0;
};

inline double rerank_score(const Candidate& c, const KnLm& lm, double lambda) {
  return c.nn_logprob + lambda * lm.sentence_logprob(c.tokens);
}

/// Sorted copy by s = logP_NN + lambda * logP_LM, descending. Ties fall
/// back to the neural score, then to the token sequence, so the result
/// never depends on input order.
inline std::vector<Candidate> rerank(const std::vector<Candidate>& cands,
                                     const KnLm& lm, double lambda) {
  if (lambda < 0.0) throw UsageError("rerank lambda must be nonnegative");
  std::vector<std::pair<double, size_t>> keyed;
  keyed.reserve(cands.size());
  for (size_t i = 0; i < cands.size(); ++i)
    keyed.emplace_back(rerank_score(cands[i], lm, lambda), i);
  std::sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    const Candidate& ca = cands[a.second];
    const Candidate& cb = cands[b.second];
    if (ca.nn_logprob != cb.nn_logprob) return ca.nn_logprob > cb.nn_logprob;
    return ca.tokens < cb.tokens;
  });
  std::vector<Candidate> out;
  out.reserve(cands.size());
  for (const auto& [score, i] : keyed) out.push_back(cands[i]);
  return out;
}

/// Grid search for the interpolation weight: the lambda whose reranked
/// 1-best maximizes corpus F_beta, ties to the smallest value.
inline double tune_lambda(
    const std::vector<std::vector<Candidate>>& nbest_per_sentence,
    const M2Document& gold, const std::vector<double>& grid, const KnLm& lm,
    double beta = 0.5) {
  if (grid.empty()) throw UsageError("lambda grid is empty");
  if (nbest_per_sentence.size() != gold.size())
    throw DataError("n-best list count does not match gold sentence count");
  for (const auto& cands : nbest_per_sentence)
    if (cands.empty())
      throw DataError("a sentence has an empty n-best list");
  // lm scores do not depend on lambda; cache them
  std::vector<std::vector<double>> lm_scores;
  for (const auto& cands : nbest_per_sentence) {
    std::vector<double> row;
    row.reserve(cands.size());
    for (const Candidate& c : cands)
      row.push_back(lm.sentence_logprob(c.tokens));
    lm_scores.push_back(std::move(row));
  }
  double best_lambda = grid[0];
  double best_f = -1.0;
  for (double lambda : grid) {
    if (lambda < 0.0) throw UsageError("lambda grid values must be nonnegative");
    std::vector<std::vector<std::string>> outputs;
    for (size_t s = 0; s < nbest_per_sentence.size(); ++s) {
      const auto& cands = nbest_per_sentence[s];
      size_t best_i = 0;
      for (size_t i = 1; i < cands.size(); ++i) {
        double si = cands[i].nn_logprob + lambda * lm_scores[s][i];
        double sb = cands[best_i].nn_logprob + lambda * lm_scores[s][best_i];
        if (si > sb ||
            (si == sb && (cands[i].nn_logprob > cands[best_i].nn_logprob ||
                          (cands[i].nn_logprob == cands[best_i].nn_logprob &&
                           cands[i].tokens < cands[best_i].tokens))))
          best_i = i;
      }
      outputs.push_back(cands[best_i].tokens);
    }
    double f = score_m2(outputs, gold, beta).f;
    if (f > best_f) {
      best_f = f;
      best_lambda = lambda;
    }
  }
  return best_lambda;
}

/// The default search grid: 0.0 to 2.0 in steps of 0.1.
inline std::vector<double> default_lambda_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 20; ++i) g.push_back(i / 10.0);
  return g;
}

// ---- n-best file format: "index ||| tokens ||| nn_logprob" ----

inline void write_nbest(const std::vector<std::vector<Candidate>>& nbest,
                        const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  char buf[64];
  for (size_t s = 0; s < nbest.size(); ++s)
    for (const Candidate& c : nbest[s]) {
      std::snprintf(buf, sizeof(buf), "%.17g", c.nn_logprob);
      out << s << " ||| " << join_tokens(c.tokens) << " ||| " << buf << "\n";
    }
  if (!out) throw DataError("write failed: " + path);
}

inline std::vector<std::vector<Candidate>> read_nbest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open n-best file: " + path);
  std::vector<std::vector<Candidate>> nbest;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields = detail::split_on(line, " ||| ");
    if (fields.size() != 3)
      throw DataError("expected 3 ||| fields at line " +
                      std::to_string(line_no) + " of " + path);
    size_t idx = 0;
    try {
      size_t used = 0;
      idx = std::stoul(fields[0], &used);
      if (used != fields[0].size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw DataError("bad sentence index at line " + std::to_string(line_no) +
                      " of " + path);
    }
    Candidate c;
    if (!fields[1].empty()) c.tokens = split_tokens(fields[1], line_no);
    try {
      size_t used = 0;
      c.nn_logprob = std::stod(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw DataError("bad log-probability at line " +
                      std::to_string(line_no) + " of " + path);
    }
    if (idx >= nbest.size()) nbest.resize(idx + 1);
    nbest[idx].push_back(std::move(c));
  }
  for (size_t s = 0; s < nbest.size(); ++s)
    if (nbest[s].empty())
      throw DataError("n-best file is missing sentence " + std::to_string(s));
  return nbest;
}

}  // namespace emend
