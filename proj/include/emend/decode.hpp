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

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "emend/corpus.hpp"
#include "emend/hybrid.hpp"
#include "emend/model.hpp"
#include "emend/tensor.hpp"

// Inference: word-level beam search, per-UNK character beam search for
// the hybrid variants, and attention-guided UNK replacement through a
// correction lexicon for the word-level baseline.

namespace emend {

struct DecodeConfig {
  int beam = 12;
  int char_beam = 10;
  int max_chars = 30;       // per generated word
  double max_len_ratio = 1.5;
  int max_len_extra = 5;
  bool length_normalize = false;  // rank by log-prob per emitted token
};

inline int max_decode_length(int src_tokens, const DecodeConfig& cfg = {}) {
  int n = static_cast<int>(cfg.max_len_ratio * src_tokens) + cfg.max_len_extra;
  return std::max(1, n);
}

/// One emitted UNK inside a hypothesis. The tensors are handles into
/// the decoding tape and stay usable only while that tape lives; the
/// character decoder consumes them to build its initial state.
struct UnkSite {
  int step = 0;        // index into the emitted token sequence
  int src_pos = 0;     // attention argmax at that step
  std::string generated;      // character decode result, empty until run
  double char_logprob = 0.0;  // log-prob of the generated sequence
  Tensor context, dstate;     // word-decoder c_s and d_s at the step
};

struct Hypothesis {
  std::vector<int> tokens;  // emitted ids, EOS last iff complete
  double logprob = 0.0;     // sum of per-step word log-probs
  std::vector<std::vector<float>> attention;  // one row per step
  std::vector<UnkSite> unks;
  bool complete = false;
  double char_logprob = 0.0;  // sum over UNK sites

  double total_logprob() const { return logprob + char_logprob; }
};

namespace detail {

inline void utf8_append(std::string& out, char32_t c) {
  if (c < 0x80) {
    out += static_cast<char>(c);
  } else if (c < 0x800) {
    out += static_cast<char>(0xC0 | (c >> 6));
    out += static_cast<char>(0x80 | (c & 0x3F));
  } else if (c < 0x10000) {
    out += static_cast<char>(0xE0 | (c >> 12));
    out += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (c & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (c >> 18));
    out += static_cast<char>(0x80 | ((c >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (c & 0x3F));
  }
}

}  // namespace detail

/// Length-synchronous beam over the word decoder. Candidates never
/// include PAD or BOS; a hypothesis that emits EOS retires into the
/// completed pool and frees its slot. Returns up to `beam` completed
/// hypotheses sorted by total log-probability, or, when nothing
/// completes within max_len, the single best incomplete one flagged
/// via Hypothesis::complete.
inline std::vector<Hypothesis> beam_search_words(Tape& tape,
                                                 const ModelParams& mp,
                                                 const EncoderStates& enc,
                                                 int beam, int max_len,
                                                 bool length_normalize = false) {
  if (beam < 1) throw UsageError("beam width must be positive");
  if (max_len < 1) throw UsageError("max decode length must be positive");

  struct Entry {
    Hypothesis hyp;
    Tensor state;  // combined state feeding the next step
    int prev = Vocabulary::kBos;
  };
  auto rank = [&](double lp, size_t len) {
    return length_normalize ? lp / static_cast<double>(len) : lp;
  };

  std::vector<Entry> live(1);
  live[0].state = mp.dec_init;
  std::vector<Hypothesis> done;

  for (int len = 1; len <= max_len && !live.empty(); ++len) {
    std::vector<DecodeStep> steps(live.size());
    struct Cand {
      size_t parent;
      int tok;
      double lp;
    };
    std::vector<Cand> cands;
    cands.reserve(live.size() * static_cast<size_t>(mp.dims.tgt_vocab));
    for (size_t i = 0; i < live.size(); ++i) {
      steps[i] = decode_step(tape, mp, live[i].state,
                             tape.row(mp.tgt_embed, live[i].prev), enc);
      const std::vector<float>& lp = tape.log_softmax(steps[i].logits).value();
      for (int tok = 0; tok < mp.dims.tgt_vocab; ++tok) {
        if (tok == Vocabulary::kPad || tok == Vocabulary::kBos) continue;
        cands.push_back({i, tok, live[i].hyp.logprob + lp[static_cast<size_t>(tok)]});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
      return rank(a.lp, static_cast<size_t>(len)) > rank(b.lp, static_cast<size_t>(len));
    });
    if (cands.size() > static_cast<size_t>(beam))
      cands.resize(static_cast<size_t>(beam));

    std::vector<Entry> next;
    next.reserve(cands.size());
    for (const Cand& c : cands) {
      const DecodeStep& st = steps[c.parent];
      Entry e;
      e.hyp = live[c.parent].hyp;
      e.hyp.tokens.push_back(c.tok);
      e.hyp.logprob = c.lp;
      e.hyp.attention.push_back(st.attention.weights.value());
      if (c.tok == Vocabulary::kUnk) {
        UnkSite site;
        site.step = len - 1;
        site.src_pos = hard_attention_index(st.attention.weights);
        site.context = st.attention.context;
        site.dstate = st.d;
        e.hyp.unks.push_back(std::move(site));
      }
      if (c.tok == Vocabulary::kEos) {
        e.hyp.complete = true;
        done.push_back(std::move(e.hyp));
      } else {
        e.state = st.combined;
        e.prev = c.tok;
        next.push_back(std::move(e));
      }
    }
    live = std::move(next);
  }

  if (done.empty()) {
    // Nothing finished: surface the best partial hypothesis, flagged.
    if (live.empty()) throw Error("beam search produced no hypotheses");
    size_t best = 0;
    for (size_t i = 1; i < live.size(); ++i)
      if (rank(live[i].hyp.logprob, live[i].hyp.tokens.size()) >
          rank(live[best].hyp.logprob, live[best].hyp.tokens.size()))
        best = i;
    return {std::move(live[best].hyp)};
  }
  std::stable_sort(done.begin(), done.end(),
                   [&](const Hypothesis& a, const Hypothesis& b) {
                     return rank(a.logprob, a.tokens.size()) >
                            rank(b.logprob, b.tokens.size());
                   });
  if (done.size() > static_cast<size_t>(beam))
    done.resize(static_cast<size_t>(beam));
  return done;
}

/// Teacher-forces `tokens` through the word decoder and accumulates the
/// per-step log-probabilities; mirrors the arithmetic beam search uses
/// to score its hypotheses.
inline double replay_logprob(Tape& tape, const ModelParams& mp,
                             const EncoderStates& enc,
                             const std::vector<int>& tokens) {
  Tensor state = mp.dec_init;
  int prev = Vocabulary::kBos;
  double total = 0.0;
  for (int tok : tokens) {
    DecodeStep st =
        decode_step(tape, mp, state, tape.row(mp.tgt_embed, prev), enc);
    total += tape.log_softmax(st.logits).value()[static_cast<size_t>(tok)];
    state = st.combined;
    prev = tok;
  }
  return total;
}

struct CharDecodeResult {
  std::string text;       // rendered characters, EOW excluded
  std::vector<int> ids;   // character ids behind `text`
  double logprob = 0.0;   // includes the terminating EOW step
  bool complete = false;  // ended with EOW within the cap
};

/// Beam over character steps from the separate-path initial state.
/// Passing source character states selects the nested recurrence;
/// null selects the basic one. PAD, BOW, and UNK never appear in the
/// output (they have no surface form); EOW terminates a hypothesis.
/// An empty result string signals the caller to copy the source word.
inline CharDecodeResult beam_search_chars(
    Tape& tape, const ModelParams& mp, Tensor init_state,
    const std::vector<Tensor>* source_char_states, const CharVocabulary& cv,
    int beam, int max_chars) {
  if (beam < 1) throw UsageError("char beam width must be positive");
  if (max_chars < 1) throw UsageError("char length cap must be positive");
  if (!init_state.defined())
    throw Error("beam_search_chars: undefined initial state");

  struct Entry {
    std::vector<int> ids;
    double lp = 0.0;
    Tensor state;
    int prev = CharVocabulary::kBow;
  };
  std::vector<Entry> live(1);
  live[0].state = init_state;
  std::vector<Entry> done;

  for (int n = 1; n <= max_chars && !live.empty(); ++n) {
    struct Cand {
      size_t parent;
      int tok;
      double lp;
    };
    std::vector<Cand> cands;
    std::vector<Tensor> nexts(live.size());
    for (size_t i = 0; i < live.size(); ++i) {
      CharStep st =
          source_char_states
              ? char_decode_step_nested(tape, mp, live[i].state, live[i].prev,
                                        *source_char_states)
              : char_decode_step_basic(tape, mp, live[i].state, live[i].prev);
      nexts[i] = source_char_states ? st.combined : st.state;
      const std::vector<float>& lp = tape.log_softmax(st.logits).value();
      for (int tok = 0; tok < cv.size(); ++tok) {
        if (tok == CharVocabulary::kPad || tok == CharVocabulary::kBow ||
            tok == CharVocabulary::kUnk)
          continue;
        cands.push_back({i, tok, live[i].lp + lp[static_cast<size_t>(tok)]});
      }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Cand& a, const Cand& b) { return a.lp > b.lp; });
    if (cands.size() > static_cast<size_t>(beam))
      cands.resize(static_cast<size_t>(beam));

    std::vector<Entry> next;
    next.reserve(cands.size());
    for (const Cand& c : cands) {
      Entry e;
      e.ids = live[c.parent].ids;
      e.lp = c.lp;
      if (c.tok == CharVocabulary::kEow) {
        done.push_back(std::move(e));
      } else {
        e.ids.push_back(c.tok);
        e.state = nexts[c.parent];
        e.prev = c.tok;
        next.push_back(std::move(e));
      }
    }
    live = std::move(next);
  }

  const Entry* pick = nullptr;
  bool complete = false;
  for (const Entry& e : done)
    if (!pick || e.lp > pick->lp) pick = &e, complete = true;
  if (!pick)  // nothing reached EOW: fall back to the best prefix
    for (const Entry& e : live)
      if (!pick || e.lp > pick->lp) pick = &e;
  CharDecodeResult res;
  if (!pick) return res;
  res.ids = pick->ids;
  res.logprob = pick->lp;
  res.complete = complete;
  for (int id : res.ids) detail::utf8_append(res.text, cv.character(id));
  return res;
}

// ---- correction lexicon and UNK replacement ----

struct CorrectionLexicon {
  // source word -> corrections sorted by descending probability
  std::map<std::string, std::vector<std::pair<std::string, double>>> entries;

  const std::vector<std::pair<std::string, double>>* find(
      const std::string& w) const {
    auto it = entries.find(w);
    return it == entries.end() || it->second.empty() ? nullptr : &it->second;
  }
};

/// Counts aligned source/target word pairs over the corpus. Alignment
/// is greedy and order-preserving: identical tokens anchor first, then
/// the gap segments between anchors pair up position by position;
/// leftover tokens in longer segments stay unaligned.
inline CorrectionLexicon build_correction_lexicon(
    const std::vector<SentencePair>& pairs) {
  std::map<std::string, std::map<std::string, double>> counts;
  for (const SentencePair& p : pairs) {
    std::vector<std::pair<size_t, size_t>> anchors;
    size_t j0 = 0;
    for (size_t i = 0; i < p.source.size(); ++i)
      for (size_t j = j0; j < p.target.size(); ++j)
        if (p.source[i] == p.target[j]) {
          anchors.emplace_back(i, j);
          j0 = j + 1;
          break;
        }
    anchors.emplace_back(p.source.size(), p.target.size());  // sentinel
    size_t pi = 0, pj = 0;
    for (const auto& [ai, aj] : anchors) {
      size_t gap = std::min(ai - pi, aj - pj);
      for (size_t k = 0; k < gap; ++k)
        counts[p.source[pi + k]][p.target[pj + k]] += 1.0;
      if (ai < p.source.size()) counts[p.source[ai]][p.target[aj]] += 1.0;
      pi = ai + 1;
      pj = aj + 1;
    }
  }
  CorrectionLexicon lex;
  for (const auto& [src, tgts] : counts) {
    double total = 0.0;
    for (const auto& [t, c] : tgts) total += c;
    std::vector<std::pair<std::string, double>> ranked;
    for (const auto& [t, c] : tgts) ranked.emplace_back(t, c / total);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    lex.entries[src] = std::move(ranked);
  }
  return lex;
}

/// Baseline UNK post-processing: each UNK aligns to the source position
/// with maximal attention at its step and takes the lexicon's best
/// correction for that source word, or the source word itself when the
/// lexicon has none. Other tokens render from the target vocabulary;
/// the terminating EOS is dropped.
inline std::vector<std::string> unk_replace(
    const Hypothesis& hyp, const std::vector<std::string>& src_tokens,
    const Vocabulary& tgt_vocab, const CorrectionLexicon& lexicon) {
  std::vector<std::string> out;
  size_t next_site = 0;
  for (size_t s = 0; s < hyp.tokens.size(); ++s) {
    int id = hyp.tokens[s];
    if (id == Vocabulary::kEos) continue;
    if (id != Vocabulary::kUnk) {
      out.push_back(tgt_vocab.word(id));
      continue;
    }
    int z;
    if (next_site < hyp.unks.size() &&
        hyp.unks[next_site].step == static_cast<int>(s)) {
      z = hyp.unks[next_site].src_pos;
      ++next_site;
    } else {
      // Hypothesis built without recorded sites: rederive from the row.
      if (s >= hyp.attention.size())
        throw Error("unk_replace: hypothesis carries no attention row");
      const std::vector<float>& row = hyp.attention[s];
      z = 0;
      for (size_t k = 1; k < row.size(); ++k)
        if (row[k] > row[static_cast<size_t>(z)]) z = static_cast<int>(k);
    }
    if (z < 0 || static_cast<size_t>(z) >= src_tokens.size())
      throw Error("unk_replace: aligned position outside the source");
    const std::string& src = src_tokens[static_cast<size_t>(z)];
    const auto* ranked = lexicon.find(src);
    out.push_back(ranked ? (*ranked)[0].first : src);
  }
  return out;
}

// ---- whole-sentence decoding ----

/// Source-only batch for inference; target fields stay empty.
inline Batch encode_sources(const std::vector<std::vector<std::string>>& sources,
                            const Vocabulary& src_vocab,
                            const CharVocabulary& cv) {
  if (sources.empty()) throw DataError("cannot decode an empty batch");
  Batch b;
  b.size = static_cast<int>(sources.size());
  for (const auto& s : sources) {
    if (s.empty()) throw DataError("cannot decode an empty sentence");
    b.src_len = std::max(b.src_len, static_cast<int>(s.size()));
  }
  for (const auto& s : sources) {
    b.src_ids.emplace_back();
    b.src_oov.emplace_back();
    b.src_chars.emplace_back();
    std::vector<int>& ids = b.src_ids.back();
    std::vector<char>& oov = b.src_oov.back();
    ids.assign(static_cast<size_t>(b.src_len), Vocabulary::kPad);
    oov.assign(static_cast<size_t>(b.src_len), 0);
    for (size_t i = 0; i < s.size(); ++i) {
      int id = src_vocab.id(s[i]);
      ids[i] = id;
      if (id == Vocabulary::kUnk) {
        oov[i] = 1;
        b.src_chars.back()[static_cast<int>(i)] = cv.encode_word(s[i]);
      }
    }
    b.src_n.push_back(static_cast<int>(s.size()));
    b.src_surface.push_back(s);
  }
  return b;
}

struct DecodedCandidate {
  Hypothesis hyp;
  std::vector<std::string> tokens;  // final surface form, EOS dropped
  double nn_logprob = 0.0;          // word log-prob plus char log-probs
};

struct SentenceDecode {
  std::vector<DecodedCandidate> nbest;  // word-beam order; [0] is emitted
};

/// Runs the full two-stage decode for one batch row: word beam first,
/// then one character beam per UNK site (hybrid variants) or lexicon
/// replacement (baseline). Character scores extend nn_logprob but never
/// reorder the word-level beam.
inline SentenceDecode decode_sentence(const ModelParams& mp, const Batch& batch,
                                      int row, ModelVariant variant,
                                      const Vocabulary& tgt_vocab,
                                      const CharVocabulary& cv,
                                      const CorrectionLexicon* lexicon,
                                      const DecodeConfig& cfg = {}) {
  if (variant == ModelVariant::kBaseline && !lexicon)
    throw UsageError("baseline decoding needs a correction lexicon");
  Tape tape;
  tape.grad_enabled = false;
  ForwardOpts opts;
  opts.variant = variant;
  EncoderStates enc = encode_source(tape, mp, batch, row, opts);
  int max_len =
      max_decode_length(batch.src_n[static_cast<size_t>(row)], cfg);
  std::vector<Hypothesis> hyps = beam_search_words(
      tape, mp, enc, cfg.beam, max_len, cfg.length_normalize);

  const std::vector<std::string>& src =
      batch.src_surface[static_cast<size_t>(row)];
  SentenceDecode out;
  for (Hypothesis& h : hyps) {
    if (variant != ModelVariant::kBaseline) {
      for (UnkSite& site : h.unks) {
        bool src_unknown =
            batch.src_oov[static_cast<size_t>(row)]
                         [static_cast<size_t>(site.src_pos)] != 0;
        const std::vector<Tensor>* scs =
            variant == ModelVariant::kNested && src_unknown
                ? &enc.char_states[static_cast<size_t>(site.src_pos)]
                : nullptr;
        Tensor init = separate_path_init(tape, mp, site.context, site.dstate);
        CharDecodeResult r = beam_search_chars(tape, mp, init, scs, cv,
                                               cfg.char_beam, cfg.max_chars);
        site.generated = r.text.empty()
                             ? src[static_cast<size_t>(site.src_pos)]
                             : r.text;
        site.char_logprob = r.logprob;
        h.char_logprob += r.logprob;
      }
    }
    DecodedCandidate cand;
    if (variant == ModelVariant::kBaseline) {
      cand.tokens = unk_replace(h, src, tgt_vocab, *lexicon);
    } else {
      size_t next_site = 0;
      for (size_t s = 0; s < h.tokens.size(); ++s) {
        int id = h.tokens[s];
        if (id == Vocabulary::kEos) continue;
        if (id == Vocabulary::kUnk) {
          cand.tokens.push_back(h.unks[next_site].generated);
          ++next_site;
        } else {
          cand.tokens.push_back(tgt_vocab.word(id));
        }
      }
    }
    cand.nn_logprob = h.total_logprob();
    cand.hyp = std::move(h);
    out.nbest.push_back(std::move(cand));
  }
  return out;
}

// ---- n-best file format ----

struct NbestLine {
  int index = 0;  // source sentence index
  std::vector<std::string> tokens;
  double nn_logprob = 0.0;
};

inline void write_nbest(std::ostream& out, int index,
                        const SentenceDecode& dec) {
  for (const DecodedCandidate& c : dec.nbest) {
    out << index << " ||| ";
    for (size_t i = 0; i < c.tokens.size(); ++i) {
      if (i) out << ' ';
      out << c.tokens[i];
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", c.nn_logprob);
    out << " ||| " << buf << '\n';
  }
}

inline std::vector<NbestLine> read_nbest(std::istream& in) {
  std::vector<NbestLine> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields = detail::split_on(line, " ||| ");
    if (fields.size() != 3)
      throw DataError("n-best line " + std::to_string(lineno) +
                      ": expected 3 fields");
    NbestLine nl;
    try {
      nl.index = std::stoi(fields[0]);
      nl.nn_logprob = std::stod(fields[2]);
    } catch (const std::exception&) {
      throw DataError("n-best line " + std::to_string(lineno) +
                      ": malformed number");
    }
    for (const std::string& t : detail::split_on(fields[1], " "))
      if (!t.empty()) nl.tokens.push_back(t);
    out.push_back(std::move(nl));
  }
  return out;
}

}  // namespace emend
