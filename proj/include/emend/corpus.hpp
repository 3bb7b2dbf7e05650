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
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "emend/tensor.hpp"
#include "emend/utf8.hpp"

// Parallel-corpus ingestion, word and character vocabularies, batch
// encoding with character views at OOV positions, and M2 gold-edit
// parsing.

namespace emend {

struct SentencePair {
  std::vector<std::string> source;
  std::vector<std::string> target;
};

inline std::vector<std::string> split_tokens(const std::string& line,
                                             size_t line_no) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i <= line.size()) {
    size_t j = line.find(' ', i);
    if (j == std::string::npos) j = line.size();
    if (j == i)
      throw DataError("empty token (stray space) at line " +
                      std::to_string(line_no));
    out.push_back(line.substr(i, j - i));
    i = j + 1;
    if (j == line.size()) break;
  }
  return out;
}

/// One pair per line, single TAB between source and target, tokens
/// separated by single spaces. With the filter on, drops pairs where
/// either side exceeds 100 tokens or the target has fewer than half as
/// many tokens as the source.
inline std::vector<SentencePair> load_parallel_corpus(const std::string& path,
                                                      bool filter) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file: " + path);
  std::vector<SentencePair> pairs;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    utf8_decode(line);  // validates encoding
    size_t tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw DataError("expected exactly one TAB at line " +
                      std::to_string(line_no) + " of " + path);
    SentencePair p;
    p.source = split_tokens(line.substr(0, tab), line_no);
    p.target = split_tokens(line.substr(tab + 1), line_no);
    if (filter) {
      size_t s = p.source.size(), t = p.target.size();
      if (s > 100 || t > 100) continue;
      if (2 * t < s) continue;
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

/// Frequency-ranked word->id map. Ids 0..3 are reserved; corpus words
/// start at 4 in rank order (most frequent first, ties broken by first
/// corpus appearance).
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kReserved = 4;

  Vocabulary() : id_to_word_{"<pad>", "<unk>", "<bos>", "<eos>"} {}

  int add(const std::string& w) {
    auto it = word_to_id_.find(w);
    if (it != word_to_id_.end()) return it->second;
    int id = static_cast<int>(id_to_word_.size());
    id_to_word_.push_back(w);
    word_to_id_[w] = id;
    return id;
  }

  int id(const std::string& w) const {
    auto it = word_to_id_.find(w);
    return it == word_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& w) const { return word_to_id_.count(w) != 0; }

  const std::string& word(int id) const {
    if (id < 0 || id >= static_cast<int>(id_to_word_.size()))
      throw Error("word id out of range");
    return id_to_word_[static_cast<size_t>(id)];
  }

  int size() const { return static_cast<int>(id_to_word_.size()); }

  const std::vector<std::string>& words() const { return id_to_word_; }

 private:
  std::unordered_map<std::string, int> word_to_id_;
  std::vector<std::string> id_to_word_;
};

/// Character (code point) vocabulary with PAD and UNK plus word-boundary
/// framing symbols BOW/EOW.
class CharVocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBow = 2;
  static constexpr int kEow = 3;
  static constexpr int kReserved = 4;

  int add(char32_t c) {
    auto it = char_to_id_.find(c);
    if (it != char_to_id_.end()) return it->second;
    int id = static_cast<int>(kReserved + id_to_char_.size());
    id_to_char_.push_back(c);
    char_to_id_[c] = id;
    return id;
  }

  int id(char32_t c) const {
    auto it = char_to_id_.find(c);
    return it == char_to_id_.end() ? kUnk : it->second;
  }

  char32_t character(int id) const {
    if (id < kReserved ||
        id >= kReserved + static_cast<int>(id_to_char_.size()))
      throw Error("char id out of range");
    return id_to_char_[static_cast<size_t>(id - kReserved)];
  }

  int size() const { return kReserved + static_cast<int>(id_to_char_.size()); }

  const std::vector<char32_t>& chars() const { return id_to_char_; }

  /// [BOW, chars..., EOW]
  std::vector<int> encode_word(const std::string& w) const {
    std::vector<int> out{kBow};
    for (char32_t c : utf8_decode(w)) out.push_back(id(c));
    out.push_back(kEow);
    return out;
  }

  /// Inverse of encode_word; framing and PAD skipped, UNK renders U+FFFD.
  std::string decode_view(const std::vector<int>& view) const {
    std::string out;
    for (int id : view) {
      if (id == kBow || id == kEow || id == kPad) continue;
      utf8_append(out, id == kUnk ? char32_t{0xFFFD} : character(id));
    }
    return out;
  }

 private:
  std::map<char32_t, int> char_to_id_;
  std::vector<char32_t> id_to_char_;
};

enum class VocabMode { kCombined, kSeparate };

struct VocabSet {
  Vocabulary source;
  Vocabulary target;
  CharVocabulary chars;
};

namespace detail {

inline Vocabulary rank_words(
    const std::vector<std::string>& stream_order,
    const std::unordered_map<std::string, long long>& counts, int k) {
  // stream_order holds each distinct word once, at first appearance
  std::vector<std::pair<long long, int>> ranked;  // (count, first-appearance)
  ranked.reserve(stream_order.size());
  for (size_t i = 0; i < stream_order.size(); ++i)
    ranked.emplace_back(counts.at(stream_order[i]), static_cast<int>(i));
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  Vocabulary v;
  int keep = std::min<int>(k, static_cast<int>(ranked.size()));
  for (int i = 0; i < keep; ++i)
    v.add(stream_order[static_cast<size_t>(ranked[static_cast<size_t>(i)].second)]);
  return v;
}

inline void tally(const std::vector<std::string>& toks,
                  std::unordered_map<std::string, long long>& counts,
                  std::vector<std::string>& order) {
  for (const std::string& t : toks) {
    auto [it, fresh] = counts.try_emplace(t, 0);
    if (fresh) order.push_back(t);
    ++it->second;
  }
}

}  // namespace detail

/// Builds word vocabularies of size at most K (plus reserved ids) and
/// the character vocabulary over every character on either side.
/// Combined mode ranks by pooled source+target frequency and uses one
/// shared word list; separate mode ranks each side independently.
inline VocabSet build_vocab(const std::vector<SentencePair>& pairs, int k,
                            VocabMode mode) {
  if (pairs.empty()) throw DataError("cannot build vocabulary: empty corpus");
  if (k < 1) throw UsageError("vocabulary size must be at least 1");
  VocabSet vs;
  if (mode == VocabMode::kCombined) {
    std::unordered_map<std::string, long long> counts;
    std::vector<std::string> order;
    for (const SentencePair& p : pairs) {
      detail::tally(p.source, counts, order);
      detail::tally(p.target, counts, order);
    }
    vs.source = detail::rank_words(order, counts, k);
    vs.target = vs.source;
  } else {
    std::unordered_map<std::string, long long> src_counts, tgt_counts;
    std::vector<std::string> src_order, tgt_order;
    for (const SentencePair& p : pairs) {
      detail::tally(p.source, src_counts, src_order);
      detail::tally(p.target, tgt_counts, tgt_order);
    }
    vs.source = detail::rank_words(src_order, src_counts, k);
    vs.target = detail::rank_words(tgt_order, tgt_counts, k);
  }
  for (const SentencePair& p : pairs) {
    for (const std::string& t : p.source)
      for (char32_t c : utf8_decode(t)) vs.chars.add(c);
    for (const std::string& t : p.target)
      for (char32_t c : utf8_decode(t)) vs.chars.add(c);
  }
  return vs;
}

struct Batch {
  int size = 0;     // sentences
  int src_len = 0;  // padded source length
  int tgt_len = 0;  // padded target length
  std::vector<std::vector<int>> src_ids;  // [size][src_len], PAD-filled
  std::vector<std::vector<int>> tgt_ids;  // [size][tgt_len], PAD-filled
  std::vector<int> src_n, tgt_n;          // unpadded lengths
  std::vector<std::vector<char>> src_oov, tgt_oov;  // flags, padded false
  // position -> BOW..EOW char-id sequence; keys are exactly the OOV positions
  std::vector<std::map<int, std::vector<int>>> src_chars, tgt_chars;
  std::vector<std::vector<std::string>> src_surface, tgt_surface;
};

/// Encodes the given pairs as one batch: word ids (UNK at OOV), OOV
/// flags, character views exactly at OOV positions, right-padding to the
/// longest sentence on each side.
inline Batch encode_batch(const std::vector<SentencePair>& pairs,
                          const Vocabulary& src_vocab,
                          const Vocabulary& tgt_vocab,
                          const CharVocabulary& cv) {
  if (pairs.empty()) throw DataError("cannot encode an empty batch");
  Batch b;
  b.size = static_cast<int>(pairs.size());
  for (const SentencePair& p : pairs) {
    if (p.source.empty() || p.target.empty())
      throw DataError("cannot encode a pair with an empty side");
    b.src_len = std::max(b.src_len, static_cast<int>(p.source.size()));
    b.tgt_len = std::max(b.tgt_len, static_cast<int>(p.target.size()));
  }
  auto encode_side = [&](const std::vector<std::string>& toks,
                         const Vocabulary& vocab, int padded,
                         std::vector<int>& ids, std::vector<char>& oov,
                         std::map<int, std::vector<int>>& views) {
    ids.assign(static_cast<size_t>(padded), Vocabulary::kPad);
    oov.assign(static_cast<size_t>(padded), 0);
    for (size_t i = 0; i < toks.size(); ++i) {
      int id = vocab.id(toks[i]);
      ids[i] = id;
      if (id == Vocabulary::kUnk) {
        oov[i] = 1;
        views[static_cast<int>(i)] = cv.encode_word(toks[i]);
      }
    }
  };
  for (const SentencePair& p : pairs) {
    b.src_ids.emplace_back();
    b.tgt_ids.emplace_back();
    b.src_oov.emplace_back();
    b.tgt_oov.emplace_back();
    b.src_chars.emplace_back();
    b.tgt_chars.emplace_back();
    encode_side(p.source, src_vocab, b.src_len, b.src_ids.back(),
                b.src_oov.back(), b.src_chars.back());
    encode_side(p.target, tgt_vocab, b.tgt_len, b.tgt_ids.back(),
                b.tgt_oov.back(), b.tgt_chars.back());
    b.src_n.push_back(static_cast<int>(p.source.size()));
    b.tgt_n.push_back(static_cast<int>(p.target.size()));
    b.src_surface.push_back(p.source);
    b.tgt_surface.push_back(p.target);
  }
  return b;
}

// ---- M2 gold files ----

/// Minimal span replacement: tokens [start,end) of the source become
/// `replacement` (possibly empty).
struct Edit {
  int start = 0;
  int end = 0;
  std::vector<std::string> replacement;
  std::string type;

  friend bool operator==(const Edit& a, const Edit& b) {
    return a.start == b.start && a.end == b.end &&
           a.replacement == b.replacement && a.type == b.type;
  }
};

struct M2Sentence {
  std::vector<std::string> tokens;
  // annotator id -> that annotator's edit set (may be empty)
  std::map<int, std::vector<Edit>> annotators;
};

using M2Document = std::vector<M2Sentence>;

namespace detail {

inline std::vector<std::string> split_on(const std::string& s,
                                         const std::string& sep) {
  std::vector<std::string> out;
  size_t i = 0;
  while (true) {
    size_t j = s.find(sep, i);
    if (j == std::string::npos) {
      out.push_back(s.substr(i));
      break;
    }
    out.push_back(s.substr(i, j - i));
    i = j + sep.size();
  }
  return out;
}

inline void finish_m2_sentence(M2Sentence& sent, M2Document& doc) {
  if (sent.tokens.empty()) return;
  if (sent.annotators.empty()) sent.annotators[0] = {};
  for (auto& [annot, edits] : sent.annotators) {
    std::sort(edits.begin(), edits.end(), [](const Edit& a, const Edit& b) {
      if (a.start != b.start) return a.start < b.start;
      return a.end < b.end;
    });
    for (size_t i = 1; i < edits.size(); ++i)
      if (edits[i - 1].end > edits[i].start)
        throw DataError("overlapping gold edits for annotator " +
                        std::to_string(annot));
  }
  doc.push_back(std::move(sent));
  sent = M2Sentence{};
}

}  // namespace detail

/// Parses the shared-task M2 format: "S <tokens>" then "A start
/// end|||type|||correction|||required|||comment|||annotator" lines,
/// blank line between sentences. "noop" A-lines register the annotator
/// with an empty edit set.
inline M2Document parse_m2(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open m2 file: " + path);
  M2Document doc;
  M2Sentence cur;
  std::string line;
  size_t line_no = 0;
  bool have_s = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      detail::finish_m2_sentence(cur, doc);
      have_s = false;
      continue;
    }
    utf8_decode(line);
    if (line.rfind("S ", 0) == 0) {
      detail::finish_m2_sentence(cur, doc);
      cur.tokens = split_tokens(line.substr(2), line_no);
      have_s = true;
    } else if (line.rfind("A ", 0) == 0) {
      if (!have_s)
        throw DataError("A line before any S line at line " +
                        std::to_string(line_no) + " of " + path);
      std::vector<std::string> fields = detail::split_on(line.substr(2), "|||");
      if (fields.size() != 6)
        throw DataError("expected 6 ||| fields at line " +
                        std::to_string(line_no) + " of " + path);
      std::istringstream span(fields[0]);
      int start, end;
      if (!(span >> start >> end) || !(span >> std::ws).eof())
        throw DataError("bad edit span at line " + std::to_string(line_no) +
                        " of " + path);
      int annot = 0;
      try {
        size_t used = 0;
        annot = std::stoi(fields[5], &used);
        if (used != fields[5].size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw DataError("bad annotator id at line " + std::to_string(line_no) +
                        " of " + path);
      }
      if (fields[1] == "noop") {
        cur.annotators.try_emplace(annot);
        continue;
      }
      int n = static_cast<int>(cur.tokens.size());
      if (start < 0 || end < start || end > n)
        throw DataError("edit span out of bounds at line " +
                        std::to_string(line_no) + " of " + path);
      Edit e;
      e.start = start;
      e.end = end;
      e.type = fields[1];
      if (!fields[2].empty() && fields[2] != "-NONE-")
        e.replacement = detail::split_on(fields[2], " ");
      cur.annotators[annot].push_back(std::move(e));
    } else {
      throw DataError("unrecognized m2 line " + std::to_string(line_no) +
                      " of " + path);
    }
  }
  detail::finish_m2_sentence(cur, doc);
  return doc;
}

// ---- vocabulary file format ----

inline void save_vocab(const VocabSet& vs, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  auto words = [&](const Vocabulary& v, const char* section) {
    out << section << ' ' << (v.size() - Vocabulary::kReserved) << '\n';
    for (int i = Vocabulary::kReserved; i < v.size(); ++i)
      out << v.word(i) << '\n';
  };
  out << "emend-vocab 1\n";
  words(vs.source, "source-words");
  words(vs.target, "target-words");
  out << "chars " << (vs.chars.size() - CharVocabulary::kReserved) << '\n';
  for (char32_t c : vs.chars.chars()) {
    std::string enc;
    utf8_append(enc, c);
    out << enc << '\n';
  }
  if (!out) throw DataError("write failed: " + path);
}

inline VocabSet load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocab file: " + path);
  std::string line;
  auto next_line = [&]() -> std::string {
    if (!std::getline(in, line)) throw DataError("truncated vocab file: " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };
  auto section = [&](const std::string& name) -> long long {
    std::istringstream is(next_line());
    std::string got;
    long long n = -1;
    is >> got >> n;
    if (got != name || n < 0)
      throw DataError("expected '" + name + " <count>' in " + path);
    return n;
  };
  if (next_line() != "emend-vocab 1")
    throw DataError("not a vocab file (bad header): " + path);
  VocabSet vs;
  long long ns = section("source-words");
  for (long long i = 0; i < ns; ++i) vs.source.add(next_line());
  long long nt = section("target-words");
  for (long long i = 0; i < nt; ++i) vs.target.add(next_line());
  long long nc = section("chars");
  for (long long i = 0; i < nc; ++i) {
    std::vector<char32_t> cps = utf8_decode(next_line());
    if (cps.size() != 1) throw DataError("bad character entry in " + path);
    vs.chars.add(cps[0]);
  }
  return vs;
}

}  // namespace emend
