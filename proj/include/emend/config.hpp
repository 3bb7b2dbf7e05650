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

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "emend/corpus.hpp"
#include "emend/decode.hpp"
#include "emend/trainer.hpp"

namespace emend {

/// Every tunable a run can resolve from three layers: built-in
/// defaults, then a key=value config file, then command-line flags.
/// Paths are not part of this set; they are flag-only.
struct RunConfig {
  TrainConfig train;
  DecodeConfig decode;
  VocabMode vocab_mode = VocabMode::kCombined;
  int max_iters = 2000;   // total training iterations
  int lr_sample = 64;     // held-out pairs probed every 100 iterations
  double lambda = 0.0;    // language-model interpolation weight
  int lm_order = 5;
  int workers = 1;        // decode/score worker threads
  int nbest = 0;          // candidates kept per sentence; 0 = full beam
  bool filter = true;     // drop degenerate pairs when loading corpora
};

namespace detail {

inline long long parse_int_value(const std::string& key,
                                 const std::string& value) {
  try {
    size_t used = 0;
    long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "' needs an integer, got '" +
                     value + "'");
  }
}

inline double parse_real_value(const std::string& key,
                               const std::string& value) {
  try {
    size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "' needs a number, got '" + value +
                     "'");
  }
}

inline bool parse_bool_value(const std::string& key,
                             const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw UsageError("config key '" + key + "' needs true or false, got '" +
                   value + "'");
}

}  // namespace detail

/// Applies one key=value assignment. Unknown keys are rejected by
/// name; values are type-checked but range validation waits until the
/// whole config is resolved.
inline void apply_config_entry(RunConfig& rc, const std::string& key,
                               const std::string& value) {
  auto as_int = [&]() {
    long long v = detail::parse_int_value(key, value);
    if (v < -(1LL << 31) || v > (1LL << 31) - 1)
      throw UsageError("config key '" + key + "' value out of range");
    return static_cast<int>(v);
  };
  auto as_real = [&]() { return detail::parse_real_value(key, value); };
  auto as_bool = [&]() { return detail::parse_bool_value(key, value); };

  if (key == "batch") rc.train.batch = as_int();
  else if (key == "lr") rc.train.lr = as_real();
  else if (key == "decay") rc.train.decay = as_real();
  else if (key == "clip") rc.train.clip = as_real();
  else if (key == "dropout") rc.train.dropout = static_cast<float>(as_real());
  else if (key == "alpha") rc.train.alpha = as_real();
  else if (key == "beta") rc.train.beta = as_real();
  else if (key == "val-interval") rc.train.val_interval = as_int();
  else if (key == "ckpt-interval") rc.train.ckpt_interval = as_int();
  else if (key == "seed") {
    long long v = detail::parse_int_value(key, value);
    if (v < 0) throw UsageError("config key 'seed' must be nonnegative");
    rc.train.seed = static_cast<std::uint64_t>(v);
  } else if (key == "embed") rc.train.embed = as_int();
  else if (key == "hidden") rc.train.hidden = as_int();
  else if (key == "char-embed") rc.train.char_embed = as_int();
  else if (key == "char-hidden") rc.train.char_hidden = as_int();
  else if (key == "vocab-size") rc.train.vocab_k = as_int();
  else if (key == "optimizer") rc.train.optimizer = parse_optimizer(value);
  else if (key == "variant") rc.train.variant = parse_variant(value);
  else if (key == "vocab-mode") {
    if (value == "combined") rc.vocab_mode = VocabMode::kCombined;
    else if (value == "separate") rc.vocab_mode = VocabMode::kSeparate;
    else throw UsageError("config key 'vocab-mode' must be combined or separate");
  } else if (key == "beam") rc.decode.beam = as_int();
  else if (key == "char-beam") rc.decode.char_beam = as_int();
  else if (key == "max-chars") rc.decode.max_chars = as_int();
  else if (key == "max-len-ratio") rc.decode.max_len_ratio = as_real();
  else if (key == "max-len-extra") rc.decode.max_len_extra = as_int();
  else if (key == "length-normalize") rc.decode.length_normalize = as_bool();
  else if (key == "max-iters") rc.max_iters = as_int();
  else if (key == "lr-sample") rc.lr_sample = as_int();
  else if (key == "lambda") rc.lambda = as_real();
  else if (key == "lm-order") rc.lm_order = as_int();
  else if (key == "workers") rc.workers = as_int();
  else if (key == "nbest") rc.nbest = as_int();
  else if (key == "filter") rc.filter = as_bool();
  else throw UsageError("unknown config key '" + key + "'");
}

/// Reads a key=value config file: one assignment per line, '#' starts
/// a comment, blank lines ignored. Returns assignments in file order.
inline std::vector<std::pair<std::string, std::string>> read_config_file(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open config file: " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  size_t lineno = 0;
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return std::string();
    size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::string body = trim(line);
    if (body.empty()) continue;
    size_t eq = body.find('=');
    if (eq == std::string::npos)
      throw DataError("config line " + std::to_string(lineno) + " of " + path +
                      " is not key=value");
    std::string key = trim(body.substr(0, eq));
    std::string value = trim(body.substr(eq + 1));
    if (key.empty())
      throw DataError("config line " + std::to_string(lineno) + " of " + path +
                      " has an empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

/// Range checks spanning the whole resolved config. Train-side fields
/// reuse the trainer's validation.
inline void validate_run_config(const RunConfig& rc) {
  validate_config(rc.train);
  if (rc.decode.beam < 1 || rc.decode.char_beam < 1)
    throw UsageError("beam sizes must be positive");
  if (rc.decode.max_chars < 1)
    throw UsageError("max-chars must be positive");
  if (rc.decode.max_len_ratio <= 0.0)
    throw UsageError("max-len-ratio must be positive");
  if (rc.decode.max_len_extra < 0)
    throw UsageError("max-len-extra must be nonnegative");
  if (rc.max_iters < 1) throw UsageError("max-iters must be positive");
  if (rc.lr_sample < 1) throw UsageError("lr-sample must be positive");
  if (rc.lambda < 0.0) throw UsageError("lambda must be nonnegative");
  if (rc.lm_order < 1) throw UsageError("lm-order must be positive");
  if (rc.workers < 1) throw UsageError("workers must be positive");
  if (rc.nbest < 0) throw UsageError("nbest must be nonnegative");
}

/// Layered resolution: the base (usually defaults), then the file (may
/// be absent), then explicit overrides, each later layer winning. Keys
/// assigned by file or override are reported through seen_keys so
/// callers can tell a default apart from an explicit choice. The
/// result is range validated before it is returned.
inline RunConfig resolve_config(
    const std::string& config_path,
    const std::vector<std::pair<std::string, std::string>>& overrides,
    std::set<std::string>* seen_keys = nullptr,
    const RunConfig& base = RunConfig()) {
  RunConfig rc = base;
  if (!config_path.empty())
    for (const auto& [k, v] : read_config_file(config_path)) {
      apply_config_entry(rc, k, v);
      if (seen_keys) seen_keys->insert(k);
    }
  for (const auto& [k, v] : overrides) {
    apply_config_entry(rc, k, v);
    if (seen_keys) seen_keys->insert(k);
  }
  validate_run_config(rc);
  return rc;
}

/// One line per key, fixed order, exactly the keys the parser accepts.
/// Echoed at startup so every run records its resolved settings.
inline std::string format_run_config(const RunConfig& rc) {
  std::ostringstream out;
  auto real = [](double v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  out << "batch=" << rc.train.batch << '\n'
      << "lr=" << real(rc.train.lr) << '\n'
      << "decay=" << real(rc.train.decay) << '\n'
      << "clip=" << real(rc.train.clip) << '\n'
      << "dropout=" << real(rc.train.dropout) << '\n'
      << "alpha=" << real(rc.train.alpha) << '\n'
      << "beta=" << real(rc.train.beta) << '\n'
      << "val-interval=" << rc.train.val_interval << '\n'
      << "ckpt-interval=" << rc.train.ckpt_interval << '\n'
      << "seed=" << rc.train.seed << '\n'
      << "embed=" << rc.train.embed << '\n'
      << "hidden=" << rc.train.hidden << '\n'
      << "char-embed=" << rc.train.char_embed << '\n'
      << "char-hidden=" << rc.train.char_hidden << '\n'
      << "vocab-size=" << rc.train.vocab_k << '\n'
      << "optimizer=" << optimizer_name(rc.train.optimizer) << '\n'
      << "variant=" << variant_name(rc.train.variant) << '\n'
      << "vocab-mode="
      << (rc.vocab_mode == VocabMode::kCombined ? "combined" : "separate")
      << '\n'
      << "beam=" << rc.decode.beam << '\n'
      << "char-beam=" << rc.decode.char_beam << '\n'
      << "max-chars=" << rc.decode.max_chars << '\n'
      << "max-len-ratio=" << real(rc.decode.max_len_ratio) << '\n'
      << "max-len-extra=" << rc.decode.max_len_extra << '\n'
      << "length-normalize=" << (rc.decode.length_normalize ? "true" : "false")
      << '\n'
      << "max-iters=" << rc.max_iters << '\n'
      << "lr-sample=" << rc.lr_sample << '\n'
      << "lambda=" << real(rc.lambda) << '\n'
      << "lm-order=" << rc.lm_order << '\n'
      << "workers=" << rc.workers << '\n'
      << "nbest=" << rc.nbest << '\n'
      << "filter=" << (rc.filter ? "true" : "false") << '\n';
  return out.str();
}

/// Model dimensions implied by a train config and a built vocabulary.
inline ModelDims dims_from(const TrainConfig& tc, const VocabSet& vs) {
  ModelDims d;
  d.src_vocab = vs.source.size();
  d.tgt_vocab = vs.target.size();
  d.char_vocab = vs.chars.size();
  d.embed = tc.embed;
  d.hidden = tc.hidden;
  d.char_embed = tc.char_embed;
  d.char_hidden = tc.char_hidden;
  return d;
}

}  // namespace emend
