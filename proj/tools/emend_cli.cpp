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

// Command-line pipeline: build-vocab | train | decode | train-lm |
// rerank | score | analyze. Stages hand data to each other through
// files only, so each one is testable and idempotent on its inputs.
// Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "emend/config.hpp"
#include "emend/decode.hpp"
#include "emend/eval.hpp"
#include "emend/lm.hpp"
#include "emend/trainer.hpp"

namespace fs = std::filesystem;
using namespace emend;

namespace {

// Registers tunables as string-valued flags and reports back only the
// ones the user actually passed, so flag > file > default resolution
// can funnel everything through one parser.
class FlagSet {
 public:
  void add(CLI::App* cmd, const std::string& key, const std::string& help) {
    slots_.push_back(std::make_unique<Slot>());
    Slot& s = *slots_.back();
    s.key = key;
    s.opt = cmd->add_option("--" + key, s.value, help);
  }
  std::vector<std::pair<std::string, std::string>> overrides() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& s : slots_)
      if (s->opt->count()) out.emplace_back(s->key, s->value);
    return out;
  }

 private:
  struct Slot {
    std::string key, value;
    CLI::Option* opt = nullptr;
  };
  std::vector<std::unique_ptr<Slot>> slots_;
};

void echo_config(const std::string& sub, const RunConfig& rc) {
  std::cerr << "emend " << sub << "\n" << format_run_config(rc);
}

std::string real_str(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

/// One tokenized sentence per line; an empty line is an empty sentence.
std::vector<std::vector<std::string>> read_token_lines(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open text file: " + path);
  std::vector<std::vector<std::string>> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty())
      out.emplace_back();
    else
      out.push_back(split_tokens(line, lineno));
  }
  return out;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << content;
  if (!out) throw DataError("write failed: " + path);
}

std::vector<double> parse_grid(const std::string& spec) {
  std::vector<double> g;
  for (const std::string& part : detail::split_on(spec, ",")) {
    try {
      size_t used = 0;
      double v = std::stod(part, &used);
      if (used != part.size()) throw std::invalid_argument("");
      g.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("bad lambda grid entry: '" + part + "'");
    }
  }
  return g;
}

/// Decodes every batch row, optionally on a worker pool. Rows are
/// independent, so results match the single-threaded order exactly.
std::vector<SentenceDecode> decode_all(const ModelParams& mp,
                                       const Batch& batch,
                                       ModelVariant variant,
                                       const VocabSet& vs,
                                       const CorrectionLexicon* lex,
                                       const DecodeConfig& dc, int workers) {
  int n = batch.size;
  std::vector<SentenceDecode> out(static_cast<size_t>(n));
  auto one = [&](int r) {
    out[static_cast<size_t>(r)] =
        decode_sentence(mp, batch, r, variant, vs.target, vs.chars, lex, dc);
  };
  if (workers <= 1 || n <= 1) {
    for (int r = 0; r < n; ++r) one(r);
    return out;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto work = [&]() {
    try {
      for (;;) {
        int r = next.fetch_add(1);
        if (r >= n) return;
        one(r);
      }
    } catch (...) {
      std::lock_guard<std::mutex> g(err_mu);
      if (!err) err = std::current_exception();
      next.store(n);
    }
  };
  std::vector<std::thread> pool;
  int nt = std::min(workers, n);
  for (int i = 0; i < nt; ++i) pool.emplace_back(work);
  for (std::thread& t : pool) t.join();
  if (err) std::rethrow_exception(err);
  return out;
}

std::vector<std::vector<std::string>> top_tokens(
    const std::vector<SentenceDecode>& res) {
  std::vector<std::vector<std::string>> outs;
  outs.reserve(res.size());
  for (const SentenceDecode& d : res) outs.push_back(d.nbest[0].tokens);
  return outs;
}

// ---- subcommands ----

struct CommonArgs {
  std::string config;
  FlagSet flags;
};

void run_build_vocab(const CommonArgs& common, const std::string& corpus,
                     const std::string& out) {
  RunConfig rc = resolve_config(common.config, common.flags.overrides());
  echo_config("build-vocab", rc);
  std::vector<SentencePair> pairs = load_parallel_corpus(corpus, rc.filter);
  VocabSet vs = build_vocab(pairs, rc.train.vocab_k, rc.vocab_mode);
  save_vocab(vs, out);
  std::cerr << "vocab: source=" << vs.source.size()
            << " target=" << vs.target.size() << " chars=" << vs.chars.size()
            << " (" << pairs.size() << " pairs)\n";
}

struct TrainArgs {
  CommonArgs common;
  std::string corpus, val, vocab, out_dir, init, dev_src, dev_gold;
};

double dev_fscore(const ModelParams& mp, const VocabSet& vs,
                  const RunConfig& rc,
                  const std::vector<std::vector<std::string>>& dev_src,
                  const M2Document& gold, const CorrectionLexicon* lex) {
  Batch b = encode_sources(dev_src, vs.source, vs.chars);
  std::vector<SentenceDecode> res =
      decode_all(mp, b, rc.train.variant, vs, lex, rc.decode, rc.workers);
  return score_m2(top_tokens(res), gold).f;
}

void run_train(const TrainArgs& a) {
  if (a.dev_src.empty() != a.dev_gold.empty())
    throw UsageError("--dev-src and --dev-gold go together");

  // A resume starts from the checkpoint's recorded config; file and
  // flags still override it.
  RunConfig base;
  Checkpoint init_ck;
  bool resuming = !a.init.empty();
  if (resuming) {
    init_ck = load_checkpoint(a.init);
    base.train = init_ck.config;
  }
  RunConfig rc = resolve_config(a.common.config, a.common.flags.overrides(),
                                nullptr, base);
  echo_config("train", rc);

  std::vector<SentencePair> pairs = load_parallel_corpus(a.corpus, rc.filter);
  if (pairs.empty())
    throw DataError("training corpus is empty after filtering: " + a.corpus);
  std::vector<SentencePair> val = load_parallel_corpus(a.val, rc.filter);
  if (val.empty())
    throw DataError("validation set is empty after filtering: " + a.val);
  VocabSet vs = load_vocab(a.vocab);
  ModelDims dims = dims_from(rc.train, vs);

  ModelParams mp = resuming ? params_from_checkpoint(init_ck)
                            : init_params(dims, rc.train.seed);
  if (resuming &&
      (mp.dims.src_vocab != dims.src_vocab ||
       mp.dims.tgt_vocab != dims.tgt_vocab ||
       mp.dims.char_vocab != dims.char_vocab || mp.dims.embed != dims.embed ||
       mp.dims.hidden != dims.hidden || mp.dims.ce() != dims.ce() ||
       mp.dims.ch() != dims.ch()))
    throw DataError("checkpoint dimensions disagree with the resolved config");

  OptState opt;
  long long iter = 0;
  std::vector<double> history;
  double lr = rc.train.lr;
  if (resuming) {
    opt = std::move(init_ck.opt);
    iter = init_ck.iteration;
    history = init_ck.val_history;
    // Replay the decay decisions the original run made, one per sample.
    for (size_t i = 1; i <= history.size(); ++i) {
      std::vector<double> prefix(history.begin(),
                                 history.begin() + static_cast<long>(i));
      lr = lr_schedule_update(prefix, lr, rc.train.decay);
    }
  }

  fs::create_directories(a.out_dir);
  write_text_file(a.out_dir + "/config.txt", format_run_config(rc));

  // Fixed held-out mini-sample probed every 100 iterations to drive
  // the decay rule; the full validation set is scored at val-interval.
  size_t mini_n = std::min(val.size(), static_cast<size_t>(rc.lr_sample));
  std::vector<SentencePair> mini(val.begin(),
                                 val.begin() + static_cast<long>(mini_n));

  size_t bpe = (pairs.size() + static_cast<size_t>(rc.train.batch) - 1) /
               static_cast<size_t>(rc.train.batch);
  auto ckpt_path = [&](long long it) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt-%08lld.bin", it);
    return a.out_dir + "/" + buf;
  };
  auto save_at = [&](long long it) {
    save_checkpoint(mp, opt, it, history, rc.train, ckpt_path(it));
    std::cerr << "checkpoint iter=" << it << "\n";
  };

  long long target = rc.max_iters;
  for (long long epoch = iter / static_cast<long long>(bpe); iter < target;
       ++epoch) {
    std::vector<std::vector<size_t>> batches =
        epoch_batches(pairs.size(), rc.train.batch, rc.train.seed, epoch);
    size_t k0 = static_cast<size_t>(iter % static_cast<long long>(bpe));
    for (size_t k = k0; k < batches.size() && iter < target; ++k) {
      std::vector<SentencePair> slice;
      slice.reserve(batches[k].size());
      for (size_t idx : batches[k]) slice.push_back(pairs[idx]);
      Batch enc = encode_batch(slice, vs.source, vs.target, vs.chars);
      StepResult res = train_step(mp, opt, enc, rc.train, lr, iter);
      ++iter;
      if (iter % 100 == 0) {
        history.push_back(validation_loss(mp, mini, vs.source, vs.target,
                                          vs.chars, rc.train));
        lr = lr_schedule_update(history, lr, rc.train.decay);
      }
      if (iter % rc.train.val_interval == 0) {
        double v = validation_loss(mp, val, vs.source, vs.target, vs.chars,
                                   rc.train);
        std::cerr << "iter=" << iter << " loss=" << real_str(res.total)
                  << " val_loss=" << real_str(v) << " lr=" << real_str(lr)
                  << "\n";
      }
      if (iter % rc.train.ckpt_interval == 0) save_at(iter);
    }
    // Epoch end (or the iteration budget) also checkpoints, unless
    // this iteration was just saved by the interval rule.
    if (iter % rc.train.ckpt_interval != 0) save_at(iter);
  }

  // Selection rescans the directory so checkpoints from an interrupted
  // earlier run still compete.
  std::vector<std::string> files;
  for (const fs::directory_entry& e : fs::directory_iterator(a.out_dir)) {
    std::string name = e.path().filename().string();
    if (name.rfind("ckpt-", 0) == 0 && name.size() > 9 &&
        name.compare(name.size() - 4, 4, ".bin") == 0)
      files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    save_at(iter);
    files.push_back(ckpt_path(iter));
  }

  bool have_dev = !a.dev_src.empty();
  std::vector<std::vector<std::string>> dev_sources;
  M2Document dev_doc;
  CorrectionLexicon lex;
  const CorrectionLexicon* lexp = nullptr;
  if (have_dev) {
    dev_sources = read_token_lines(a.dev_src);
    dev_doc = parse_m2(a.dev_gold);
    if (rc.train.variant == ModelVariant::kBaseline) {
      lex = build_correction_lexicon(pairs);
      lexp = &lex;
    }
  }
  std::vector<CheckpointScore> scores;
  for (const std::string& f : files) {
    Checkpoint ck = load_checkpoint(f);
    ModelParams cand = params_from_checkpoint(ck);
    CheckpointScore s;
    s.iteration = ck.iteration;
    s.val_loss =
        validation_loss(cand, val, vs.source, vs.target, vs.chars, rc.train);
    // Without a dev set the F-score slot mirrors the validation loss,
    // which makes the two-stage choice collapse to "lowest loss".
    s.dev_f = have_dev ? dev_fscore(cand, vs, rc, dev_sources, dev_doc, lexp)
                       : -s.val_loss;
    scores.push_back(s);
    std::cerr << "candidate iter=" << s.iteration
              << " val_loss=" << real_str(s.val_loss);
    if (have_dev) std::cerr << " dev_f=" << real_str(s.dev_f);
    std::cerr << "\n";
  }
  size_t chosen = select_model(scores);
  fs::copy_file(files[chosen], a.out_dir + "/model.bin",
                fs::copy_options::overwrite_existing);
  std::cerr << "selected iter=" << scores[chosen].iteration << " -> "
            << a.out_dir << "/model.bin\n";
}

struct DecodeArgs {
  CommonArgs common;
  std::string model, vocab, input, out, nbest_out, lexicon_corpus;
};

void run_decode(const DecodeArgs& a) {
  std::set<std::string> seen;
  RunConfig rc = resolve_config(a.common.config, a.common.flags.overrides(),
                                &seen);
  Checkpoint ck = load_checkpoint(a.model);
  // The checkpoint knows which variant it was trained as; an explicit
  // key (file or flag) still wins.
  if (!seen.count("variant")) rc.train.variant = ck.config.variant;
  echo_config("decode", rc);

  VocabSet vs = load_vocab(a.vocab);
  if (ck.dims.src_vocab != vs.source.size() ||
      ck.dims.tgt_vocab != vs.target.size() ||
      ck.dims.char_vocab != vs.chars.size())
    throw DataError("vocabulary does not match the checkpoint dimensions");
  ModelParams mp = params_from_checkpoint(ck);

  std::vector<std::vector<std::string>> sources = read_token_lines(a.input);
  Batch batch = encode_sources(sources, vs.source, vs.chars);

  CorrectionLexicon lex;
  const CorrectionLexicon* lexp = nullptr;
  if (rc.train.variant == ModelVariant::kBaseline && a.lexicon_corpus.empty())
    throw UsageError("baseline decoding needs --lexicon-corpus");
  if (!a.lexicon_corpus.empty()) {
    lex = build_correction_lexicon(
        load_parallel_corpus(a.lexicon_corpus, rc.filter));
    lexp = &lex;
  }

  std::vector<SentenceDecode> res = decode_all(
      mp, batch, rc.train.variant, vs, lexp, rc.decode, rc.workers);

  std::ostringstream hyp;
  for (const SentenceDecode& d : res)
    hyp << join_tokens(d.nbest[0].tokens) << '\n';
  write_text_file(a.out, hyp.str());

  if (!a.nbest_out.empty()) {
    std::ofstream nb(a.nbest_out, std::ios::binary);
    if (!nb) throw DataError("cannot open for writing: " + a.nbest_out);
    for (size_t i = 0; i < res.size(); ++i) {
      size_t limit = res[i].nbest.size();
      if (rc.nbest > 0) limit = std::min(limit, static_cast<size_t>(rc.nbest));
      SentenceDecode head;
      head.nbest.assign(res[i].nbest.begin(),
                        res[i].nbest.begin() + static_cast<long>(limit));
      write_nbest(nb, static_cast<int>(i), head);
    }
    if (!nb) throw DataError("write failed: " + a.nbest_out);
  }
  std::cerr << "decoded " << res.size() << " sentences -> " << a.out << "\n";
}

void run_train_lm(const CommonArgs& common, const std::string& corpus,
                  const std::string& out, const std::string& arpa) {
  RunConfig rc = resolve_config(common.config, common.flags.overrides());
  echo_config("train-lm", rc);
  std::vector<std::vector<std::string>> sentences;
  for (std::vector<std::string>& s : read_token_lines(corpus))
    if (!s.empty()) sentences.push_back(std::move(s));
  KnLm lm = KnLm::train(sentences, rc.lm_order);
  lm.save(out);
  if (!arpa.empty()) lm.export_arpa(arpa);
  std::cerr << "lm: order=" << rc.lm_order << " sentences="
            << sentences.size() << " -> " << out << "\n";
}

struct RerankArgs {
  CommonArgs common;
  std::string nbest, lm, out, gold, grid;
  bool tune = false;
};

void run_rerank(const RerankArgs& a) {
  RunConfig rc = resolve_config(a.common.config, a.common.flags.overrides());
  echo_config("rerank", rc);
  std::vector<std::vector<Candidate>> nbest = read_nbest(a.nbest);
  KnLm lm = KnLm::load(a.lm);
  double lambda = rc.lambda;
  if (a.tune) {
    if (a.gold.empty()) throw UsageError("--tune needs --gold");
    M2Document gold = parse_m2(a.gold);
    std::vector<double> grid =
        a.grid.empty() ? default_lambda_grid() : parse_grid(a.grid);
    lambda = tune_lambda(nbest, gold, grid, lm);
    std::cout << "tuned-lambda=" << real_str(lambda) << "\n";
  }
  std::ostringstream out;
  for (const std::vector<Candidate>& cands : nbest)
    out << join_tokens(rerank(cands, lm, lambda)[0].tokens) << '\n';
  if (!a.out.empty())
    write_text_file(a.out, out.str());
  else
    std::cout << out.str();
  std::cerr << "reranked " << nbest.size() << " sentences (lambda="
            << real_str(lambda) << ")\n";
}

void run_score(const CommonArgs& common, const std::string& hyp,
               const std::string& gold_path, const std::string& out) {
  RunConfig rc = resolve_config(common.config, common.flags.overrides());
  echo_config("score", rc);
  std::vector<std::vector<std::string>> outputs = read_token_lines(hyp);
  M2Document gold = parse_m2(gold_path);
  std::string report = format_score_report(score_m2(outputs, gold));
  std::cout << report;
  if (!out.empty()) write_text_file(out, report);
}

struct AnalyzeArgs {
  CommonArgs common;
  std::string hyp, gold, src, vocab, out;
  std::string segment = "all", portion = "all";
};

void run_analyze(const AnalyzeArgs& a) {
  RunConfig rc = resolve_config(a.common.config, a.common.flags.overrides());
  echo_config("analyze", rc);
  if (a.segment != "oov" && a.segment != "nonoov" && a.segment != "all")
    throw UsageError("--segment must be oov, nonoov, or all");
  if (a.portion != "small" && a.portion != "large" && a.portion != "all")
    throw UsageError("--portion must be small, large, or all");

  std::vector<std::vector<std::string>> outputs = read_token_lines(a.hyp);
  M2Document gold = parse_m2(a.gold);
  std::vector<std::vector<std::string>> sources = read_token_lines(a.src);
  if (sources.size() != gold.size())
    throw DataError("source count does not match gold sentence count");
  VocabSet vs = load_vocab(a.vocab);

  std::string rep = format_score_report(score_m2(outputs, gold), "overall");

  std::vector<char> oov = segment_oov(sources, vs.source);
  std::vector<char> nonoov(oov.size());
  for (size_t i = 0; i < oov.size(); ++i) nonoov[i] = oov[i] ? 0 : 1;
  if (a.segment == "oov" || a.segment == "all")
    rep += "\n" + format_score_report(
                      score_m2_filtered(outputs, gold, nullptr, oov),
                      "segment=OOV");
  if (a.segment == "nonoov" || a.segment == "all")
    rep += "\n" + format_score_report(
                      score_m2_filtered(outputs, gold, nullptr, nonoov),
                      "segment=NonOOV");

  auto keep_small = [](const std::vector<std::string>& src, const Edit& e) {
    return classify_edit_small(src, e);
  };
  auto keep_large = [](const std::vector<std::string>& src, const Edit& e) {
    return !classify_edit_small(src, e);
  };
  if (a.portion == "small" || a.portion == "all")
    rep += "\n" + format_score_report(
                      score_m2_filtered(outputs, gold, keep_small),
                      "portion=small");
  if (a.portion == "large" || a.portion == "all")
    rep += "\n" + format_score_report(
                      score_m2_filtered(outputs, gold, keep_large),
                      "portion=large");

  std::cout << rep;
  if (!a.out.empty()) write_text_file(a.out, rep);
}

void add_common(CLI::App* cmd, CommonArgs& c) {
  cmd->add_option("--config", c.config, "key=value config file");
  c.flags.add(cmd, "seed", "run seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "word/character sequence-to-sequence grammatical error correction"};
  app.require_subcommand(1);

  // build-vocab
  CommonArgs bv_common;
  std::string bv_corpus, bv_out;
  CLI::App* bv = app.add_subcommand(
      "build-vocab", "build word and character vocabularies from a corpus");
  add_common(bv, bv_common);
  bv->add_option("--corpus", bv_corpus, "TAB-separated parallel corpus")
      ->required();
  bv->add_option("--out", bv_out, "vocabulary file to write")->required();
  bv_common.flags.add(bv, "vocab-size", "word vocabulary size");
  bv_common.flags.add(bv, "vocab-mode", "combined or separate word lists");
  bv_common.flags.add(bv, "filter", "true/false: drop degenerate pairs");
  bv->callback([&] { run_build_vocab(bv_common, bv_corpus, bv_out); });

  // train
  TrainArgs tr;
  CLI::App* tn = app.add_subcommand("train", "train a model");
  add_common(tn, tr.common);
  tn->add_option("--corpus", tr.corpus, "TAB-separated training corpus")
      ->required();
  tn->add_option("--val", tr.val, "TAB-separated validation corpus")
      ->required();
  tn->add_option("--vocab", tr.vocab, "vocabulary file from build-vocab")
      ->required();
  tn->add_option("--out", tr.out_dir, "output directory for checkpoints")
      ->required();
  tn->add_option("--init", tr.init, "checkpoint to resume from");
  tn->add_option("--dev-src", tr.dev_src, "dev source sentences (one/line)");
  tn->add_option("--dev-gold", tr.dev_gold, "dev gold edits (M2 format)");
  for (const char* key :
       {"batch", "lr", "decay", "clip", "dropout", "alpha", "beta",
        "val-interval", "ckpt-interval", "embed", "hidden", "char-embed",
        "char-hidden", "optimizer", "variant", "max-iters", "lr-sample",
        "filter", "beam", "char-beam", "max-chars", "max-len-ratio",
        "max-len-extra", "length-normalize", "workers"})
    tr.common.flags.add(tn, key, "see README: config keys");
  tn->callback([&] { run_train(tr); });

  // decode
  DecodeArgs dc;
  CLI::App* de = app.add_subcommand("decode", "correct sentences with a model");
  add_common(de, dc.common);
  de->add_option("--model", dc.model, "checkpoint file")->required();
  de->add_option("--vocab", dc.vocab, "vocabulary file")->required();
  de->add_option("--input", dc.input, "source sentences (one/line)")
      ->required();
  de->add_option("--out", dc.out, "corrected output file")->required();
  de->add_option("--nbest-out", dc.nbest_out, "n-best list file");
  de->add_option("--lexicon-corpus", dc.lexicon_corpus,
                 "parallel corpus for the baseline correction lexicon");
  for (const char* key :
       {"variant", "beam", "char-beam", "max-chars", "max-len-ratio",
        "max-len-extra", "length-normalize", "nbest", "workers", "filter"})
    dc.common.flags.add(de, key, "see README: config keys");
  de->callback([&] { run_decode(dc); });

  // train-lm
  CommonArgs lm_common;
  std::string lm_corpus, lm_out, lm_arpa;
  CLI::App* tl = app.add_subcommand("train-lm",
                                    "train a Kneser-Ney n-gram model");
  add_common(tl, lm_common);
  tl->add_option("--corpus", lm_corpus, "tokenized text (one sentence/line)")
      ->required();
  tl->add_option("--out", lm_out, "language model file to write")->required();
  tl->add_option("--arpa", lm_arpa, "also export ARPA text");
  lm_common.flags.add(tl, "lm-order", "n-gram order");
  tl->callback([&] { run_train_lm(lm_common, lm_corpus, lm_out, lm_arpa); });

  // rerank
  RerankArgs rr;
  CLI::App* rk = app.add_subcommand(
      "rerank", "rescore an n-best list with a language model");
  add_common(rk, rr.common);
  rk->add_option("--nbest", rr.nbest, "n-best list from decode")->required();
  rk->add_option("--lm", rr.lm, "language model file")->required();
  rk->add_option("--out", rr.out, "1-best output file (default stdout)");
  rk->add_flag("--tune", rr.tune, "grid-search lambda against --gold");
  rk->add_option("--gold", rr.gold, "gold edits (M2 format) for tuning");
  rk->add_option("--grid", rr.grid, "comma-separated lambda grid");
  rr.common.flags.add(rk, "lambda", "interpolation weight");
  rk->callback([&] { run_rerank(rr); });

  // score
  CommonArgs sc_common;
  std::string sc_hyp, sc_gold, sc_out;
  CLI::App* sc = app.add_subcommand("score", "M2-style P/R/F0.5 scoring");
  add_common(sc, sc_common);
  sc->add_option("--hyp", sc_hyp, "system output (one sentence/line)")
      ->required();
  sc->add_option("--gold", sc_gold, "gold edits (M2 format)")->required();
  sc->add_option("--out", sc_out, "also write the report here");
  sc->callback([&] { run_score(sc_common, sc_hyp, sc_gold, sc_out); });

  // analyze
  AnalyzeArgs an;
  CLI::App* az = app.add_subcommand(
      "analyze", "per-segment (OOV) and per-portion (edit size) breakdown");
  add_common(az, an.common);
  az->add_option("--hyp", an.hyp, "system output (one sentence/line)")
      ->required();
  az->add_option("--gold", an.gold, "gold edits (M2 format)")->required();
  az->add_option("--src", an.src, "source sentences (one/line)")->required();
  az->add_option("--vocab", an.vocab, "vocabulary file")->required();
  az->add_option("--segment", an.segment, "oov | nonoov | all");
  az->add_option("--portion", an.portion, "small | large | all");
  az->add_option("--out", an.out, "also write the report here");
  az->callback([&] { run_analyze(an); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
