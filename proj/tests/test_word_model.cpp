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

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <string>
#include <vector>

#include "emend/corpus.hpp"
#include "emend/model.hpp"
#include "emend/nn.hpp"
#include "emend/tensor.hpp"

using namespace emend;

namespace {

// Corpus with four frequent words and two rare ones; k=4 keeps a..d
// and leaves qq/zzq out of vocabulary while their characters stay in.
VocabSet tiny_vocab() {
  std::vector<SentencePair> corpus;
  for (int i = 0; i < 5; ++i)
    corpus.push_back({{"a", "b", "c", "d"}, {"a", "b", "c", "d"}});
  corpus.push_back({{"qq", "zzq"}, {"qq", "zzq"}});
  return build_vocab(corpus, 4, VocabMode::kCombined);
}

ModelDims dims_for(const VocabSet& vs, int e, int h) {
  ModelDims d;
  d.src_vocab = vs.source.size();
  d.tgt_vocab = vs.target.size();
  d.char_vocab = vs.chars.size();
  d.embed = e;
  d.hidden = h;
  return d;
}

void randomize(ModelParams& mp, std::uint64_t seed, float scale = 0.5f) {
  Rng rng(seed);
  for (const std::string& name : mp.set.names())
    for (float& v : mp.set.get(name).value()) v = rng.uniform(-scale, scale);
}

Batch one_pair_batch(const VocabSet& vs, std::vector<std::string> src,
                     std::vector<std::string> tgt) {
  SentencePair p{std::move(src), std::move(tgt)};
  return encode_batch({p}, vs.source, vs.target, vs.chars);
}

// Encoder-state bundle over externally supplied vectors, mirroring
// what encode_source caches. Lets attention be probed in isolation.
EncoderStates states_over(Tape& tape, const ModelParams& mp,
                          const std::vector<Tensor>& hs) {
  EncoderStates enc;
  enc.states = hs;
  std::vector<Tensor> keys;
  for (Tensor h : hs) keys.push_back(tape.tanh(mp.phi2.apply(tape, h)));
  enc.stacked = tape.stack_rows(hs);
  enc.keys = tape.stack_rows(keys);
  enc.char_states.resize(hs.size());
  return enc;
}

// Double-precision affine + tanh from raw values; oracle for the
// attention transforms.
std::vector<double> tanh_affine_oracle(const std::vector<float>& w,
                                       const std::vector<float>& b,
                                       const std::vector<float>& x) {
  size_t out = b.size(), in = x.size();
  std::vector<double> y(out);
  for (size_t i = 0; i < out; ++i) {
    double acc = b[i];
    for (size_t j = 0; j < in; ++j) acc += double(w[i * in + j]) * x[j];
    y[i] = std::tanh(acc);
  }
  return y;
}

}  // namespace

TEST_CASE("attention over a single position is the identity mix") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  randomize(mp, 11);
  Tape tape;
  Tensor h = tape.constant({0.3f, -0.2f, 0.9f, 0.1f, -0.5f, 0.2f, 0.4f, -0.1f,
                            0.6f, -0.7f},
                           {10});
  EncoderStates enc = states_over(tape, mp, {h});
  Tensor d = tape.constant({0.2f, -0.3f, 0.5f, 0.0f, 0.7f});
  AttentionRow row = attend(tape, mp, d, enc);
  REQUIRE(row.weights.numel() == 1);
  CHECK(row.weights.data()[0] == Catch::Approx(1.0).margin(1e-7));
  for (int i = 0; i < 10; ++i)
    CHECK(row.context.data()[i] == Catch::Approx(h.data()[i]).margin(1e-7));
}

TEST_CASE("identical encoder states draw uniform attention") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  randomize(mp, 12);
  Tape tape;
  std::vector<float> hv(10);
  Rng rng(5);
  for (float& v : hv) v = rng.uniform(-1.0f, 1.0f);
  std::vector<Tensor> hs;
  for (int k = 0; k < 4; ++k) hs.push_back(tape.constant(hv, {10}));
  EncoderStates enc = states_over(tape, mp, hs);
  Tensor d = tape.constant({0.2f, -0.3f, 0.5f, 0.0f, 0.7f});
  AttentionRow row = attend(tape, mp, d, enc);
  for (int k = 0; k < 4; ++k)
    CHECK(row.weights.data()[k] == Catch::Approx(0.25).margin(1e-6));
}

TEST_CASE("attention weights and context match a double-precision recompute") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  randomize(mp, 13);
  Tape tape;
  Rng rng(99);
  std::vector<Tensor> hs;
  for (int k = 0; k < 3; ++k) {
    std::vector<float> hv(10);
    for (float& v : hv) v = rng.uniform(-1.0f, 1.0f);
    hs.push_back(tape.constant(hv, {10}));
  }
  std::vector<float> dv(5);
  for (float& v : dv) v = rng.uniform(-1.0f, 1.0f);
  Tensor d = tape.constant(dv, {5});

  EncoderStates enc = states_over(tape, mp, hs);
  AttentionRow row = attend(tape, mp, d, enc);

  std::vector<double> q =
      tanh_affine_oracle(mp.phi1.w.value(), mp.phi1.b.value(), dv);
  std::vector<double> score(3);
  for (int k = 0; k < 3; ++k) {
    std::vector<double> key =
        tanh_affine_oracle(mp.phi2.w.value(), mp.phi2.b.value(), hs[k].value());
    double acc = 0.0;
    for (size_t j = 0; j < q.size(); ++j) acc += q[j] * key[j];
    score[k] = acc;
  }
  double z = 0.0;
  for (double s : score) z += std::exp(s);
  std::vector<double> alpha(3), ctx(10, 0.0);
  for (int k = 0; k < 3; ++k) {
    alpha[k] = std::exp(score[k]) / z;
    for (int i = 0; i < 10; ++i) ctx[i] += alpha[k] * hs[k].data()[i];
  }

  double wsum = 0.0;
  for (int k = 0; k < 3; ++k) {
    CHECK(row.weights.data()[k] == Catch::Approx(alpha[k]).margin(1e-5));
    wsum += row.weights.data()[k];
  }
  CHECK(wsum == Catch::Approx(1.0).margin(1e-6));
  for (int i = 0; i < 10; ++i)
    CHECK(row.context.data()[i] == Catch::Approx(ctx[i]).margin(1e-5));
}

TEST_CASE("attention over no positions is rejected") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  Tape tape;
  EncoderStates enc;
  Tensor d = tape.constant({0.1f, 0.1f, 0.1f, 0.1f, 0.1f});
  CHECK_THROWS_AS(attend(tape, mp, d, enc), Error);
}

TEST_CASE("zero-weight encoder produces all-zero states") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  Tape tape;
  Batch b = one_pair_batch(vs, {"a", "b", "c"}, {"a"});
  EncoderStates enc = encode_source(tape, mp, b, 0);
  REQUIRE(enc.states.size() == 3);
  for (const Tensor& h : enc.states) {
    REQUIRE(h.numel() == 10);
    for (int i = 0; i < h.numel(); ++i) CHECK(h.data()[i] == 0.0f);
  }
}

TEST_CASE("single-token encoding is one forward and one backward step") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  randomize(mp, 21);
  Batch b = one_pair_batch(vs, {"b"}, {"b"});

  Tape tape;
  EncoderStates enc = encode_source(tape, mp, b, 0);
  REQUIRE(enc.states.size() == 1);

  Tensor x = tape.row(mp.src_embed, b.src_ids[0][0]);
  Tensor f = gru_cell(tape, mp.enc_fwd, tape.leaf({5}), x);
  Tensor bk = gru_cell(tape, mp.enc_bwd, tape.leaf({5}), x);
  for (int i = 0; i < 5; ++i) {
    CHECK(enc.states[0].data()[i] == f.data()[i]);
    CHECK(enc.states[0].data()[5 + i] == bk.data()[i]);
  }
}

TEST_CASE("tied directions swap roles when the input is reversed") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  randomize(mp, 22);
  for (const char* s :
       {".wz", ".uz", ".bz", ".wr", ".ur", ".br", ".wh", ".uh", ".bh"})
    mp.set.get(std::string("enc_bwd") + s).value() =
        mp.set.get(std::string("enc_fwd") + s).value();

  Batch fwd = one_pair_batch(vs, {"a", "b", "c"}, {"a"});
  Batch rev = one_pair_batch(vs, {"c", "b", "a"}, {"a"});
  Tape t1, t2;
  EncoderStates e1 = encode_source(t1, mp, fwd, 0);
  EncoderStates e2 = encode_source(t2, mp, rev, 0);
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 5; ++i) {
      CHECK(e1.states[t].data()[i] == e2.states[2 - t].data()[5 + i]);
      CHECK(e1.states[t].data()[5 + i] == e2.states[2 - t].data()[i]);
    }
}

TEST_CASE("zero-weight decode step yields zero logits and a uniform output") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  Tape tape;
  Batch b = one_pair_batch(vs, {"a", "b"}, {"a"});
  EncoderStates enc = encode_source(tape, mp, b, 0);
  Tensor y0 = tape.row(mp.tgt_embed, Vocabulary::kBos);
  DecodeStep st = decode_step(tape, mp, mp.dec_init, y0, enc);
  for (int i = 0; i < st.logits.numel(); ++i) CHECK(st.logits.data()[i] == 0.0f);
  Tensor p = tape.softmax(st.logits);
  for (int i = 0; i < p.numel(); ++i)
    CHECK(p.data()[i] == Catch::Approx(1.0 / p.numel()).margin(1e-6));
}

TEST_CASE("decode step is deterministic and properly normalized") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  randomize(mp, 31);
  Batch b = one_pair_batch(vs, {"a", "b", "c"}, {"b"});

  auto run = [&](Tape& tape) {
    EncoderStates enc = encode_source(tape, mp, b, 0);
    Tensor y0 = tape.row(mp.tgt_embed, Vocabulary::kBos);
    return decode_step(tape, mp, mp.dec_init, y0, enc);
  };
  Tape t1, t2;
  DecodeStep a = run(t1), c = run(t2);
  for (int i = 0; i < a.logits.numel(); ++i)
    CHECK(a.logits.data()[i] == c.logits.data()[i]);

  double mass = 0.0;
  Tensor lp = t1.log_softmax(a.logits);
  for (int i = 0; i < lp.numel(); ++i) mass += std::exp(double(lp.data()[i]));
  CHECK(mass == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("uniform model loss is ln V per emitted token") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  std::vector<SentencePair> pairs = {{{"a", "b"}, {"a", "b"}},
                                     {{"c"}, {"c", "d", "a"}}};
  Batch b = encode_batch(pairs, vs.source, vs.target, vs.chars);
  Tape tape;
  Tensor loss = word_loss(tape, mp, b);
  // Emission counts include EOS: (2+1) + (3+1) tokens over 2 sentences.
  double expect = 7.0 * std::log(double(vs.target.size())) / 2.0;
  CHECK(loss.scalar() == Catch::Approx(expect).margin(1e-5));
}

TEST_CASE("teacher-forced loss equals the assembled per-step log-probs") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  randomize(mp, 41);
  // Target carries an out-of-vocabulary word, which must contribute
  // exactly the UNK log-probability at its step.
  Batch b = one_pair_batch(vs, {"a", "qq", "c"}, {"a", "zzq"});
  REQUIRE(b.tgt_ids[0][1] == Vocabulary::kUnk);

  Tape tape;
  Tensor loss = word_loss(tape, mp, b);

  Tape manual;
  EncoderStates enc = encode_source(manual, mp, b, 0);
  Tensor combined = mp.dec_init;
  int prev = Vocabulary::kBos;
  std::vector<int> golds = {b.tgt_ids[0][0], b.tgt_ids[0][1], Vocabulary::kEos};
  double nll = 0.0;
  for (int gold : golds) {
    Tensor y = manual.row(mp.tgt_embed, prev);
    DecodeStep st = decode_step(manual, mp, combined, y, enc);
    REQUIRE(st.attention.weights.numel() == 3);
    double wsum = 0.0;
    for (int k = 0; k < 3; ++k) wsum += st.attention.weights.data()[k];
    CHECK(wsum == Catch::Approx(1.0).margin(1e-6));
    Tensor lp = manual.log_softmax(st.logits);
    nll -= lp.data()[gold];
    combined = st.combined;
    prev = gold;
  }
  CHECK(loss.scalar() == Catch::Approx(nll).margin(1e-5));
}

TEST_CASE("batch loss is invariant under sentence permutation") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  randomize(mp, 51);
  SentencePair p1{{"a", "b", "c"}, {"a", "b"}};
  SentencePair p2{{"d", "zzq"}, {"d", "qq", "a"}};
  Batch ab = encode_batch({p1, p2}, vs.source, vs.target, vs.chars);
  Batch ba = encode_batch({p2, p1}, vs.source, vs.target, vs.chars);
  Tape t1, t2;
  float la = word_loss(t1, mp, ab).scalar();
  float lb = word_loss(t2, mp, ba).scalar();
  CHECK(la == Catch::Approx(lb).margin(1e-5));
}

TEST_CASE("padding affects neither encoding width nor loss") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  randomize(mp, 61);
  SentencePair shorter{{"a", "b"}, {"b"}};
  SentencePair longer{{"c", "d", "a", "b", "c"}, {"c", "d", "a", "b"}};
  Batch both = encode_batch({shorter, longer}, vs.source, vs.target, vs.chars);
  REQUIRE(both.src_len == 5);

  Tape tape;
  EncoderStates enc = encode_source(tape, mp, both, 0);
  CHECK(enc.states.size() == 2);  // unpadded length only

  Batch only_short = encode_batch({shorter}, vs.source, vs.target, vs.chars);
  Batch only_long = encode_batch({longer}, vs.source, vs.target, vs.chars);
  Tape t1, t2, t3;
  float sum_apart = word_loss(t1, mp, only_short).scalar() +
                    word_loss(t2, mp, only_long).scalar();
  float together = word_loss(t3, mp, both).scalar();
  CHECK(2.0f * together == Catch::Approx(sum_apart).margin(1e-5));
}

TEST_CASE("dropout perturbs training loss but never evaluation loss") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 5));
  randomize(mp, 71);
  Batch b = one_pair_batch(vs, {"a", "b", "c"}, {"a", "b", "c"});

  ForwardOpts eval;
  Tape t1, t2;
  float e1 = word_loss(t1, mp, b, eval).scalar();
  float e2 = word_loss(t2, mp, b, eval).scalar();
  CHECK(e1 == e2);

  ForwardOpts train;
  train.training = true;
  train.dropout = 0.5f;
  Rng rng(5);
  train.rng = &rng;
  Tape t3;
  float tr = word_loss(t3, mp, b, train).scalar();
  CHECK(tr != e1);

  train.dropout = 0.0f;
  Tape t4;
  CHECK(word_loss(t4, mp, b, train).scalar() == e1);
}

TEST_CASE("word loss gradients agree with central differences") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 8, 8));
  randomize(mp, 81, 0.3f);
  std::vector<SentencePair> pairs = {{{"a", "b", "c"}, {"a", "c"}},
                                     {{"d", "a"}, {"d", "a", "b"}}};
  Batch b = encode_batch(pairs, vs.source, vs.target, vs.chars);
  ForwardOpts opts;
  opts.variant = ModelVariant::kBaseline;
  double worst = check_gradients(
      [&](Tape& tape) { return word_loss(tape, mp, b, opts); }, mp.set, 1e-3,
      6, 17);
  CHECK(worst < 1e-3);
}

TEST_CASE("model dimension and vocabulary validation") {
  VocabSet vs = tiny_vocab();
  ModelDims d = dims_for(vs, 6, 5);
  d.src_vocab = 2;
  CHECK_THROWS_AS(make_model_params(d), UsageError);
  d = dims_for(vs, 0, 5);
  CHECK_THROWS_AS(make_model_params(d), UsageError);
  d = dims_for(vs, 6, 5);
  d.char_vocab = 1;
  CHECK_THROWS_AS(make_model_params(d), UsageError);
  CHECK(parse_variant("hybrid") == ModelVariant::kHybrid);
  CHECK_THROWS_AS(parse_variant("wordy"), UsageError);
}
