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

#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <string>
#include <vector>

#include "emend/corpus.hpp"
#include "emend/hybrid.hpp"
#include "emend/model.hpp"
#include "emend/nn.hpp"
#include "emend/tensor.hpp"

using namespace emend;

namespace {

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

// Double-precision helpers for the hand-rolled oracles below.
std::vector<double> affine_oracle(const std::vector<float>& w,
                                  const std::vector<float>& b,
                                  const std::vector<double>& x) {
  size_t out = b.size(), in = x.size();
  std::vector<double> y(out);
  for (size_t i = 0; i < out; ++i) {
    double acc = b[i];
    for (size_t j = 0; j < in; ++j) acc += double(w[i * in + j]) * x[j];
    y[i] = acc;
  }
  return y;
}

std::vector<double> to_double(const std::vector<float>& v) {
  return std::vector<double>(v.begin(), v.end());
}

std::vector<double> gru_oracle(const GruParams& p, const std::vector<double>& h,
                               const std::vector<double>& x) {
  auto gate = [&](Tensor w, Tensor u, Tensor b, const std::vector<double>& hh) {
    std::vector<double> wx = affine_oracle(w.value(), b.value(), x);
    std::vector<double> uh = affine_oracle(u.value(),
                                           std::vector<float>(hh.size(), 0.0f),
                                           hh);
    for (size_t i = 0; i < wx.size(); ++i) wx[i] += uh[i];
    return wx;
  };
  std::vector<double> z = gate(p.wz, p.uz, p.bz, h);
  std::vector<double> r = gate(p.wr, p.ur, p.br, h);
  for (double& v : z) v = 1.0 / (1.0 + std::exp(-v));
  for (double& v : r) v = 1.0 / (1.0 + std::exp(-v));
  std::vector<double> rh(h.size());
  for (size_t i = 0; i < h.size(); ++i) rh[i] = r[i] * h[i];
  std::vector<double> cand = gate(p.wh, p.uh, p.bh, rh);
  for (double& v : cand) v = std::tanh(v);
  std::vector<double> out(h.size());
  for (size_t i = 0; i < h.size(); ++i)
    out[i] = (1.0 - z[i]) * h[i] + z[i] * cand[i];
  return out;
}

}  // namespace

TEST_CASE("character composition matches manual cell applications") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 101);
  std::vector<int> ids = vs.chars.encode_word("zq");
  REQUIRE(ids.size() == 4);  // framing plus two characters

  Tape tape;
  CharEncoding enc = compose_oov_embedding(tape, mp, ids);
  REQUIRE(enc.states.size() == 4);

  Tensor h = tape.leaf({5});
  for (size_t n = 0; n < ids.size(); ++n) {
    h = gru_cell(tape, mp.char_enc, h, tape.row(mp.char_enc_embed, ids[n]));
    for (int i = 0; i < 5; ++i) CHECK(enc.states[n].data()[i] == h.data()[i]);
  }
  for (int i = 0; i < 5; ++i) CHECK(enc.final_state.data()[i] == h.data()[i]);
}

TEST_CASE("composed embedding width equals the word embedding width") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 6, 3));
  randomize(mp, 102);
  Tape tape;
  for (const char* w : {"q", "zq", "zzq", "abcd"}) {
    CharEncoding enc =
        compose_oov_embedding(tape, mp, vs.chars.encode_word(w));
    CHECK(enc.final_state.numel() == 6);
  }
}

TEST_CASE("zero-weight composition of a single character is zero") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  Tape tape;
  CharEncoding enc =
      compose_oov_embedding(tape, mp, {CharVocabulary::kBow});
  for (int i = 0; i < 5; ++i) CHECK(enc.final_state.data()[i] == 0.0f);
}

TEST_CASE("empty character sequences are rejected") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  Tape tape;
  CHECK_THROWS_AS(compose_oov_embedding(tape, mp, {}), DataError);
}

TEST_CASE("separate-path state is a rectified affine of context and state") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));

  SECTION("zero weights give the zero vector") {
    Tape tape;
    Tensor c = tape.constant(std::vector<float>(8, 0.7f), {8});
    Tensor d = tape.constant(std::vector<float>(4, -0.3f), {4});
    Tensor init = separate_path_init(tape, mp, c, d);
    for (int i = 0; i < init.numel(); ++i) CHECK(init.data()[i] == 0.0f);
  }

  SECTION("values match a double recompute and are nonnegative") {
    randomize(mp, 111);
    Tape tape;
    Rng rng(3);
    std::vector<float> cv(8), dv(4);
    for (float& v : cv) v = rng.uniform(-1.0f, 1.0f);
    for (float& v : dv) v = rng.uniform(-1.0f, 1.0f);
    Tensor init = separate_path_init(tape, mp, tape.constant(cv, {8}),
                                     tape.constant(dv, {4}));
    std::vector<double> x(cv.begin(), cv.end());
    x.insert(x.end(), dv.begin(), dv.end());
    std::vector<double> want =
        affine_oracle(mp.sep.w.value(), mp.sep.b.value(), x);
    for (size_t i = 0; i < want.size(); ++i) {
      double expect = std::max(0.0, want[i]);
      CHECK(init.data()[i] == Catch::Approx(expect).margin(1e-5));
      CHECK(init.data()[i] >= 0.0f);
    }
  }
}

TEST_CASE("hard attention picks the argmax with ties to the lowest index") {
  Tape tape;
  CHECK(hard_attention_index(tape.constant({0.1f, 0.7f, 0.2f})) == 1);
  CHECK(hard_attention_index(
            tape.constant({1.0f / 3, 1.0f / 3, 1.0f / 3})) == 0);
  CHECK(hard_attention_index(tape.constant({0.2f, 0.5f, 0.5f})) == 1);
  CHECK_THROWS_AS(hard_attention_index(Tensor()), Error);

  Rng rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> row(1 + int(rng.index(6)));
    for (float& v : row) v = rng.uniform(0.0f, 1.0f);
    Tensor t = tape.constant(row);
    int got = hard_attention_index(t);
    int want = int(std::max_element(row.begin(), row.end()) - row.begin());
    CHECK(got == want);

    // Strictly increasing transforms must not move the argmax.
    std::vector<float> warped(row.size());
    for (size_t i = 0; i < row.size(); ++i)
      warped[i] = std::exp(3.0f * row[i]) + 1.0f;
    CHECK(hard_attention_index(tape.constant(warped)) == got);
  }
}

TEST_CASE("basic character steps match a manual unroll") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 121);
  Tape tape;
  std::vector<float> iv = {0.4f, -0.2f, 0.1f, 0.8f};
  Tensor init = tape.constant(iv, {4});
  std::vector<int> ids = vs.chars.encode_word("zq");

  CharStep s0 = char_decode_step_basic(tape, mp, init, ids[0]);
  CharStep s1 = char_decode_step_basic(tape, mp, s0.state, ids[1]);
  CHECK_FALSE(s0.attention.weights.defined());
  CHECK_FALSE(s0.combined.defined());

  Tensor m0 = gru_cell(tape, mp.char_dec, init,
                       tape.row(mp.char_dec_embed, ids[0]));
  Tensor m1 =
      gru_cell(tape, mp.char_dec, m0, tape.row(mp.char_dec_embed, ids[1]));
  for (int i = 0; i < 4; ++i) {
    CHECK(s0.state.data()[i] == m0.data()[i]);
    CHECK(s1.state.data()[i] == m1.data()[i]);
  }
  Tensor logits = mp.char_out.apply(tape, m1);
  for (int i = 0; i < logits.numel(); ++i)
    CHECK(s1.logits.data()[i] == logits.data()[i]);

  double mass = 0.0;
  Tensor lp = tape.log_softmax(s1.logits);
  for (int i = 0; i < lp.numel(); ++i) mass += std::exp(double(lp.data()[i]));
  CHECK(mass == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("zero-weight character step emits the uniform distribution") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  Tape tape;
  CharStep st = char_decode_step_basic(tape, mp, tape.leaf({4}),
                                       CharVocabulary::kBow);
  Tensor p = tape.softmax(st.logits);
  for (int i = 0; i < p.numel(); ++i)
    CHECK(p.data()[i] == Catch::Approx(1.0 / p.numel()).margin(1e-6));
}

TEST_CASE("nested character step matches a hand-rolled computation") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 4, 4));
  randomize(mp, 131);
  Tape tape;

  Rng rng(7);
  std::vector<Tensor> src_states;
  for (int k = 0; k < 2; ++k) {
    std::vector<float> sv(4);
    for (float& v : sv) v = rng.uniform(-1.0f, 1.0f);
    src_states.push_back(tape.constant(sv, {4}));
  }
  std::vector<float> iv(4);
  for (float& v : iv) v = rng.uniform(-1.0f, 1.0f);
  Tensor init = tape.constant(iv, {4});
  int prev = CharVocabulary::kBow;

  CharStep st = char_decode_step_nested(tape, mp, init, prev, src_states);

  // State: one gated recurrent cell over the previous character.
  std::vector<double> x = to_double(mp.char_dec_embed.value());
  x = std::vector<double>(x.begin() + prev * 4, x.begin() + prev * 4 + 4);
  std::vector<double> d = gru_oracle(mp.char_dec_nested, to_double(iv), x);
  for (int i = 0; i < 4; ++i)
    CHECK(st.state.data()[i] == Catch::Approx(d[i]).margin(1e-5));

  // Attention: tanh transforms, dot scores, softmax, mix.
  std::vector<double> q =
      affine_oracle(mp.char_phi1.w.value(), mp.char_phi1.b.value(), d);
  for (double& v : q) v = std::tanh(v);
  std::vector<double> score(2);
  for (int k = 0; k < 2; ++k) {
    std::vector<double> key =
        affine_oracle(mp.char_phi2.w.value(), mp.char_phi2.b.value(),
                      to_double(src_states[k].value()));
    double acc = 0.0;
    for (size_t j = 0; j < q.size(); ++j) acc += q[j] * std::tanh(key[j]);
    score[k] = acc;
  }
  double z = std::exp(score[0]) + std::exp(score[1]);
  std::vector<double> ctx(4, 0.0);
  for (int k = 0; k < 2; ++k) {
    double a = std::exp(score[k]) / z;
    CHECK(st.attention.weights.data()[k] == Catch::Approx(a).margin(1e-5));
    for (int i = 0; i < 4; ++i) ctx[i] += a * src_states[k].data()[i];
  }

  // Combined state: rectified affine of [context; state].
  std::vector<double> cat = ctx;
  cat.insert(cat.end(), d.begin(), d.end());
  std::vector<double> comb = affine_oracle(mp.char_combine.w.value(),
                                           mp.char_combine.b.value(), cat);
  for (int i = 0; i < 4; ++i)
    CHECK(st.combined.data()[i] ==
          Catch::Approx(std::max(0.0, comb[i])).margin(1e-5));

  // Emission comes from the recurrent state, not the combined one.
  std::vector<double> logits =
      affine_oracle(mp.char_out.w.value(), mp.char_out.b.value(), d);
  for (size_t i = 0; i < logits.size(); ++i)
    CHECK(st.logits.data()[i] == Catch::Approx(logits[i]).margin(1e-5));
}

TEST_CASE("single source character state takes all nested attention") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 141);
  Tape tape;
  std::vector<float> sv = {0.3f, -0.4f, 0.5f, 0.6f, -0.2f};
  std::vector<Tensor> src_states = {tape.constant(sv, {5})};
  AttentionRow row = char_attend(tape, mp, tape.leaf({4}), src_states);
  REQUIRE(row.weights.numel() == 1);
  CHECK(row.weights.data()[0] == Catch::Approx(1.0).margin(1e-7));
  for (int i = 0; i < 5; ++i)
    CHECK(row.context.data()[i] == Catch::Approx(sv[i]).margin(1e-7));
}

TEST_CASE("nested attention rows normalize at every forced step") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 151);
  Tape tape;
  CharEncoding src = compose_oov_embedding(tape, mp, vs.chars.encode_word("zzq"));
  std::vector<int> tgt = vs.chars.encode_word("qz");

  Tensor state = tape.constant({0.1f, 0.2f, -0.3f, 0.4f}, {4});
  for (size_t n = 0; n + 1 < tgt.size(); ++n) {
    CharStep st = char_decode_step_nested(tape, mp, state, tgt[n], src.states);
    REQUIRE(st.attention.weights.numel() == int(src.states.size()));
    double mass = 0.0;
    for (int k = 0; k < st.attention.weights.numel(); ++k) {
      mass += st.attention.weights.data()[k];
      CHECK(st.attention.weights.data()[k] >= 0.0f);
    }
    CHECK(mass == Catch::Approx(1.0).margin(1e-6));
    state = st.combined;
  }
}

TEST_CASE("forced character loss is the sum of per-step log-probs") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 161);
  std::vector<int> word = vs.chars.encode_word("zqa");

  Tape tape;
  Tensor init = tape.constant({0.5f, -0.1f, 0.3f, 0.2f}, {4});
  Tensor loss = char_forced_loss(tape, mp, init, word, nullptr);

  Tape manual;
  Tensor state = manual.constant({0.5f, -0.1f, 0.3f, 0.2f}, {4});
  double nll = 0.0;
  for (size_t n = 0; n + 1 < word.size(); ++n) {
    CharStep st = char_decode_step_basic(manual, mp, state, word[n]);
    Tensor lp = manual.log_softmax(st.logits);
    nll -= lp.data()[word[n + 1]];
    state = st.state;
  }
  CHECK(loss.scalar() == Catch::Approx(nll).margin(1e-5));
  CHECK(loss.scalar() >= 0.0f);
  Tape bare;
  CHECK_THROWS_AS(
      char_forced_loss(bare, mp, bare.leaf({4}), {CharVocabulary::kBow},
                       nullptr),
      DataError);
}

TEST_CASE("loss weights of zero collapse the total onto the word loss") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 171);
  Batch b = one_pair_batch(vs, {"a", "b"}, {"a", "qq"});
  Tape tape;
  LossBreakdown bd = total_loss(tape, mp, b, 0.0, 0.0);
  CHECK(bd.total.node() == bd.loss_w.node());
  CHECK(bd.loss_c1.scalar() > 0.0f);  // still reported
  CHECK(bd.loss_c2.scalar() == 0.0f);

  Tape t2;
  CHECK_THROWS_AS(total_loss(t2, mp, b, -0.1, 0.0), UsageError);
  CHECK_THROWS_AS(total_loss(t2, mp, b, 0.0, -1.0), UsageError);
}

TEST_CASE("batches without unknown target words have zero character loss") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 181);
  Batch b = one_pair_batch(vs, {"a", "zzq"}, {"a", "b"});
  Tape tape;
  LossBreakdown bd = total_loss(tape, mp, b, 0.5, 0.5);
  CHECK(bd.loss_c1.scalar() == 0.0f);
  CHECK(bd.loss_c2.scalar() == 0.0f);
  CHECK(bd.total.scalar() == bd.loss_w.scalar());
}

TEST_CASE("character losses route by the aligned source word's status") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 191);

  // Every source word known: the unknown target must land in c1.
  Batch known = one_pair_batch(vs, {"a", "b", "c"}, {"a", "qq"});
  Tape t1;
  LossBreakdown bd1 = total_loss(t1, mp, known, 0.5, 0.5);
  CHECK(bd1.loss_c1.scalar() > 0.0f);
  CHECK(bd1.loss_c2.scalar() == 0.0f);

  // Every source word unknown: the unknown target must land in c2.
  Batch unknown = one_pair_batch(vs, {"zzq", "zzq"}, {"zzq"});
  Tape t2;
  LossBreakdown bd2 = total_loss(t2, mp, unknown, 0.5, 0.5);
  CHECK(bd2.loss_c1.scalar() == 0.0f);
  CHECK(bd2.loss_c2.scalar() > 0.0f);
}

TEST_CASE("weighted total composes exactly from its parts") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 201);
  std::vector<SentencePair> pairs = {{{"a", "b"}, {"a", "qq"}},
                                     {{"zzq", "zzq"}, {"zzq"}}};
  Batch b = encode_batch(pairs, vs.source, vs.target, vs.chars);
  Tape tape;
  LossBreakdown bd = total_loss(tape, mp, b, 0.5, 0.25);
  float expect = bd.loss_w.scalar() + (0.5f * bd.loss_c1.scalar() +
                                       0.25f * bd.loss_c2.scalar());
  CHECK(bd.total.scalar() == expect);
  CHECK(bd.loss_w.scalar() > 0.0f);
  CHECK(bd.loss_c1.scalar() > 0.0f);
  CHECK(bd.loss_c2.scalar() > 0.0f);
}

TEST_CASE("breakdown components match an externally assembled pipeline") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 211);
  Batch b = one_pair_batch(vs, {"a", "b"}, {"a", "qq"});
  ForwardOpts opts;

  Tape tape;
  LossBreakdown bd = total_loss(tape, mp, b, 0.5, 0.5, opts);

  Tape manual;
  EncoderStates enc = encode_source(manual, mp, b, 0, opts);
  std::vector<StepTrace> trace;
  Tensor w = detail::word_pass(manual, mp, b, 0, enc, opts, &trace);
  const std::vector<int>& chars = b.tgt_chars[0].at(1);
  const StepTrace& tr = trace[1];
  int z = hard_attention_index(tr.attn_weights);
  REQUIRE(b.src_oov[0][z] == 0);
  Tensor init = separate_path_init(manual, mp, tr.context, tr.d);
  Tensor c1 = char_forced_loss(manual, mp, init, chars, nullptr);

  CHECK(bd.loss_w.scalar() == w.scalar());
  CHECK(bd.loss_c1.scalar() == c1.scalar());
}

TEST_CASE("nested and basic variants agree when no unknown source is attended") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 221);
  Batch b = one_pair_batch(vs, {"a", "b", "c"}, {"qq", "b"});

  ForwardOpts nested, hybrid;
  nested.variant = ModelVariant::kNested;
  hybrid.variant = ModelVariant::kHybrid;
  Tape t1, t2;
  LossBreakdown n = total_loss(t1, mp, b, 0.5, 0.5, nested);
  LossBreakdown h = total_loss(t2, mp, b, 0.5, 0.5, hybrid);
  CHECK(n.total.scalar() == h.total.scalar());
  CHECK(n.loss_c1.scalar() == h.loss_c1.scalar());
}

TEST_CASE("baseline variant skips character modeling entirely") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 5, 4));
  randomize(mp, 231);
  Batch b = one_pair_batch(vs, {"zzq", "a"}, {"qq"});
  ForwardOpts opts;
  opts.variant = ModelVariant::kBaseline;

  Tape tape;
  LossBreakdown bd = total_loss(tape, mp, b, 0.5, 0.5, opts);
  CHECK(bd.loss_c1.scalar() == 0.0f);
  CHECK(bd.loss_c2.scalar() == 0.0f);

  Tape t2;
  CHECK(bd.loss_w.scalar() == word_loss(t2, mp, b, opts).scalar());

  Tape t3;
  EncoderStates enc = encode_source(t3, mp, b, 0, opts);
  CHECK(enc.char_states[0].empty());  // unknown word stays a plain UNK row

  ForwardOpts nested;
  Tape t4;
  EncoderStates enc2 = encode_source(t4, mp, b, 0, nested);
  CHECK_FALSE(enc2.char_states[0].empty());
}

TEST_CASE("combined loss gradients agree with central differences") {
  VocabSet vs = tiny_vocab();
  ModelParams mp = make_model_params(dims_for(vs, 8, 8));
  randomize(mp, 241, 0.3f);
  // Pair one exercises the known-source character path, pair two the
  // nested one. Within each pair every source word shares one
  // vocabulary status, so perturbing the attention argmax between
  // positions cannot change the loss value.
  std::vector<SentencePair> pairs = {{{"a", "b", "c"}, {"a", "qq", "b"}},
                                     {{"zzq", "zzq"}, {"zzq"}}};
  Batch b = encode_batch(pairs, vs.source, vs.target, vs.chars);
  ForwardOpts opts;
  opts.variant = ModelVariant::kNested;
  double worst = check_gradients(
      [&](Tape& tape) { return total_loss(tape, mp, b, 0.5, 0.5, opts).total; },
      mp.set, 1e-3, 6, 29);
  CHECK(worst < 1e-3);
}
