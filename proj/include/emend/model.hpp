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

#include <string>
#include <utility>
#include <vector>

#include "emend/corpus.hpp"
#include "emend/nn.hpp"
#include "emend/tensor.hpp"

namespace emend {

/// Which correction model runs. kBaseline is the plain word
/// sequence-to-sequence model; kHybrid adds character decoding for
/// unknown target words; kNested additionally attends over the source
/// word's characters when the aligned source word is itself unknown.
enum class ModelVariant { kBaseline, kHybrid, kNested };

inline ModelVariant parse_variant(const std::string& s) {
  if (s == "baseline") return ModelVariant::kBaseline;
  if (s == "hybrid") return ModelVariant::kHybrid;
  if (s == "nested") return ModelVariant::kNested;
  throw UsageError("unknown model variant: " + s);
}

inline const char* variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::kBaseline: return "baseline";
    case ModelVariant::kHybrid: return "hybrid";
    default: return "nested";
  }
}

struct ModelDims {
  int src_vocab = 0;
  int tgt_vocab = 0;
  int char_vocab = 0;
  int embed = 64;   // word embedding width E
  int hidden = 64;  // recurrent width H

  // Character-side widths; zero means inherit embed/hidden.
  int char_embed = 0;
  int char_hidden = 0;

  int ce() const { return char_embed > 0 ? char_embed : embed; }
  int ch() const { return char_hidden > 0 ? char_hidden : hidden; }
};

/// Every trainable tensor of the full model, each registered exactly
/// once, with typed handles into the owning ParamSet. Move-only: the
/// handles point into the set's storage.
struct ModelParams {
  ModelDims dims;
  ParamSet set;

  Tensor src_embed, tgt_embed;  // [vocab, E]

  GruParams enc_fwd, enc_bwd;  // source encoder, E -> H each direction
  GruParams dec;               // word decoder; carries the combined state

  Affine phi1;  // attention query transform, H -> H (tanh outside)
  Affine phi2;  // attention key transform, 2H -> H (tanh outside)
  Affine combine;  // [context; state] -> combined state, 3H -> H
  Affine out;      // combined state -> target vocabulary logits
  Tensor dec_init;  // learned initial combined state, [H]

  Tensor char_enc_embed, char_dec_embed;  // [char vocab, Ec]
  GruParams char_enc;         // character composer, Ec -> E
  GruParams char_dec;         // character decoder (known source word)
  GruParams char_dec_nested;  // character decoder (unknown source word)
  Affine sep;           // [context; state] -> char decoder init, 3H -> Hc
  Affine char_combine;  // [char context; char state] -> next state input
  Affine char_phi1;     // char attention query transform, Hc -> Hc
  Affine char_phi2;     // char attention key transform, E -> Hc
  Affine char_out;      // char state -> character vocabulary logits
};

inline Affine make_affine(ParamSet& ps, const std::string& prefix, int in,
                          int out) {
  Affine a;
  a.w = ps.add(prefix + ".w", {out, in});
  a.b = ps.add(prefix + ".b", {out});
  return a;
}

inline ModelParams make_model_params(const ModelDims& dims) {
  if (dims.src_vocab < Vocabulary::kReserved ||
      dims.tgt_vocab < Vocabulary::kReserved)
    throw UsageError("model: word vocabulary smaller than the reserved ids");
  if (dims.char_vocab < CharVocabulary::kReserved)
    throw UsageError("model: character vocabulary smaller than the reserved ids");
  if (dims.embed <= 0 || dims.hidden <= 0 || dims.ce() <= 0 || dims.ch() <= 0)
    throw UsageError("model: dimensions must be positive");

  int e = dims.embed, h = dims.hidden, ec = dims.ce(), hc = dims.ch();
  ModelParams mp;
  mp.dims = dims;
  ParamSet& ps = mp.set;

  mp.src_embed = ps.add("src_embed", {dims.src_vocab, e});
  mp.tgt_embed = ps.add("tgt_embed", {dims.tgt_vocab, e});
  mp.enc_fwd = make_gru(ps, "enc_fwd", e, h);
  mp.enc_bwd = make_gru(ps, "enc_bwd", e, h);
  mp.dec = make_gru(ps, "dec", e, h);
  mp.phi1 = make_affine(ps, "attn.phi1", h, h);
  mp.phi2 = make_affine(ps, "attn.phi2", 2 * h, h);
  mp.combine = make_affine(ps, "combine", 3 * h, h);
  mp.out = make_affine(ps, "out", h, dims.tgt_vocab);
  mp.dec_init = ps.add("dec_init", {h});

  mp.char_enc_embed = ps.add("char_enc_embed", {dims.char_vocab, ec});
  mp.char_dec_embed = ps.add("char_dec_embed", {dims.char_vocab, ec});
  mp.char_enc = make_gru(ps, "char_enc", ec, e);
  mp.char_dec = make_gru(ps, "char_dec", ec, hc);
  mp.char_dec_nested = make_gru(ps, "char_dec_nested", ec, hc);
  mp.sep = make_affine(ps, "sep", 3 * h, hc);
  mp.char_combine = make_affine(ps, "char_combine", e + hc, hc);
  mp.char_phi1 = make_affine(ps, "char_attn.phi1", hc, hc);
  mp.char_phi2 = make_affine(ps, "char_attn.phi2", e, hc);
  mp.char_out = make_affine(ps, "char_out", hc, dims.char_vocab);
  return mp;
}

/// Per-forward options. Dropout draws from *rng and fires only during
/// training; leaving rng null disables it regardless of the rate.
struct ForwardOpts {
  ModelVariant variant = ModelVariant::kNested;
  float dropout = 0.0f;
  bool training = false;
  Rng* rng = nullptr;
};

inline Tensor maybe_dropout(Tape& tape, Tensor x, const ForwardOpts& o) {
  if (!o.training || o.dropout <= 0.0f || o.rng == nullptr) return x;
  return tape.dropout(x, o.dropout, *o.rng, true);
}

/// Forward character GRU over one word's framed character ids. The
/// final state doubles as the word's embedding; the full state
/// sequence feeds nested character attention later.
struct CharEncoding {
  std::vector<Tensor> states;
  Tensor final_state;  // dimension E
};

inline CharEncoding compose_oov_embedding(Tape& tape, const ModelParams& mp,
                                          const std::vector<int>& char_ids) {
  if (char_ids.empty())
    throw DataError("compose_oov_embedding: empty character sequence");
  CharEncoding enc;
  enc.states.reserve(char_ids.size());
  Tensor h = tape.leaf({mp.dims.embed});
  for (int id : char_ids) {
    h = gru_cell(tape, mp.char_enc, h, tape.row(mp.char_enc_embed, id));
    enc.states.push_back(h);
  }
  enc.final_state = h;
  return enc;
}

/// Bidirectional encoding of one source sentence: states holds
/// h_t = [forward_t; backward_t] for the unpadded positions only, so
/// padding can never receive attention. stacked/keys cache the [T,2H]
/// state matrix and the transformed attention keys for reuse across
/// decoder steps. char_states[t] is nonempty iff position t was
/// composed from characters.
struct EncoderStates {
  std::vector<Tensor> states;
  Tensor stacked;  // [T, 2H]
  Tensor keys;     // [T, H]
  std::vector<std::vector<Tensor>> char_states;
};

inline EncoderStates encode_source(Tape& tape, const ModelParams& mp,
                                   const Batch& batch, int row,
                                   const ForwardOpts& opts = {}) {
  if (row < 0 || row >= batch.size)
    throw Error("encode_source: row out of range");
  int t_len = batch.src_n[static_cast<size_t>(row)];
  EncoderStates enc;
  enc.char_states.resize(static_cast<size_t>(t_len));

  std::vector<Tensor> xs(static_cast<size_t>(t_len));
  for (int t = 0; t < t_len; ++t) {
    Tensor x;
    if (opts.variant != ModelVariant::kBaseline &&
        batch.src_oov[static_cast<size_t>(row)][static_cast<size_t>(t)]) {
      CharEncoding ce = compose_oov_embedding(
          tape, mp, batch.src_chars[static_cast<size_t>(row)].at(t));
      x = ce.final_state;
      enc.char_states[static_cast<size_t>(t)] = std::move(ce.states);
    } else {
      x = tape.row(mp.src_embed,
                   batch.src_ids[static_cast<size_t>(row)][static_cast<size_t>(t)]);
    }
    xs[static_cast<size_t>(t)] = maybe_dropout(tape, x, opts);
  }

  std::vector<Tensor> fwd(xs.size()), bwd(xs.size());
  Tensor h = tape.leaf({mp.dims.hidden});
  for (int t = 0; t < t_len; ++t) {
    h = gru_cell(tape, mp.enc_fwd, h, xs[static_cast<size_t>(t)]);
    fwd[static_cast<size_t>(t)] = h;
  }
  h = tape.leaf({mp.dims.hidden});
  for (int t = t_len - 1; t >= 0; --t) {
    h = gru_cell(tape, mp.enc_bwd, h, xs[static_cast<size_t>(t)]);
    bwd[static_cast<size_t>(t)] = h;
  }

  enc.states.reserve(xs.size());
  std::vector<Tensor> keys;
  keys.reserve(xs.size());
  for (int t = 0; t < t_len; ++t) {
    Tensor ht = tape.concat(
        {fwd[static_cast<size_t>(t)], bwd[static_cast<size_t>(t)]});
    enc.states.push_back(ht);
    keys.push_back(tape.tanh(mp.phi2.apply(tape, ht)));
  }
  enc.stacked = tape.stack_rows(enc.states);
  enc.keys = tape.stack_rows(keys);
  return enc;
}

/// One attention read: weights is a distribution over the encoder's
/// unpadded positions, context the weight-mixed encoder state.
struct AttentionRow {
  Tensor weights;  // [T]
  Tensor context;  // [2H]
};

inline AttentionRow attend(Tape& tape, const ModelParams& mp, Tensor d_s,
                           const EncoderStates& enc) {
  if (enc.states.empty()) throw Error("attend: no attendable positions");
  Tensor q = tape.tanh(mp.phi1.apply(tape, d_s));
  Tensor scores = tape.matvec(enc.keys, q);
  AttentionRow row;
  row.weights = tape.softmax(scores);
  row.context = tape.matvec_t(enc.stacked, row.weights);
  return row;
}

struct DecodeStep {
  Tensor d;  // recurrent state
  AttentionRow attention;
  Tensor combined;  // state after folding in the context
  Tensor logits;    // target-vocabulary scores, pre-softmax
};

/// One word-decoder step. The previous combined state is the GRU input
/// state; the first step receives the learned initial state with the
/// BOS embedding.
inline DecodeStep decode_step(Tape& tape, const ModelParams& mp,
                              Tensor combined_prev, Tensor y_prev,
                              const EncoderStates& enc,
                              const ForwardOpts& opts = {}) {
  DecodeStep st;
  st.d = gru_cell(tape, mp.dec, combined_prev, y_prev);
  st.attention = attend(tape, mp, st.d, enc);
  st.combined = tape.relu(
      mp.combine.apply(tape, tape.concat({st.attention.context, st.d})));
  st.logits = mp.out.apply(tape, maybe_dropout(tape, st.combined, opts));
  return st;
}

/// What the character paths need back from each word-decoder step.
struct StepTrace {
  Tensor d;
  Tensor context;
  Tensor attn_weights;
};

namespace detail {

inline Tensor sum_scalars(Tape& tape, const std::vector<Tensor>& terms) {
  if (terms.empty()) return tape.leaf({1});
  Tensor acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = tape.add(acc, terms[i]);
  return acc;
}

// Teacher-forced pass over one sentence: feeds gold tokens framed
// BOS..EOS, accumulates the cross-entropy of every gold target
// (unknown target words contribute their UNK probability here), and
// optionally records the per-step trace for the character paths.
inline Tensor word_pass(Tape& tape, const ModelParams& mp, const Batch& batch,
                        int row, const EncoderStates& enc,
                        const ForwardOpts& opts,
                        std::vector<StepTrace>* trace = nullptr) {
  int n = batch.tgt_n[static_cast<size_t>(row)];
  Tensor combined = mp.dec_init;
  int prev_id = Vocabulary::kBos;
  std::vector<Tensor> losses;
  losses.reserve(static_cast<size_t>(n) + 1);
  for (int s = 0; s <= n; ++s) {
    int gold = s < n ? batch.tgt_ids[static_cast<size_t>(row)][static_cast<size_t>(s)]
                     : Vocabulary::kEos;
    Tensor y_prev = maybe_dropout(tape, tape.row(mp.tgt_embed, prev_id), opts);
    DecodeStep st = decode_step(tape, mp, combined, y_prev, enc, opts);
    losses.push_back(tape.cross_entropy(st.logits, gold));
    if (trace) trace->push_back({st.d, st.attention.context, st.attention.weights});
    combined = st.combined;
    prev_id = gold;
  }
  return sum_scalars(tape, losses);
}

}  // namespace detail

/// Word-level training loss: negative log-probability of the gold
/// target tokens (EOS included), summed per sentence and averaged over
/// the batch by sentence count.
inline Tensor word_loss(Tape& tape, const ModelParams& mp, const Batch& batch,
                        const ForwardOpts& opts = {}) {
  std::vector<Tensor> terms;
  terms.reserve(static_cast<size_t>(batch.size));
  for (int r = 0; r < batch.size; ++r) {
    EncoderStates enc = encode_source(tape, mp, batch, r, opts);
    terms.push_back(detail::word_pass(tape, mp, batch, r, enc, opts));
  }
  return tape.scale(detail::sum_scalars(tape, terms),
                    1.0f / static_cast<float>(batch.size));
}

}  // namespace emend
