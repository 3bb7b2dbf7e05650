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

#include <vector>

#include "emend/corpus.hpp"
#include "emend/model.hpp"
#include "emend/nn.hpp"
#include "emend/tensor.hpp"

namespace emend {

/// Initial character-decoder state for one unknown target word, built
/// from the word decoder's context and state at that step. Kept off
/// the word-level path: nothing downstream of the word decoder reads it.
inline Tensor separate_path_init(Tape& tape, const ModelParams& mp, Tensor c_s,
                                 Tensor d_s) {
  return tape.relu(mp.sep.apply(tape, tape.concat({c_s, d_s})));
}

/// Source position the decoder was looking at: argmax of the step's
/// attention row, ties to the lowest index. Reads values only, so no
/// gradient flows through the choice.
inline int hard_attention_index(const Tensor& weights) {
  if (!weights.defined() || weights.numel() == 0)
    throw Error("hard_attention_index: empty attention row");
  const float* v = weights.data();
  int best = 0;
  for (int i = 1; i < weights.numel(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Attention over one source word's character states, same form as the
/// word-level attention but with its own transforms.
inline AttentionRow char_attend(Tape& tape, const ModelParams& mp, Tensor d_c,
                                const std::vector<Tensor>& source_char_states) {
  if (source_char_states.empty())
    throw Error("char_attend: no source character states");
  std::vector<Tensor> keys;
  keys.reserve(source_char_states.size());
  for (const Tensor& h : source_char_states)
    keys.push_back(tape.tanh(mp.char_phi2.apply(tape, h)));
  Tensor q = tape.tanh(mp.char_phi1.apply(tape, d_c));
  Tensor scores = tape.matvec(tape.stack_rows(keys), q);
  AttentionRow row;
  row.weights = tape.softmax(scores);
  row.context = tape.matvec_t(tape.stack_rows(source_char_states), row.weights);
  return row;
}

/// One character-decoder step. Characters are always emitted from the
/// recurrent state; the nested variant's combined state only carries
/// the attended context into the next step's recurrence.
struct CharStep {
  Tensor state;   // recurrent state d^c_n
  Tensor logits;  // character-vocabulary scores from the state
  Tensor combined;         // nested only: next step's input state
  AttentionRow attention;  // nested only
};

/// Recurrence when the aligned source word is known: the source
/// context reaches the characters only through the initial state.
/// Step 0 passes the separate-path init with the BOW id; later steps
/// pass the previous state and the previous character.
inline CharStep char_decode_step_basic(Tape& tape, const ModelParams& mp,
                                       Tensor state_prev, int y_prev_char) {
  CharStep st;
  Tensor x = tape.row(mp.char_dec_embed, y_prev_char);
  st.state = gru_cell(tape, mp.char_dec, state_prev, x);
  st.logits = mp.char_out.apply(tape, st.state);
  return st;
}

/// Recurrence when the aligned source word is itself unknown: each
/// step attends over that word's character states, and the combined
/// state (not the raw one) feeds the next step. Separate GRU from the
/// basic path.
inline CharStep char_decode_step_nested(
    Tape& tape, const ModelParams& mp, Tensor state_prev, int y_prev_char,
    const std::vector<Tensor>& source_char_states) {
  CharStep st;
  Tensor x = tape.row(mp.char_dec_embed, y_prev_char);
  st.state = gru_cell(tape, mp.char_dec_nested, state_prev, x);
  st.attention = char_attend(tape, mp, st.state, source_char_states);
  st.combined = tape.relu(mp.char_combine.apply(
      tape, tape.concat({st.attention.context, st.state})));
  st.logits = mp.char_out.apply(tape, st.state);
  return st;
}

/// Forced decode of one target word's framed characters; returns the
/// summed per-character cross-entropy (each real character plus the
/// closing EOW), unnormalized. Non-null source_char_states selects the
/// nested recurrence.
inline Tensor char_forced_loss(Tape& tape, const ModelParams& mp,
                               Tensor init_state,
                               const std::vector<int>& framed_chars,
                               const std::vector<Tensor>* source_char_states) {
  if (framed_chars.size() < 2)
    throw DataError("char_forced_loss: character sequence lacks framing");
  Tensor state = init_state;
  std::vector<Tensor> losses;
  losses.reserve(framed_chars.size() - 1);
  for (size_t n = 0; n + 1 < framed_chars.size(); ++n) {
    CharStep st = source_char_states
                      ? char_decode_step_nested(tape, mp, state, framed_chars[n],
                                                *source_char_states)
                      : char_decode_step_basic(tape, mp, state, framed_chars[n]);
    losses.push_back(tape.cross_entropy(st.logits, framed_chars[n + 1]));
    state = source_char_states ? st.combined : st.state;
  }
  return detail::sum_scalars(tape, losses);
}

/// The three loss components, each averaged over the batch by sentence
/// count to match the word-loss convention. loss_c1 covers unknown
/// target words aligned to known source words, loss_c2 those aligned
/// to unknown source words. total is exactly loss_w when both weights
/// are zero, else loss_w + alpha*loss_c1 + beta*loss_c2.
struct LossBreakdown {
  Tensor loss_w;
  Tensor loss_c1;
  Tensor loss_c2;
  Tensor total;
  double alpha = 0.0;
  double beta = 0.0;
};

inline LossBreakdown total_loss(Tape& tape, const ModelParams& mp,
                                const Batch& batch, double alpha, double beta,
                                const ForwardOpts& opts = {}) {
  if (alpha < 0.0 || beta < 0.0)
    throw UsageError("total_loss: loss weights must be nonnegative");

  std::vector<Tensor> w_terms, c1_terms, c2_terms;
  w_terms.reserve(static_cast<size_t>(batch.size));
  for (int r = 0; r < batch.size; ++r) {
    EncoderStates enc = encode_source(tape, mp, batch, r, opts);
    std::vector<StepTrace> trace;
    w_terms.push_back(detail::word_pass(tape, mp, batch, r, enc, opts, &trace));
    if (opts.variant == ModelVariant::kBaseline) continue;

    // Every unknown target word gets a character loss, routed by the
    // vocabulary status of the source word under the decoder's gaze.
    for (const auto& [pos, chars] : batch.tgt_chars[static_cast<size_t>(r)]) {
      const StepTrace& t = trace[static_cast<size_t>(pos)];
      int z = hard_attention_index(t.attn_weights);
      bool src_unknown =
          batch.src_oov[static_cast<size_t>(r)][static_cast<size_t>(z)] != 0;
      const std::vector<Tensor>* src_states = nullptr;
      if (src_unknown && opts.variant == ModelVariant::kNested)
        src_states = &enc.char_states[static_cast<size_t>(z)];
      Tensor init = separate_path_init(tape, mp, t.context, t.d);
      Tensor l = char_forced_loss(tape, mp, init, chars, src_states);
      (src_unknown ? c2_terms : c1_terms).push_back(l);
    }
  }

  float inv = 1.0f / static_cast<float>(batch.size);
  LossBreakdown out;
  out.alpha = alpha;
  out.beta = beta;
  out.loss_w = tape.scale(detail::sum_scalars(tape, w_terms), inv);
  out.loss_c1 = tape.scale(detail::sum_scalars(tape, c1_terms), inv);
  out.loss_c2 = tape.scale(detail::sum_scalars(tape, c2_terms), inv);
  if (alpha == 0.0 && beta == 0.0) {
    out.total = out.loss_w;
  } else {
    out.total = tape.add(
        out.loss_w,
        tape.add(tape.scale(out.loss_c1, static_cast<float>(alpha)),
                 tape.scale(out.loss_c2, static_cast<float>(beta))));
  }
  return out;
}

}  // namespace emend
