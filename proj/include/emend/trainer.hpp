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
#include <cstdint>
#include <cstring>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "emend/corpus.hpp"
#include "emend/hybrid.hpp"
#include "emend/model.hpp"
#include "emend/nn.hpp"
#include "emend/serialize.hpp"
#include "emend/tensor.hpp"

namespace emend {

enum class Optimizer { kAdam, kSgd };

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "adam") return Optimizer::kAdam;
  if (s == "sgd") return Optimizer::kSgd;
  throw UsageError("unknown optimizer: " + s);
}

inline const char* optimizer_name(Optimizer o) {
  return o == Optimizer::kAdam ? "adam" : "sgd";
}

struct TrainConfig {
  int batch = 128;
  double lr = 0.0003;
  double decay = 0.95;
  double clip = 10.0;
  float dropout = 0.15f;
  double alpha = 0.5;
  double beta = 0.5;
  int val_interval = 5000;
  int ckpt_interval = 10000;
  std::uint64_t seed = 1;
  int embed = 64;
  int hidden = 64;
  int char_embed = 0;   // zero inherits embed
  int char_hidden = 0;  // zero inherits hidden
  int vocab_k = 30000;
  Optimizer optimizer = Optimizer::kAdam;
  ModelVariant variant = ModelVariant::kNested;
};

inline void validate_config(const TrainConfig& c) {
  if (c.batch < 1) throw UsageError("batch size must be positive");
  if (c.lr <= 0.0) throw UsageError("learning rate must be positive");
  if (c.decay <= 0.0 || c.decay > 1.0)
    throw UsageError("decay ratio must be in (0, 1]");
  if (c.clip <= 0.0) throw UsageError("clip threshold must be positive");
  if (c.dropout < 0.0f || c.dropout >= 1.0f)
    throw UsageError("dropout rate must be in [0, 1)");
  if (c.alpha < 0.0 || c.beta < 0.0)
    throw UsageError("loss weights must be nonnegative");
  if (c.val_interval < 1 || c.ckpt_interval < 1)
    throw UsageError("intervals must be positive");
  if (c.embed < 1 || c.hidden < 1 || c.char_embed < 0 || c.char_hidden < 0)
    throw UsageError("dimensions must be positive");
  if (c.vocab_k < 1) throw UsageError("vocabulary size must be positive");
}

/// Half-width of the uniform initialization interval for a given
/// recurrent width; hidden 1000 gives the familiar 0.05477.
inline double init_bound(int hidden) {
  if (hidden < 1) throw UsageError("init_bound: hidden width must be positive");
  return std::sqrt(3.0 / static_cast<double>(hidden));
}

namespace detail {

inline bool is_bias_name(const std::string& name) {
  size_t dot = name.rfind('.');
  if (dot == std::string::npos) return false;
  std::string leaf = name.substr(dot + 1);
  return leaf == "b" || leaf == "bz" || leaf == "br" || leaf == "bh";
}

}  // namespace detail

/// Fresh model with weights drawn uniformly from the interval above
/// and biases zero; deterministic in the seed.
inline ModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
  ModelParams mp = make_model_params(dims);
  float bound = static_cast<float>(init_bound(dims.hidden));
  Rng rng(seed);
  for (const std::string& name : mp.set.names()) {
    if (detail::is_bias_name(name)) continue;
    for (float& v : mp.set.get(name).value()) v = rng.uniform(-bound, bound);
  }
  return mp;
}

/// Adam first/second moments by parameter name; step counts the
/// updates applied for bias correction. Plain SGD keeps no state.
struct OptState {
  long long step = 0;
  std::map<std::string, std::vector<float>> m, v;
};

inline void apply_update(ModelParams& mp, OptState& opt, Optimizer kind,
                         double lr) {
  if (kind == Optimizer::kSgd) {
    for (const std::string& name : mp.set.names()) {
      Tensor t = mp.set.get(name);
      const std::vector<float>& g = t.grad();
      for (int i = 0; i < t.numel(); ++i)
        t.value()[static_cast<size_t>(i)] = static_cast<float>(
            static_cast<double>(t.value()[static_cast<size_t>(i)]) -
            lr * static_cast<double>(g[static_cast<size_t>(i)]));
    }
    return;
  }
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  opt.step += 1;
  double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
  double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
  for (const std::string& name : mp.set.names()) {
    Tensor t = mp.set.get(name);
    size_t n = static_cast<size_t>(t.numel());
    std::vector<float>& m = opt.m[name];
    std::vector<float>& v = opt.v[name];
    if (m.size() != n) m.assign(n, 0.0f);
    if (v.size() != n) v.assign(n, 0.0f);
    for (size_t i = 0; i < n; ++i) {
      double g = t.grad()[i];
      double mi = b1 * m[i] + (1.0 - b1) * g;
      double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      t.value()[i] = static_cast<float>(
          static_cast<double>(t.value()[i]) -
          lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
    }
  }
}

struct StepResult {
  double loss_w = 0.0;
  double loss_c1 = 0.0;
  double loss_c2 = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;  // before clipping
  bool clipped = false;
};

/// One optimization step over an encoded batch. Dropout noise is drawn
/// from a stream derived from (seed, iteration), so an interrupted run
/// resumed at the same iteration is bit-identical to an uninterrupted
/// one.
inline StepResult train_step(ModelParams& mp, OptState& opt, const Batch& batch,
                             const TrainConfig& cfg, double lr,
                             long long iter) {
  Tape tape;
  ForwardOpts opts;
  opts.variant = cfg.variant;
  opts.dropout = cfg.dropout;
  opts.training = true;
  Rng rng(Rng::mix(cfg.seed, static_cast<std::uint64_t>(iter)));
  opts.rng = &rng;

  StepResult res;
  try {
    LossBreakdown bd = total_loss(tape, mp, batch, cfg.alpha, cfg.beta, opts);
    res.loss_w = bd.loss_w.scalar();
    res.loss_c1 = bd.loss_c1.scalar();
    res.loss_c2 = bd.loss_c2.scalar();
    res.total = bd.total.scalar();
    if (!std::isfinite(res.total))
      throw NumericError("non-finite loss");
    mp.set.zero_grad();
    tape.backward(bd.total);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " at iteration " +
                       std::to_string(iter));
  }
  res.grad_norm = clip_gradients(mp.set, cfg.clip);
  res.clipped = res.grad_norm > cfg.clip;
  apply_update(mp, opt, cfg.optimizer, lr);
  return res;
}

/// Decays the rate only after two consecutive increases in the sampled
/// validation cost.
inline double lr_schedule_update(const std::vector<double>& history, double lr,
                                 double decay) {
  size_t n = history.size();
  if (n < 3) return lr;
  if (history[n - 1] > history[n - 2] && history[n - 2] > history[n - 3])
    return lr * decay;
  return lr;
}

/// Mean per-sentence loss over a held-out set, dropout disabled and no
/// gradient bookkeeping.
inline double validation_loss(const ModelParams& mp,
                              const std::vector<SentencePair>& pairs,
                              const Vocabulary& src_vocab,
                              const Vocabulary& tgt_vocab,
                              const CharVocabulary& cv,
                              const TrainConfig& cfg) {
  if (pairs.empty()) throw DataError("validation set is empty");
  ForwardOpts opts;
  opts.variant = cfg.variant;
  double total = 0.0;
  size_t b = static_cast<size_t>(cfg.batch);
  for (size_t i = 0; i < pairs.size(); i += b) {
    size_t hi = std::min(pairs.size(), i + b);
    std::vector<SentencePair> slice(pairs.begin() + static_cast<long>(i),
                                    pairs.begin() + static_cast<long>(hi));
    Batch batch = encode_batch(slice, src_vocab, tgt_vocab, cv);
    Tape tape;
    tape.grad_enabled = false;
    LossBreakdown bd = total_loss(tape, mp, batch, cfg.alpha, cfg.beta, opts);
    total += static_cast<double>(bd.total.scalar()) *
             static_cast<double>(slice.size());
  }
  return total / static_cast<double>(pairs.size());
}

/// Shuffled index batches for one epoch; the shuffle stream is derived
/// from the seed and epoch under a tag that keeps it apart from the
/// per-iteration dropout streams.
inline std::vector<std::vector<size_t>> epoch_batches(size_t n_pairs, int batch,
                                                      std::uint64_t seed,
                                                      long long epoch) {
  if (n_pairs == 0) throw DataError("epoch_batches: empty corpus");
  if (batch < 1) throw UsageError("epoch_batches: batch size must be positive");
  std::vector<size_t> idx(n_pairs);
  std::iota(idx.begin(), idx.end(), size_t{0});
  Rng rng(Rng::mix(Rng::mix(seed, 0x45504F43ULL),
                   static_cast<std::uint64_t>(epoch)));
  rng.shuffle(idx);
  std::vector<std::vector<size_t>> out;
  for (size_t i = 0; i < idx.size(); i += static_cast<size_t>(batch)) {
    size_t hi = std::min(idx.size(), i + static_cast<size_t>(batch));
    out.emplace_back(idx.begin() + static_cast<long>(i),
                     idx.begin() + static_cast<long>(hi));
  }
  return out;
}

// ---- checkpointing ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorData {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelDims dims;
  TrainConfig config;
  long long iteration = 0;
  std::vector<double> val_history;
  std::vector<std::pair<std::string, TensorData>> tensors;
  OptState opt;
};

namespace detail {

inline void write_config(BinWriter& w, const TrainConfig& c) {
  w.u64(c.seed);
  w.f64(c.lr);
  w.f64(c.decay);
  w.f64(c.clip);
  w.f64(c.alpha);
  w.f64(c.beta);
  w.f32(c.dropout);
  w.u32(static_cast<std::uint32_t>(c.batch));
  w.u32(static_cast<std::uint32_t>(c.val_interval));
  w.u32(static_cast<std::uint32_t>(c.ckpt_interval));
  w.u32(static_cast<std::uint32_t>(c.embed));
  w.u32(static_cast<std::uint32_t>(c.hidden));
  w.u32(static_cast<std::uint32_t>(c.char_embed));
  w.u32(static_cast<std::uint32_t>(c.char_hidden));
  w.u32(static_cast<std::uint32_t>(c.vocab_k));
  w.u8(c.optimizer == Optimizer::kAdam ? 0 : 1);
  w.u8(static_cast<std::uint8_t>(c.variant));
}

inline TrainConfig read_config(BinReader& r) {
  TrainConfig c;
  c.seed = r.u64();
  c.lr = r.f64();
  c.decay = r.f64();
  c.clip = r.f64();
  c.alpha = r.f64();
  c.beta = r.f64();
  c.dropout = r.f32();
  c.batch = static_cast<int>(r.u32());
  c.val_interval = static_cast<int>(r.u32());
  c.ckpt_interval = static_cast<int>(r.u32());
  c.embed = static_cast<int>(r.u32());
  c.hidden = static_cast<int>(r.u32());
  c.char_embed = static_cast<int>(r.u32());
  c.char_hidden = static_cast<int>(r.u32());
  c.vocab_k = static_cast<int>(r.u32());
  c.optimizer = r.u8() == 0 ? Optimizer::kAdam : Optimizer::kSgd;
  std::uint8_t v = r.u8();
  if (v > 2) throw DataError("checkpoint names an unknown model variant");
  c.variant = static_cast<ModelVariant>(v);
  return c;
}

inline void write_record(BinWriter& w, const std::string& name,
                         const Shape& shape, const std::vector<float>& vals) {
  w.str(name);
  w.u64(shape.size());
  for (int d : shape) w.u64(static_cast<std::uint64_t>(d));
  w.f32_array(vals);
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& mp, const OptState& opt,
                            long long iteration,
                            const std::vector<double>& val_history,
                            const TrainConfig& cfg, const std::string& path) {
  BinWriter w(path);
  w.bytes("NAHM", 4);
  w.u32(kCheckpointVersion);
  detail::write_config(w, cfg);
  w.u32(static_cast<std::uint32_t>(mp.dims.src_vocab));
  w.u32(static_cast<std::uint32_t>(mp.dims.tgt_vocab));
  w.u32(static_cast<std::uint32_t>(mp.dims.char_vocab));
  w.u32(static_cast<std::uint32_t>(mp.dims.embed));
  w.u32(static_cast<std::uint32_t>(mp.dims.hidden));
  w.u32(static_cast<std::uint32_t>(mp.dims.char_embed));
  w.u32(static_cast<std::uint32_t>(mp.dims.char_hidden));
  w.u64(static_cast<std::uint64_t>(iteration));
  w.u64(static_cast<std::uint64_t>(opt.step));
  w.f64_array(val_history);
  w.u64(mp.set.size() + opt.m.size() + opt.v.size());
  for (const std::string& name : mp.set.names()) {
    Tensor t = mp.set.get(name);
    detail::write_record(w, name, t.shape(), t.value());
  }
  for (const auto& [name, vals] : opt.m)
    detail::write_record(w, "opt/m/" + name,
                         {static_cast<int>(vals.size())}, vals);
  for (const auto& [name, vals] : opt.v)
    detail::write_record(w, "opt/v/" + name,
                         {static_cast<int>(vals.size())}, vals);
  w.close();
}

inline Checkpoint load_checkpoint(const std::string& path) {
  BinReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "NAHM", 4) != 0)
    throw DataError("not a checkpoint file: " + path);
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " +
                    std::to_string(version) + ": " + path);
  Checkpoint ck;
  ck.config = detail::read_config(r);
  ck.dims.src_vocab = static_cast<int>(r.u32());
  ck.dims.tgt_vocab = static_cast<int>(r.u32());
  ck.dims.char_vocab = static_cast<int>(r.u32());
  ck.dims.embed = static_cast<int>(r.u32());
  ck.dims.hidden = static_cast<int>(r.u32());
  ck.dims.char_embed = static_cast<int>(r.u32());
  ck.dims.char_hidden = static_cast<int>(r.u32());
  ck.iteration = static_cast<long long>(r.u64());
  ck.opt.step = static_cast<long long>(r.u64());
  ck.val_history = r.f64_array();
  std::uint64_t count = r.u64();
  if (count > (1ULL << 20))
    throw DataError("implausible checkpoint record count: " + path);
  for (std::uint64_t k = 0; k < count; ++k) {
    std::string name = r.str();
    std::uint64_t rank = r.u64();
    if (rank > 8) throw DataError("implausible tensor rank: " + path);
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint64_t i = 0; i < rank; ++i) {
      std::uint64_t d = r.u64();
      if (d == 0 || d > (1ULL << 32))
        throw DataError("implausible tensor dimension: " + path);
      numel *= d;
      if (numel > (1ULL << 27))
        throw DataError("implausible tensor size: " + path);
      shape.push_back(static_cast<int>(d));
    }
    std::vector<float> vals = r.f32_array(static_cast<size_t>(numel));
    if (name.rfind("opt/m/", 0) == 0) {
      ck.opt.m[name.substr(6)] = std::move(vals);
    } else if (name.rfind("opt/v/", 0) == 0) {
      ck.opt.v[name.substr(6)] = std::move(vals);
    } else {
      ck.tensors.push_back({name, {std::move(shape), std::move(vals)}});
    }
  }
  return ck;
}

/// Copies the checkpoint's tensors into an existing model; names and
/// shapes must line up exactly.
inline void restore_into(const Checkpoint& ck, ModelParams& mp) {
  if (ck.tensors.size() != mp.set.size())
    throw DataError("checkpoint holds " + std::to_string(ck.tensors.size()) +
                    " tensors, model expects " + std::to_string(mp.set.size()));
  for (const auto& [name, td] : ck.tensors) {
    if (!mp.set.has(name))
      throw DataError("checkpoint names unknown parameter: " + name);
    Tensor t = mp.set.get(name);
    if (t.shape() != td.shape)
      throw DataError("checkpoint shape mismatch for parameter: " + name);
    t.value() = td.values;
  }
}

inline ModelParams params_from_checkpoint(const Checkpoint& ck) {
  ModelParams mp = make_model_params(ck.dims);
  restore_into(ck, mp);
  return mp;
}

// ---- model selection ----

struct CheckpointScore {
  long long iteration = 0;
  double val_loss = 0.0;
  double dev_f = 0.0;
};

/// Two-stage choice: keep the pool_size checkpoints with lowest
/// validation loss, then take the best dev F-score, ties to the
/// earliest iteration. Returns an index into the input.
inline size_t select_model(const std::vector<CheckpointScore>& scores,
                           size_t pool_size = 20) {
  if (scores.empty()) throw DataError("select_model: no checkpoints");
  if (pool_size < 1) throw UsageError("select_model: empty pool");
  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    if (scores[a].val_loss != scores[b].val_loss)
      return scores[a].val_loss < scores[b].val_loss;
    return scores[a].iteration < scores[b].iteration;
  });
  if (idx.size() > pool_size) idx.resize(pool_size);
  size_t best = idx[0];
  for (size_t i : idx) {
    if (scores[i].dev_f > scores[best].dev_f ||
        (scores[i].dev_f == scores[best].dev_f &&
         scores[i].iteration < scores[best].iteration))
      best = i;
  }
  return best;
}

}  // namespace emend
