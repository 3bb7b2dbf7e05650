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
#include <functional>
#include <map>
#include <string>

#include "emend/tensor.hpp"

// Named parameter storage, the GRU cell, gradient clipping, and a
// finite-difference gradient checker.

namespace emend {

/// Owns long-lived trainable tensors, addressable by name. Creation
/// order is stable and defines iteration/serialization order.
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(const ParamSet&) = delete;
  ParamSet& operator=(const ParamSet&) = delete;
  ParamSet(ParamSet&&) = default;
  ParamSet& operator=(ParamSet&&) = default;

  Tensor add(const std::string& name, Shape shape) {
    if (by_name_.count(name)) throw Error("duplicate parameter: " + name);
    int n = shape_numel(shape);
    nodes_.emplace_back();
    TensorNode& node = nodes_.back();
    node.shape = std::move(shape);
    node.value.assign(static_cast<size_t>(n), 0.0f);
    node.requires_grad = true;
    node.ensure_grad();
    node.id = next_node_id();
    Tensor t(&node);
    by_name_[name] = t;
    order_.push_back(name);
    return t;
  }

  Tensor get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return by_name_.count(name) != 0; }
  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }

  void zero_grad() {
    for (TensorNode& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0f);
  }

  size_t total_values() const {
    size_t n = 0;
    for (const TensorNode& node : nodes_) n += node.value.size();
    return n;
  }

 private:
  std::deque<TensorNode> nodes_;
  std::map<std::string, Tensor> by_name_;
  std::vector<std::string> order_;
};

/// y = W x + b
struct Affine {
  Tensor w;  // [out, in]
  Tensor b;  // [out]

  Tensor apply(Tape& tape, Tensor x) const {
    return tape.add(tape.matvec(w, x), b);
  }
};

struct GruParams {
  Tensor wz, uz, bz;  // update gate
  Tensor wr, ur, br;  // reset gate
  Tensor wh, uh, bh;  // candidate

  int hidden() const { return wz.dim(0); }
  int input() const { return wz.dim(1); }
};

inline GruParams make_gru(ParamSet& ps, const std::string& prefix, int input,
                          int hidden) {
  GruParams g;
  g.wz = ps.add(prefix + ".wz", {hidden, input});
  g.uz = ps.add(prefix + ".uz", {hidden, hidden});
  g.bz = ps.add(prefix + ".bz", {hidden});
  g.wr = ps.add(prefix + ".wr", {hidden, input});
  g.ur = ps.add(prefix + ".ur", {hidden, hidden});
  g.br = ps.add(prefix + ".br", {hidden});
  g.wh = ps.add(prefix + ".wh", {hidden, input});
  g.uh = ps.add(prefix + ".uh", {hidden, hidden});
  g.bh = ps.add(prefix + ".bh", {hidden});
  return g;
}

// One GRU step. Gates z and r are sigmoids of affine maps of (x, h_prev);
// the candidate applies the reset gate to h_prev before its recurrent
// term; the new state interpolates h' = (1-z) . h_prev + z . h~.
inline Tensor gru_cell(Tape& tape, const GruParams& p, Tensor h_prev,
                       Tensor x) {
  if (x.rank() != 1 || h_prev.rank() != 1 || x.dim(0) != p.input() ||
      h_prev.dim(0) != p.hidden())
    throw Error("gru_cell: dimension mismatch");
  Tensor z = tape.sigmoid(
      tape.add(tape.add(tape.matvec(p.wz, x), tape.matvec(p.uz, h_prev)), p.bz));
  Tensor r = tape.sigmoid(
      tape.add(tape.add(tape.matvec(p.wr, x), tape.matvec(p.ur, h_prev)), p.br));
  Tensor cand = tape.tanh(tape.add(
      tape.add(tape.matvec(p.wh, x), tape.matvec(p.uh, tape.mul(r, h_prev))),
      p.bh));
  return tape.add(tape.mul(tape.rsub_const(1.0f, z), h_prev),
                  tape.mul(z, cand));
}

/// Global-norm clipping over every gradient in the set. Scales in place
/// when the L2 norm exceeds the threshold; returns the pre-clip norm.
inline double clip_gradients(ParamSet& params, double threshold) {
  if (threshold <= 0.0) throw Error("clip_gradients: threshold must be > 0");
  double sq = 0.0;
  for (const std::string& name : params.names()) {
    Tensor t = params.get(name);
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  }
  double norm = std::sqrt(sq);
  if (norm > threshold) {
    float s = static_cast<float>(threshold / norm);
    for (const std::string& name : params.names()) {
      Tensor t = params.get(name);
      for (float& g : t.grad()) g *= s;
    }
  }
  return norm;
}

/// Central-difference check of the analytic gradients of `f`, a function
/// that rebuilds the same scalar loss on a fresh tape each call (it must
/// be deterministic; run with dropout disabled). Checks up to
/// `max_per_param` coordinates of each parameter (0 = all), chosen with
/// `seed`. Returns max |analytic - fd| / max(1, |fd|).
inline double check_gradients(const std::function<Tensor(Tape&)>& f,
                              ParamSet& params, double eps,
                              int max_per_param = 0, std::uint64_t seed = 0) {
  params.zero_grad();
  std::vector<std::vector<float>> analytic;
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
  }
  for (const std::string& name : params.names())
    analytic.push_back(params.get(name).grad());

  auto eval = [&]() -> double {
    Tape tape;
    tape.grad_enabled = false;
    Tensor loss = f(tape);
    float v = loss.scalar();
    if (!std::isfinite(v)) throw NumericError("check_gradients: non-finite loss");
    return v;
  };

  Rng rng(Rng::mix(seed, 0x6772616463686bULL));
  double worst = 0.0;
  size_t pi = 0;
  for (const std::string& name : params.names()) {
    Tensor t = params.get(name);
    std::vector<int> coords(static_cast<size_t>(t.numel()));
    for (int i = 0; i < t.numel(); ++i) coords[static_cast<size_t>(i)] = i;
    if (max_per_param > 0 && t.numel() > max_per_param) {
      rng.shuffle(coords);
      coords.resize(static_cast<size_t>(max_per_param));
    }
    for (int c : coords) {
      float saved = t.data()[c];
      t.data()[c] = saved + static_cast<float>(eps);
      double up = eval();
      t.data()[c] = saved - static_cast<float>(eps);
      double down = eval();
      t.data()[c] = saved;
      double fd = (up - down) / (2.0 * eps);
      double rel = std::abs(analytic[pi][static_cast<size_t>(c)] - fd) /
                   std::max(1.0, std::abs(fd));
      worst = std::max(worst, rel);
    }
    ++pi;
  }
  return worst;
}

}  // namespace emend
