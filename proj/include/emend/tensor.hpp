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

#include <atomic>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Dense float32 tensors with reverse-mode automatic differentiation.
//
// A Tape owns the nodes of one forward episode and records backward
// closures in creation order (a Wengert list), so reverse iteration is a
// valid topological order. Parameters live outside the tape (see
// ParamSet in nn.hpp) and are referenced by pointer; they must outlive
// every tape that touches them.

namespace emend {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Bad command line or config. CLI maps this to exit code 1.
struct UsageError : Error {
  using Error::Error;
};
// Malformed or inconsistent input data. Exit code 2.
struct DataError : Error {
  using Error::Error;
};
// Non-finite loss or other numeric failure. Exit code 3.
struct NumericError : Error {
  using Error::Error;
};

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) throw Error("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

struct TensorNode {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until the node joins a backward pass
  bool requires_grad = false;
  std::uint64_t id = 0;

  int numel() const { return static_cast<int>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
  }
};

/// Non-owning handle to a node on a Tape or in a ParamSet.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(TensorNode* n) : node_(n) {}

  bool defined() const { return node_ != nullptr; }
  TensorNode* node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  int numel() const { return node_->numel(); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }

  float* data() { return node_->value.data(); }
  const float* data() const { return node_->value.data(); }
  std::vector<float>& value() { return node_->value; }
  const std::vector<float>& value() const { return node_->value; }
  std::vector<float>& grad() { return node_->grad; }
  const std::vector<float>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }

  float scalar() const {
    if (node_->numel() != 1) throw Error("scalar() on non-scalar tensor");
    return node_->value[0];
  }

 private:
  TensorNode* node_ = nullptr;
};

/// Deterministic RNG. Identical seeds give identical draw sequences on
/// every platform (mt19937_64 plus explicit bit arithmetic; no
/// implementation-defined distributions).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // 53-bit uniform in [0, 1)
  double u01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  float uniform(float lo, float hi) {
    return lo + (hi - lo) * static_cast<float>(u01());
  }

  // uniform index in [0, n) via the multiply-shift bound
  std::uint64_t index(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(gen_()) * n) >> 64);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string save_state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (!is) throw DataError("bad rng state string");
  }

  // splitmix64 finalizer; used to derive independent streams
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // When false, ops run forward-only and record nothing (inference mode).
  bool grad_enabled = true;

  size_t node_count() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    steps_.clear();
  }

  Tensor leaf(Shape shape, float fill = 0.0f) {
    TensorNode& n = alloc(std::move(shape));
    std::fill(n.value.begin(), n.value.end(), fill);
    return Tensor(&n);
  }

  Tensor constant(std::vector<float> v, Shape shape) {
    if (static_cast<int>(v.size()) != shape_numel(shape))
      throw Error("constant: value size does not match shape");
    TensorNode& n = alloc(std::move(shape));
    n.value = std::move(v);
    return Tensor(&n);
  }

  Tensor constant(std::vector<float> v) {
    Shape s{static_cast<int>(v.size())};
    return constant(std::move(v), std::move(s));
  }

  // ---- elementwise ----

  Tensor add(Tensor a, Tensor b) {
    check_same_shape(a, b, "add");
    Tensor y = like(a);
    const float* av = a.data();
    const float* bv = b.data();
    float* yv = y.data();
    for (int i = 0; i < y.numel(); ++i) yv[i] = av[i] + bv[i];
    if (track(y, {a, b})) {
      record([a, b, y]() {
        const float* g = y.node()->grad.data();
        accumulate(a, [&](int i) { return g[i]; });
        accumulate(b, [&](int i) { return g[i]; });
      });
    }
    return y;
  }

  Tensor sub(Tensor a, Tensor b) {
    check_same_shape(a, b, "sub");
    Tensor y = like(a);
    for (int i = 0; i < y.numel(); ++i)
      y.data()[i] = a.data()[i] - b.data()[i];
    if (track(y, {a, b})) {
      record([a, b, y]() {
        const float* g = y.node()->grad.data();
        accumulate(a, [&](int i) { return g[i]; });
        accumulate(b, [&](int i) { return -g[i]; });
      });
    }
    return y;
  }

  Tensor mul(Tensor a, Tensor b) {
    check_same_shape(a, b, "mul");
    Tensor y = like(a);
    for (int i = 0; i < y.numel(); ++i)
      y.data()[i] = a.data()[i] * b.data()[i];
    if (track(y, {a, b})) {
      record([a, b, y]() {
        const float* g = y.node()->grad.data();
        accumulate(a, [&](int i) { return g[i] * b.data()[i]; });
        accumulate(b, [&](int i) { return g[i] * a.data()[i]; });
      });
    }
    return y;
  }

  Tensor scale(Tensor a, float c) {
    Tensor y = like(a);
    for (int i = 0; i < y.numel(); ++i) y.data()[i] = c * a.data()[i];
    if (track(y, {a})) {
      record([a, y, c]() {
        const float* g = y.node()->grad.data();
        accumulate(a, [&](int i) { return c * g[i]; });
      });
    }
    return y;
  }

  // c - a, elementwise
  Tensor rsub_const(float c, Tensor a) {
    Tensor y = like(a);
    for (int i = 0; i < y.numel(); ++i) y.data()[i] = c - a.data()[i];
    if (track(y, {a})) {
      record([a, y]() {
        const float* g = y.node()->grad.data();
        accumulate(a, [&](int i) { return -g[i]; });
      });
    }
    return y;
  }

  Tensor tanh(Tensor a) {
    Tensor y = like(a);
    for (int i = 0; i < y.numel(); ++i) y.data()[i] = std::tanh(a.data()[i]);
    if (track(y, {a})) {
      record([a, y]() {
        const float* g = y.node()->grad.data();
        const float* v = y.data();
        accumulate(a, [&](int i) { return (1.0f - v[i] * v[i]) * g[i]; });
      });
    }
    return y;
  }

  Tensor sigmoid(Tensor a) {
    Tensor y = like(a);
    for (int i = 0; i < y.numel(); ++i) {
      float x = a.data()[i];
      y.data()[i] = x >= 0 ? 1.0f / (1.0f + std::exp(-x))
                           : std::exp(x) / (1.0f + std::exp(x));
    }
    if (track(y, {a})) {
      record([a, y]() {
        const float* g = y.node()->grad.data();
        const float* v = y.data();
        accumulate(a, [&](int i) { return v[i] * (1.0f - v[i]) * g[i]; });
      });
    }
    return y;
  }

  Tensor relu(Tensor a) {
    Tensor y = like(a);
    for (int i = 0; i < y.numel(); ++i)
      y.data()[i] = a.data()[i] > 0 ? a.data()[i] : 0.0f;
    if (track(y, {a})) {
      record([a, y]() {
        const float* g = y.node()->grad.data();
        accumulate(a, [&](int i) { return a.data()[i] > 0 ? g[i] : 0.0f; });
      });
    }
    return y;
  }

  // ---- linear algebra ----

  // [m,k] x [k,n] -> [m,n]
  Tensor matmul(Tensor a, Tensor b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
      throw Error("matmul: shape mismatch");
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor y = make({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int p = 0; p < k; ++p)
          acc += static_cast<double>(a.data()[i * k + p]) * b.data()[p * n + j];
        y.data()[i * n + j] = static_cast<float>(acc);
      }
    if (track(y, {a, b})) {
      record([a, b, y, m, k, n]() {
        const float* g = y.node()->grad.data();
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              double acc = 0.0;
              for (int j = 0; j < n; ++j)
                acc += static_cast<double>(g[i * n + j]) * b.data()[p * n + j];
              a.node()->grad[i * k + p] += static_cast<float>(acc);
            }
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          for (int p = 0; p < k; ++p)
            for (int j = 0; j < n; ++j) {
              double acc = 0.0;
              for (int i = 0; i < m; ++i)
                acc += static_cast<double>(a.data()[i * k + p]) * g[i * n + j];
              b.node()->grad[p * n + j] += static_cast<float>(acc);
            }
        }
      });
    }
    return y;
  }

  // [m,k] x [k] -> [m]
  Tensor matvec(Tensor a, Tensor x) {
    if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.dim(0))
      throw Error("matvec: shape mismatch");
    int m = a.dim(0), k = a.dim(1);
    Tensor y = make({m});
    for (int i = 0; i < m; ++i) {
      double acc = 0.0;
      const float* row = a.data() + static_cast<size_t>(i) * k;
      for (int j = 0; j < k; ++j) acc += static_cast<double>(row[j]) * x.data()[j];
      y.data()[i] = static_cast<float>(acc);
    }
    if (track(y, {a, x})) {
      record([a, x, y, m, k]() {
        const float* g = y.node()->grad.data();
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < k; ++j)
              a.node()->grad[i * k + j] += g[i] * x.data()[j];
        }
        if (x.requires_grad()) {
          x.node()->ensure_grad();
          for (int j = 0; j < k; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i)
              acc += static_cast<double>(a.data()[i * k + j]) * g[i];
            x.node()->grad[j] += static_cast<float>(acc);
          }
        }
      });
    }
    return y;
  }

  // A^T x: [t,d] x [t] -> [d]; the attention mixing step
  Tensor matvec_t(Tensor a, Tensor x) {
    if (a.rank() != 2 || x.rank() != 1 || a.dim(0) != x.dim(0))
      throw Error("matvec_t: shape mismatch");
    int t = a.dim(0), d = a.dim(1);
    Tensor y = make({d});
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int i = 0; i < t; ++i)
        acc += static_cast<double>(a.data()[i * d + j]) * x.data()[i];
      y.data()[j] = static_cast<float>(acc);
    }
    if (track(y, {a, x})) {
      record([a, x, y, t, d]() {
        const float* g = y.node()->grad.data();
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          for (int i = 0; i < t; ++i)
            for (int j = 0; j < d; ++j)
              a.node()->grad[i * d + j] += x.data()[i] * g[j];
        }
        if (x.requires_grad()) {
          x.node()->ensure_grad();
          for (int i = 0; i < t; ++i) {
            double acc = 0.0;
            for (int j = 0; j < d; ++j)
              acc += static_cast<double>(a.data()[i * d + j]) * g[j];
            x.node()->grad[i] += static_cast<float>(acc);
          }
        }
      });
    }
    return y;
  }

  // ---- structure ----

  Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw Error("concat: no inputs");
    int total = 0;
    for (const Tensor& p : parts) {
      if (p.rank() != 1) throw Error("concat: 1-D inputs only");
      total += p.numel();
    }
    Tensor y = make({total});
    int off = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
      std::copy(p.data(), p.data() + p.numel(), y.data() + off);
      off += p.numel();
      any_grad = any_grad || p.requires_grad();
    }
    if (grad_enabled && any_grad) {
      mark(y);
      std::vector<Tensor> held(parts);
      record([held, y]() {
        const float* g = y.node()->grad.data();
        int o = 0;
        for (const Tensor& p : held) {
          if (p.requires_grad()) {
            p.node()->ensure_grad();
            for (int i = 0; i < p.numel(); ++i)
              p.node()->grad[i] += g[o + i];
          }
          o += p.numel();
        }
      });
    }
    return y;
  }

  // rows of equal length d -> [t,d]
  Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw Error("stack_rows: no inputs");
    int d = rows[0].numel();
    for (const Tensor& r : rows)
      if (r.rank() != 1 || r.numel() != d)
        throw Error("stack_rows: rows must be 1-D of equal length");
    int t = static_cast<int>(rows.size());
    Tensor y = make({t, d});
    bool any_grad = false;
    for (int i = 0; i < t; ++i) {
      std::copy(rows[i].data(), rows[i].data() + d, y.data() + i * d);
      any_grad = any_grad || rows[i].requires_grad();
    }
    if (grad_enabled && any_grad) {
      mark(y);
      std::vector<Tensor> held(rows);
      record([held, y, d]() {
        const float* g = y.node()->grad.data();
        for (size_t i = 0; i < held.size(); ++i) {
          if (!held[i].requires_grad()) continue;
          held[i].node()->ensure_grad();
          for (int j = 0; j < d; ++j)
            held[i].node()->grad[j] += g[i * d + j];
        }
      });
    }
    return y;
  }

  // embedding lookup: row of [v,e] -> [e]
  Tensor row(Tensor table, int index) {
    if (table.rank() != 2) throw Error("row: table must be 2-D");
    int v = table.dim(0), e = table.dim(1);
    if (index < 0 || index >= v) throw Error("row: index out of range");
    Tensor y = make({e});
    std::copy(table.data() + static_cast<size_t>(index) * e,
              table.data() + static_cast<size_t>(index + 1) * e, y.data());
    if (track(y, {table})) {
      record([table, y, index, e]() {
        const float* g = y.node()->grad.data();
        table.node()->ensure_grad();
        float* tg = table.node()->grad.data() + static_cast<size_t>(index) * e;
        for (int i = 0; i < e; ++i) tg[i] += g[i];
      });
    }
    return y;
  }

  // ---- probability ----

  Tensor softmax(Tensor x) {
    if (x.rank() != 1 || x.numel() < 1) throw Error("softmax: nonempty 1-D input required");
    for (int i = 0; i < x.numel(); ++i)
      if (!std::isfinite(x.data()[i]))
        throw NumericError("softmax: non-finite input");
    int n = x.numel();
    Tensor y = make({n});
    float mx = x.data()[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x.data()[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
      y.data()[i] = std::exp(x.data()[i] - mx);
      z += y.data()[i];
    }
    float inv = static_cast<float>(1.0 / z);
    for (int i = 0; i < n; ++i) y.data()[i] *= inv;
    if (track(y, {x})) {
      record([x, y, n]() {
        const float* g = y.node()->grad.data();
        const float* v = y.data();
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += static_cast<double>(g[i]) * v[i];
        x.node()->ensure_grad();
        for (int i = 0; i < n; ++i)
          x.node()->grad[i] += v[i] * (g[i] - static_cast<float>(dot));
      });
    }
    return y;
  }

  Tensor log_softmax(Tensor x) {
    if (x.rank() != 1 || x.numel() < 1)
      throw Error("log_softmax: nonempty 1-D input required");
    int n = x.numel();
    Tensor y = make({n});
    double lse = log_sum_exp(x.data(), n);
    for (int i = 0; i < n; ++i)
      y.data()[i] = static_cast<float>(x.data()[i] - lse);
    if (track(y, {x})) {
      record([x, y, n]() {
        const float* g = y.node()->grad.data();
        const float* v = y.data();
        double gsum = 0.0;
        for (int i = 0; i < n; ++i) gsum += g[i];
        x.node()->ensure_grad();
        for (int i = 0; i < n; ++i)
          x.node()->grad[i] +=
              g[i] - static_cast<float>(std::exp(v[i]) * gsum);
      });
    }
    return y;
  }

  // -log softmax(logits)[target], as a scalar
  Tensor cross_entropy(Tensor logits, int target) {
    if (logits.rank() != 1) throw Error("cross_entropy: 1-D logits required");
    int n = logits.numel();
    if (target < 0 || target >= n)
      throw Error("cross_entropy: target out of range");
    Tensor y = make({1});
    double lse = log_sum_exp(logits.data(), n);
    y.data()[0] = static_cast<float>(lse - logits.data()[target]);
    if (track(y, {logits})) {
      record([logits, y, target, n, lse]() {
        float g = y.node()->grad[0];
        logits.node()->ensure_grad();
        for (int i = 0; i < n; ++i) {
          float p = static_cast<float>(std::exp(logits.data()[i] - lse));
          logits.node()->grad[i] += g * (p - (i == target ? 1.0f : 0.0f));
        }
      });
    }
    return y;
  }

  Tensor sum(Tensor x) {
    Tensor y = make({1});
    double acc = 0.0;
    for (int i = 0; i < x.numel(); ++i) acc += x.data()[i];
    y.data()[0] = static_cast<float>(acc);
    if (track(y, {x})) {
      record([x, y]() {
        float g = y.node()->grad[0];
        accumulate(x, [&](int) { return g; });
      });
    }
    return y;
  }

  // Inverted dropout: scales kept entries by 1/keep at training time so
  // inference is the identity. rate==0 or !training returns x unchanged
  // and draws nothing.
  Tensor dropout(Tensor x, float rate, Rng& rng, bool training) {
    if (rate < 0.0f || rate >= 1.0f) throw Error("dropout: rate must be in [0,1)");
    if (!training || rate == 0.0f) return x;
    float keep = 1.0f - rate;
    std::vector<float> mask(static_cast<size_t>(x.numel()));
    for (float& m : mask)
      m = rng.u01() < keep ? 1.0f / keep : 0.0f;
    Tensor y = like(x);
    for (int i = 0; i < x.numel(); ++i) y.data()[i] = x.data()[i] * mask[i];
    if (track(y, {x})) {
      record([x, y, mask = std::move(mask)]() {
        const float* g = y.node()->grad.data();
        accumulate(x, [&](int i) { return g[i] * mask[i]; });
      });
    }
    return y;
  }

  // ---- backward ----

  void backward(Tensor loss) {
    if (loss.numel() != 1) throw Error("backward: loss must be scalar");
    if (!loss.requires_grad())
      throw Error("backward: loss does not require grad");
    if (!std::isfinite(loss.scalar()))
      throw NumericError("backward: non-finite loss");
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0f;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::deque<TensorNode> nodes_;  // stable addresses
  std::vector<std::function<void()>> steps_;

  TensorNode& alloc(Shape shape) {
    int n = shape_numel(shape);
    nodes_.emplace_back();
    TensorNode& node = nodes_.back();
    node.shape = std::move(shape);
    node.value.resize(static_cast<size_t>(n));
    node.id = next_node_id();
    return node;
  }

  Tensor make(Shape shape) { return Tensor(&alloc(std::move(shape))); }
  Tensor like(Tensor a) { return make(a.shape()); }

  void mark(Tensor y) {
    y.node()->requires_grad = true;
    y.node()->ensure_grad();
  }

  bool track(Tensor y, std::initializer_list<Tensor> parents) {
    if (!grad_enabled) return false;
    bool any = false;
    for (const Tensor& p : parents) any = any || p.requires_grad();
    if (any) mark(y);
    return any;
  }

  void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }

  template <class F>
  static void accumulate(Tensor t, F&& per_index) {
    if (!t.requires_grad()) return;
    t.node()->ensure_grad();
    float* g = t.node()->grad.data();
    for (int i = 0; i < t.numel(); ++i) g[i] += per_index(i);
  }

  static double log_sum_exp(const float* v, int n) {
    float mx = v[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += std::exp(static_cast<double>(v[i]) - mx);
    return mx + std::log(acc);
  }

  static void check_same_shape(Tensor a, Tensor b, const char* op) {
    if (a.shape() != b.shape())
      throw Error(std::string(op) + ": shape mismatch");
  }
};

}  // namespace emend
