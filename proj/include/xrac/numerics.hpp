#pragma once

// Dense 64-bit tensors, the deterministic generator, the scalar transform pair
// used by distillation, and a small reverse-mode tape over the fixed op set the
// teacher needs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xrac/errors.hpp"

namespace xrac {

inline constexpr double kProbEps = 1e-6;

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)) {
    data.assign(numel(shape), fill);
  }
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape{rows, cols}, data(rows * cols, fill) {}

  static std::size_t numel(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
    Tensor t(rows.size(), rows.empty() ? 0 : rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != t.cols()) throw DomainError("ragged rows");
      std::copy(rows[r].begin(), rows[r].end(), t.data.begin() + r * t.cols());
    }
    return t;
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  // Rank-2 views; higher-rank tensors fold trailing dims into cols.
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.empty() ? 0 : data.size() / std::max<std::size_t>(shape[0], 1); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }
  bool operator==(const Tensor&) const = default;
};

// std::mt19937_64 has a fully specified output sequence; the conversions to
// doubles and the shuffle below are ours so streams match across standard
// libraries (std::uniform_real_distribution and std::shuffle do not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw DomainError("Rng::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  // Independent child stream, e.g. for prior sampling separate from batching.
  Rng fork(std::uint64_t stream) const {
    std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Rng(z ^ (z >> 31));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

// Softmax(scores / sqrt(d)) with max subtraction.
inline std::vector<double> softmax_scaled(std::span<const double> scores, std::size_t d) {
  if (scores.empty()) throw DomainError("softmax_scaled: empty input");
  if (d == 0) throw DomainError("softmax_scaled: d must be positive");
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : scores) {
    if (!std::isfinite(s)) throw DomainError("softmax_scaled: non-finite score");
    mx = std::max(mx, s * inv);
  }
  std::vector<double> out(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] * inv - mx);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

inline double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

// T * ln(p / (1 - p)) on the clamped probability.
inline double logit_transform(double p, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw DomainError("logit_transform: temperature must be positive");
  }
  if (std::isnan(p)) throw DomainError("logit_transform: NaN probability");
  const double c = clamp_prob(p);
  return temperature * (std::log(c) - std::log1p(-c));
}

inline double expit_transform(double q, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw DomainError("expit_transform: temperature must be positive");
  }
  if (!std::isfinite(q)) throw DomainError("expit_transform: non-finite input");
  const double z = q / temperature;
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// A named trainable tensor; the gradient buffer always has the value's shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

// Single-owner reverse-mode tape. Every op records its output value and a
// closure that pushes the output gradient into its inputs.
class Tape {
 public:
  Var constant(Tensor t) { return push(std::move(t), false, {}); }

  // Leaf bound to an external parameter; backward() accumulates into p.grad.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return it->second;
    Var v = push(p.value, true, {});
    nodes_[v.id].param = &p;
    param_nodes_.emplace(&p, v);
    return v;
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  double scalar(Var v) const { return nodes_[v.id].value.data.at(0); }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    check(A.cols() == B.rows(), "matmul: inner dimensions differ");
    Tensor C = matmul_raw(A, B);
    return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      if (t.needs(a)) add_into(t.grad_of(a), matmul_nt_raw(G, t.value(b)));
      if (t.needs(b)) add_into(t.grad_of(b), matmul_tn_raw(t.value(a), G));
    });
  }

  // a * b^T
  Var matmul_nt(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    check(A.cols() == B.cols(), "matmul_nt: inner dimensions differ");
    Tensor C = matmul_nt_raw(A, B);
    return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      if (t.needs(a)) add_into(t.grad_of(a), matmul_raw(G, t.value(b)));
      if (t.needs(b)) add_into(t.grad_of(b), matmul_tn_raw(G, t.value(a)));
    });
  }

  Var add(Var a, Var b) {
    check(value(a).shape == value(b).shape, "add: shape mismatch");
    Tensor C = value(a);
    const Tensor& B = value(b);
    for (std::size_t i = 0; i < C.size(); ++i) C.data[i] += B.data[i];
    return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      if (t.needs(a)) add_into(t.grad_of(a), G);
      if (t.needs(b)) add_into(t.grad_of(b), G);
    });
  }

  // Adds a 1 x c row to every row of a.
  Var add_row(Var a, Var row) {
    const Tensor& R = value(row);
    check(R.rows() == 1 && R.cols() == value(a).cols(), "add_row: shape mismatch");
    Tensor C = value(a);
    for (std::size_t r = 0; r < C.rows(); ++r)
      for (std::size_t c = 0; c < C.cols(); ++c) C(r, c) += R.data[c];
    return push(std::move(C), needs(a) || needs(row), [a, row](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      if (t.needs(a)) add_into(t.grad_of(a), G);
      if (t.needs(row)) {
        Tensor& gr = t.grad_of(row);
        for (std::size_t r = 0; r < G.rows(); ++r)
          for (std::size_t c = 0; c < G.cols(); ++c) gr.data[c] += G(r, c);
      }
    });
  }

  Var mul(Var a, Var b) {
    check(value(a).shape == value(b).shape, "mul: shape mismatch");
    Tensor C = value(a);
    const Tensor& B = value(b);
    for (std::size_t i = 0; i < C.size(); ++i) C.data[i] *= B.data[i];
    return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      if (t.needs(a)) {
        Tensor& ga = t.grad_of(a);
        const Tensor& B = t.value(b);
        for (std::size_t i = 0; i < G.size(); ++i) ga.data[i] += G.data[i] * B.data[i];
      }
      if (t.needs(b)) {
        Tensor& gb = t.grad_of(b);
        const Tensor& A = t.value(a);
        for (std::size_t i = 0; i < G.size(); ++i) gb.data[i] += G.data[i] * A.data[i];
      }
    });
  }

  // scale * a + shift
  Var affine(Var a, double scale, double shift = 0.0) {
    Tensor C = value(a);
    for (double& v : C.data) v = scale * v + shift;
    return push(std::move(C), needs(a), [a, scale](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      Tensor& ga = t.grad_of(a);
      for (std::size_t i = 0; i < G.size(); ++i) ga.data[i] += scale * G.data[i];
    });
  }
  Var scale(Var a, double s) { return affine(a, s, 0.0); }

  // Row-wise softmax.
  Var softmax_rows(Var a) {
    Tensor Y = value(a);
    for (std::size_t r = 0; r < Y.rows(); ++r) {
      auto row = Y.row(r);
      const double mx = *std::max_element(row.begin(), row.end());
      double total = 0.0;
      for (double& v : row) {
        v = std::exp(v - mx);
        total += v;
      }
      for (double& v : row) v /= total;
    }
    return push(std::move(Y), needs(a), [a](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      const Tensor& Y = t.nodes_[self].value;
      Tensor& ga = t.grad_of(a);
      for (std::size_t r = 0; r < Y.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < Y.cols(); ++c) dot += G(r, c) * Y(r, c);
        for (std::size_t c = 0; c < Y.cols(); ++c) ga(r, c) += Y(r, c) * (G(r, c) - dot);
      }
    });
  }

  Var sigmoid(Var a) {
    Tensor Y = value(a);
    for (double& v : Y.data) v = xrac::sigmoid(v);
    return push(std::move(Y), needs(a), [a](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      const Tensor& Y = t.nodes_[self].value;
      Tensor& ga = t.grad_of(a);
      for (std::size_t i = 0; i < G.size(); ++i) ga.data[i] += G.data[i] * Y.data[i] * (1.0 - Y.data[i]);
    });
  }

  Var tanh(Var a) {
    Tensor Y = value(a);
    for (double& v : Y.data) v = std::tanh(v);
    return push(std::move(Y), needs(a), [a](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      const Tensor& Y = t.nodes_[self].value;
      Tensor& ga = t.grad_of(a);
      for (std::size_t i = 0; i < G.size(); ++i) ga.data[i] += G.data[i] * (1.0 - Y.data[i] * Y.data[i]);
    });
  }

  // tanh approximation of GELU.
  Var gelu(Var a) {
    static constexpr double kC = 0.7978845608028654;  // sqrt(2 / pi)
    static constexpr double kA = 0.044715;
    Tensor Y = value(a);
    for (double& v : Y.data) v = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
    return push(std::move(Y), needs(a), [a](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      const Tensor& X = t.value(a);
      Tensor& ga = t.grad_of(a);
      for (std::size_t i = 0; i < G.size(); ++i) {
        const double x = X.data[i];
        const double th = std::tanh(kC * (x + kA * x * x * x));
        const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * x * x);
        ga.data[i] += G.data[i] * d;
      }
    });
  }

  // log(clamp(a, eps, 1 - eps)); clamped entries pass no gradient.
  Var log_clamped(Var a, double eps = kProbEps) {
    Tensor Y = value(a);
    for (double& v : Y.data) v = std::log(std::clamp(v, eps, 1.0 - eps));
    return push(std::move(Y), needs(a), [a, eps](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      const Tensor& X = t.value(a);
      Tensor& ga = t.grad_of(a);
      for (std::size_t i = 0; i < G.size(); ++i) {
        const double x = X.data[i];
        if (x > eps && x < 1.0 - eps) ga.data[i] += G.data[i] / x;
      }
    });
  }

  Var sum(Var a) {
    const Tensor& A = value(a);
    double s = 0.0;
    for (double v : A.data) s += v;
    return push(Tensor(1, 1, s), needs(a), [a](Tape& t, std::size_t self) {
      const double g = t.nodes_[self].grad.data[0];
      Tensor& ga = t.grad_of(a);
      for (double& v : ga.data) v += g;
    });
  }

  Var mean(Var a) {
    const double n = static_cast<double>(value(a).size());
    check(n > 0, "mean: empty tensor");
    return scale(sum(a), 1.0 / n);
  }

  // n x c, n x c -> n x 1 of row inner products.
  Var row_dot(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    check(A.shape == B.shape, "row_dot: shape mismatch");
    Tensor C(A.rows(), 1);
    for (std::size_t r = 0; r < A.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < A.cols(); ++c) s += A(r, c) * B(r, c);
      C.data[r] = s;
    }
    return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      const Tensor& A = t.value(a);
      const Tensor& B = t.value(b);
      if (t.needs(a)) {
        Tensor& ga = t.grad_of(a);
        for (std::size_t r = 0; r < A.rows(); ++r)
          for (std::size_t c = 0; c < A.cols(); ++c) ga(r, c) += G.data[r] * B(r, c);
      }
      if (t.needs(b)) {
        Tensor& gb = t.grad_of(b);
        for (std::size_t r = 0; r < A.rows(); ++r)
          for (std::size_t c = 0; c < A.cols(); ++c) gb(r, c) += G.data[r] * A(r, c);
      }
    });
  }

  // Embedding lookup: output row k = table row ids[k].
  Var gather_rows(Var table, std::span<const int> ids) {
    const Tensor& T = value(table);
    Tensor Y(ids.size(), T.cols());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      check(ids[k] >= 0 && static_cast<std::size_t>(ids[k]) < T.rows(), "gather_rows: id out of range");
      std::copy_n(T.row(ids[k]).begin(), T.cols(), Y.row(k).begin());
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return push(std::move(Y), needs(table), [table, idv = std::move(idv)](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      Tensor& gt = t.grad_of(table);
      for (std::size_t k = 0; k < idv.size(); ++k)
        for (std::size_t c = 0; c < G.cols(); ++c) gt(idv[k], c) += G(k, c);
    });
  }

  // 1-d convolution along rows with zero "same" padding.
  // x: n x d_in, w: {k, d_in, d_out}, b: 1 x d_out -> n x d_out.
  Var conv1d_same(Var x, Var w, Var b) {
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    const Tensor& B = value(b);
    check(W.shape.size() == 3 && W.shape[1] == X.cols() && B.size() == W.shape[2],
          "conv1d_same: shape mismatch");
    const std::size_t k = W.shape[0], din = W.shape[1], dout = W.shape[2], n = X.rows();
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    Tensor Y(n, dout);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t o = 0; o < dout; ++o) Y(p, o) = B.data[o];
      for (std::size_t r = 0; r < k; ++r) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(p + r) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
        for (std::size_t i = 0; i < din; ++i) {
          const double xv = X(static_cast<std::size_t>(src), i);
          const double* wr = &W.data[(r * din + i) * dout];
          for (std::size_t o = 0; o < dout; ++o) Y(p, o) += xv * wr[o];
        }
      }
    }
    return push(std::move(Y), needs(x) || needs(w) || needs(b),
                [x, w, b, k, din, dout, n, pad](Tape& t, std::size_t self) {
                  const Tensor& G = t.nodes_[self].grad;
                  const Tensor& X = t.value(x);
                  const Tensor& W = t.value(w);
                  Tensor* gx = t.needs(x) ? &t.grad_of(x) : nullptr;
                  Tensor* gw = t.needs(w) ? &t.grad_of(w) : nullptr;
                  if (t.needs(b)) {
                    Tensor& gb = t.grad_of(b);
                    for (std::size_t p = 0; p < n; ++p)
                      for (std::size_t o = 0; o < dout; ++o) gb.data[o] += G(p, o);
                  }
                  for (std::size_t p = 0; p < n; ++p) {
                    for (std::size_t r = 0; r < k; ++r) {
                      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(p + r) - pad;
                      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
                      const auto s = static_cast<std::size_t>(src);
                      for (std::size_t i = 0; i < din; ++i) {
                        const std::size_t base = (r * din + i) * dout;
                        double acc = 0.0;
                        for (std::size_t o = 0; o < dout; ++o) {
                          acc += G(p, o) * W.data[base + o];
                          if (gw) gw->data[base + o] += G(p, o) * X(s, i);
                        }
                        if (gx) (*gx)(s, i) += acc;
                      }
                    }
                  }
                });
  }

  // Column-wise max over rows -> 1 x c. Ties go to the first row.
  Var max_pool_rows(Var x) {
    const Tensor& X = value(x);
    check(X.rows() >= 1, "max_pool_rows: empty input");
    Tensor Y(1, X.cols());
    std::vector<std::size_t> arg(X.cols(), 0);
    for (std::size_t c = 0; c < X.cols(); ++c) {
      Y.data[c] = X(0, c);
      for (std::size_t r = 1; r < X.rows(); ++r) {
        if (X(r, c) > Y.data[c]) {
          Y.data[c] = X(r, c);
          arg[c] = r;
        }
      }
    }
    return push(std::move(Y), needs(x), [x, arg = std::move(arg)](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      Tensor& gx = t.grad_of(x);
      for (std::size_t c = 0; c < arg.size(); ++c) gx(arg[c], c) += G.data[c];
    });
  }

  // Per-row normalization to zero mean / unit variance, then gamma * xhat + beta.
  Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const Tensor& X = value(x);
    const Tensor& Gm = value(gamma);
    const Tensor& Bt = value(beta);
    const std::size_t n = X.rows(), d = X.cols();
    check(Gm.size() == d && Bt.size() == d, "layer_norm_rows: shape mismatch");
    Tensor Y(n, d), xhat(n, d);
    std::vector<double> inv_std(n);
    for (std::size_t r = 0; r < n; ++r) {
      double mu = 0.0;
      for (std::size_t c = 0; c < d; ++c) mu += X(r, c);
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t c = 0; c < d; ++c) var += (X(r, c) - mu) * (X(r, c) - mu);
      var /= static_cast<double>(d);
      inv_std[r] = 1.0 / std::sqrt(var + eps);
      for (std::size_t c = 0; c < d; ++c) {
        xhat(r, c) = (X(r, c) - mu) * inv_std[r];
        Y(r, c) = Gm.data[c] * xhat(r, c) + Bt.data[c];
      }
    }
    return push(std::move(Y), needs(x) || needs(gamma) || needs(beta),
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                        std::size_t self) {
                  const Tensor& G = t.nodes_[self].grad;
                  const Tensor& Gm = t.value(gamma);
                  const std::size_t n = G.rows(), d = G.cols();
                  if (t.needs(gamma)) {
                    Tensor& gg = t.grad_of(gamma);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < d; ++c) gg.data[c] += G(r, c) * xhat(r, c);
                  }
                  if (t.needs(beta)) {
                    Tensor& gb = t.grad_of(beta);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < d; ++c) gb.data[c] += G(r, c);
                  }
                  if (t.needs(x)) {
                    Tensor& gx = t.grad_of(x);
                    for (std::size_t r = 0; r < n; ++r) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t c = 0; c < d; ++c) {
                        const double dxh = G(r, c) * Gm.data[c];
                        m1 += dxh;
                        m2 += dxh * xhat(r, c);
                      }
                      m1 /= static_cast<double>(d);
                      m2 /= static_cast<double>(d);
                      for (std::size_t c = 0; c < d; ++c) {
                        const double dxh = G(r, c) * Gm.data[c];
                        gx(r, c) += inv_std[r] * (dxh - m1 - xhat(r, c) * m2);
                      }
                    }
                  }
                });
  }

  // Stacks same-width blocks vertically.
  Var vstack(std::span<const Var> parts) {
    check(!parts.empty(), "vstack: no inputs");
    const std::size_t c = value(parts[0]).cols();
    std::size_t n = 0;
    bool any = false;
    for (Var p : parts) {
      check(value(p).cols() == c, "vstack: width mismatch");
      n += value(p).rows();
      any = any || needs(p);
    }
    Tensor Y(n, c);
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor& P = value(p);
      std::copy(P.data.begin(), P.data.end(), Y.data.begin() + off * c);
      off += P.rows();
    }
    std::vector<Var> pv(parts.begin(), parts.end());
    return push(std::move(Y), any, [pv = std::move(pv)](Tape& t, std::size_t self) {
      const Tensor& G = t.nodes_[self].grad;
      std::size_t off = 0;
      for (Var p : pv) {
        const std::size_t len = t.value(p).size();
        if (t.needs(p)) {
          Tensor& gp = t.grad_of(p);
          for (std::size_t i = 0; i < len; ++i) gp.data[i] += G.data[off + i];
        }
        off += len;
      }
    });
  }

  // Mean binary cross-entropy of sigmoid(z) against 0/1 targets, evaluated
  // from logits (softplus form) for stability.
  Var bce_with_logits(Var z, Tensor targets) {
    const Tensor& Z = value(z);
    check(Z.size() == targets.size() && Z.size() > 0, "bce_with_logits: shape mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < Z.size(); ++i) {
      const double v = Z.data[i];
      total += std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))) - targets.data[i] * v;
    }
    const double n = static_cast<double>(Z.size());
    return push(Tensor(1, 1, total / n), needs(z), [z, y = std::move(targets), n](Tape& t, std::size_t self) {
      const double g = t.nodes_[self].grad.data[0];
      const Tensor& Z = t.value(z);
      Tensor& gz = t.grad_of(z);
      for (std::size_t i = 0; i < Z.size(); ++i) gz.data[i] += g * (xrac::sigmoid(Z.data[i]) - y.data[i]) / n;
    });
  }

  // Reverse sweep from a scalar node; parameter gradients are accumulated
  // (not overwritten) into Parameter::grad.
  void backward(Var loss) {
    check(value(loss).size() == 1, "backward: loss must be scalar");
    for (auto& nd : nodes_) nd.grad = Tensor();
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].grad = Tensor(value(loss).shape, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& nd = nodes_[i];
      if (!nd.needs_grad || nd.grad.empty()) continue;
      if (nd.backward) nd.backward(*this, i);
      if (nd.param) add_into(nd.param->grad, nd.grad);
    }
  }

  static Tensor matmul_raw(const Tensor& A, const Tensor& B) {
    const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
    Tensor C(n, m);
    for (std::size_t i = 0; i < n; ++i) {
      double* ci = &C.data[i * m];
      for (std::size_t p = 0; p < k; ++p) {
        const double a = A.data[i * k + p];
        if (a == 0.0) continue;
        const double* bp = &B.data[p * m];
        for (std::size_t j = 0; j < m; ++j) ci[j] += a * bp[j];
      }
    }
    return C;
  }
  static Tensor matmul_nt_raw(const Tensor& A, const Tensor& B) {
    const std::size_t n = A.rows(), k = A.cols(), m = B.rows();
    Tensor C(n, m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += A.data[i * k + p] * B.data[j * k + p];
        C.data[i * m + j] = s;
      }
    return C;
  }
  // A^T * B
  static Tensor matmul_tn_raw(const Tensor& A, const Tensor& B) {
    const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
    Tensor C(k, m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double a = A.data[i * k + p];
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < m; ++j) C.data[p * m + j] += a * B.data[i * m + j];
      }
    return C;
  }

 private:
  using Backward = std::function<void(Tape&, std::size_t)>;
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Var push(Tensor v, bool needs_grad, Backward bw) {
    nodes_.push_back(Node{std::move(v), Tensor(), needs_grad, nullptr, needs_grad ? std::move(bw) : Backward()});
    return Var{nodes_.size() - 1};
  }
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  Tensor& grad_of(Var v) {
    Tensor& g = nodes_[v.id].grad;
    if (g.empty()) g = Tensor(nodes_[v.id].value.shape, 0.0);
    return g;
  }
  static void add_into(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst.data[i] += src.data[i];
  }
  static void check(bool ok, const char* what) {
    if (!ok) throw DomainError(what);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, Var> param_nodes_;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

// Compares tape gradients of build() against central differences over every
// coordinate of every parameter. build() must record the scalar loss on the
// tape it is given and be a pure function of the parameter values.
inline GradCheckResult grad_check(const std::function<Var(Tape&)>& build,
                                  std::span<Parameter* const> params, double step = 1e-4) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = build(tape);
    if (!std::isfinite(tape.scalar(loss))) throw EvaluationError("grad_check: non-finite loss at base point");
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape tape;
    const double v = tape.scalar(build(tape));
    if (!std::isfinite(v)) throw EvaluationError("grad_check: non-finite loss at probe point");
    return v;
  };
  GradCheckResult res;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data[i];
      p->value.data[i] = orig + step;
      const double fp = eval();
      p->value.data[i] = orig - step;
      const double fm = eval();
      p->value.data[i] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double analytic = p->grad.data[i];
      const double err = std::abs(analytic - fd) / std::max(1.0, std::abs(analytic));
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = p->name;
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace xrac
