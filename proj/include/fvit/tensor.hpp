#pragma once

// Dense tensor storage plus tape-based reverse-mode autodiff.
//
// A Tensor<Real> is a cheap handle onto a shared node holding the value
// buffer and (once backward has run) the gradient buffer. Differentiable
// ops record an entry on the active Tape; replaying entries in reverse
// execution order is a valid reverse-topological walk, so each entry runs
// exactly once and gradient accumulation order is fixed and reproducible.
//
// Values are immutable after an op produces them; only gradient buffers
// (and parameter values, between optimizer steps) are written in place.
// A tape and the tensors recorded on it belong to one execution context:
// the active tape is thread-local, so independent contexts on separate
// threads do not share autodiff state.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fvit/errors.hpp"

namespace fvit {

using Shape = std::vector<size_t>;
using Rng = std::mt19937_64;

// Per-sample lists of K flattened spatial positions (idx = i*W + j).
using SelectionIndex = std::vector<std::vector<uint32_t>>;

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// splitmix64; used to derive independent rng streams from (seed, salt).
inline uint64_t mix_seed(uint64_t base, uint64_t salt) {
  uint64_t z = base + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until backward reaches this node
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
  }
};

template <typename Real>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<Real>>;

  Tensor() : n_(std::make_shared<Node<Real>>()) {}

  static Tensor zeros(const Shape& s) { return filled(s, Real(0)); }
  static Tensor ones(const Shape& s) { return filled(s, Real(1)); }

  static Tensor filled(const Shape& s, Real v) {
    Tensor t;
    t.n_->shape = s;
    t.n_->value.assign(numel(s), v);
    return t;
  }

  static Tensor from(const Shape& s, std::vector<Real> data) {
    if (numel(s) != data.size())
      throw DimError("tensor: shape " + shape_str(s) + " expects " +
                     std::to_string(numel(s)) + " values, got " +
                     std::to_string(data.size()));
    Tensor t;
    t.n_->shape = s;
    t.n_->value = std::move(data);
    return t;
  }

  static Tensor scalar(Real v) { return from({1}, {v}); }

  const Shape& shape() const { return n_->shape; }
  size_t rank() const { return n_->shape.size(); }
  size_t size() const { return n_->value.size(); }
  size_t dim(size_t i) const { return n_->shape[i]; }

  std::vector<Real>& data() { return n_->value; }
  const std::vector<Real>& data() const { return n_->value; }
  Real* ptr() { return n_->value.data(); }
  const Real* ptr() const { return n_->value.data(); }

  Real item() const {
    if (size() != 1)
      throw ContractError("item: tensor has " + std::to_string(size()) +
                          " elements, expected 1");
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    n_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<Real>& grad() const {
    if (n_->grad.empty())
      throw ContractError("grad: not populated; run backward() first");
    return n_->grad;
  }
  std::vector<Real>& mutable_grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() { n_->grad.clear(); }

  // Value copy with no grad tracking; used for recording observations.
  Tensor detach() const {
    Tensor t;
    t.n_->shape = n_->shape;
    t.n_->value = n_->value;
    return t;
  }

  NodePtr node() const { return n_; }

 private:
  NodePtr n_;
};

// ==================== Tape ====================

template <typename Real>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_slot(); }

  // keep: nodes the backward closure reads (inputs and output); holding
  // them here is what keeps intermediates alive until clear().
  void record(std::vector<std::shared_ptr<Node<Real>>> keep,
              std::function<void()> backward_fn) {
    entries_.push_back({std::move(backward_fn), std::move(keep)});
  }

  size_t size() const { return entries_.size(); }

  void clear() { entries_.clear(); }

  void backward(const Tensor<Real>& loss) {
    if (loss.size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    if (entries_.empty()) throw ContractError("backward: tape is empty");
    auto n = loss.node();
    n->ensure_grad();
    n->grad[0] = Real(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
  }

 private:
  struct Entry {
    std::function<void()> fn;
    std::vector<std::shared_ptr<Node<Real>>> keep;
  };
  std::vector<Entry> entries_;

  static Tape*& current_slot() {
    thread_local Tape* t = nullptr;
    return t;
  }
  template <typename R>
  friend class TapeScope;
};

// Activates a tape for the enclosing scope; restores the previous one on
// exit so contexts can nest.
template <typename Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>& t) : prev_(Tape<Real>::current_slot()) {
    Tape<Real>::current_slot() = &t;
  }
  ~TapeScope() { Tape<Real>::current_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* prev_;
};

template <typename Real>
void backward(const Tensor<Real>& loss) {
  auto* t = Tape<Real>::current();
  if (!t) throw ContractError("backward: no active tape");
  t->backward(loss);
}

namespace detail {

// ==================== matmul kernels ====================
// All kernels accumulate into C; callers zero-fill first. Each output
// element is produced by exactly one serial reduction, so results do not
// depend on scheduling.

// Lane-wise accumulator rows vectorize without float reassociation (each
// lane is a distinct output), so the row-major saxpy form is the fast one;
// dot-product forms stay scalar under strict FP and are avoided on hot
// paths. Narrow outputs get fixed-width register tiles.

template <typename Real, size_t NW>
void mm_nn_tile(const Real* a, const Real* b, Real* c, size_t m, size_t k) {
  for (size_t i = 0; i < m; ++i) {
    Real acc[NW] = {};
    const Real* arow = a + i * k;
    for (size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real* brow = b + p * NW;
      for (size_t j = 0; j < NW; ++j) acc[j] += av * brow[j];
    }
    Real* crow = c + i * NW;
    for (size_t j = 0; j < NW; ++j) crow[j] += acc[j];
  }
}

// C(m,n) += A(m,k) * B(k,n)
template <typename Real>
void mm_nn_acc(const Real* a, const Real* b, Real* c, size_t m, size_t k,
               size_t n) {
  if (k >= 8) {
    switch (n) {
      case 4: return mm_nn_tile<Real, 4>(a, b, c, m, k);
      case 8: return mm_nn_tile<Real, 8>(a, b, c, m, k);
      case 12: return mm_nn_tile<Real, 12>(a, b, c, m, k);
      case 16: return mm_nn_tile<Real, 16>(a, b, c, m, k);
      default: break;
    }
  }
  for (size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    Real* crow = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real* brow = b + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m,n) += A(m,k) * B(n,k)^T
template <typename Real>
void mm_nt_acc(const Real* a, const Real* b, Real* c, size_t m, size_t k,
               size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    Real* crow = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const Real* brow = b + j * k;
      Real acc = 0;
      for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C(m,n) += A(k,m)^T * B(k,n)
template <typename Real>
void mm_tn_acc(const Real* a, const Real* b, Real* c, size_t m, size_t k,
               size_t n) {
  for (size_t p = 0; p < k; ++p) {
    const Real* brow = b + p * n;
    const Real* acol = a + p * m;
    for (size_t i = 0; i < m; ++i) {
      const Real av = acol[i];
      Real* crow = c + i * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// ==================== broadcasting ====================

struct BcastPlan {
  Shape out;
  // element strides into each operand per output dim; 0 on broadcast dims
  std::vector<size_t> sa, sb;
};

inline BcastPlan make_bcast(const Shape& a, const Shape& b, const char* op) {
  const size_t r = std::max(a.size(), b.size());
  BcastPlan p;
  p.out.resize(r);
  p.sa.resize(r);
  p.sb.resize(r);
  // right-aligned dims; missing leading dims act as 1
  std::vector<size_t> da(r, 1), db(r, 1);
  for (size_t i = 0; i < a.size(); ++i) da[r - a.size() + i] = a[i];
  for (size_t i = 0; i < b.size(); ++i) db[r - b.size() + i] = b[i];
  for (size_t i = 0; i < r; ++i) {
    if (da[i] == db[i]) {
      p.out[i] = da[i];
    } else if (da[i] == 1) {
      p.out[i] = db[i];
    } else if (db[i] == 1) {
      p.out[i] = da[i];
    } else {
      throw DimError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                     shape_str(b) + " are not broadcastable");
    }
  }
  std::vector<size_t> full_sa(r), full_sb(r);
  size_t st = 1;
  for (size_t i = r; i-- > 0;) {
    full_sa[i] = st;
    st *= da[i];
  }
  st = 1;
  for (size_t i = r; i-- > 0;) {
    full_sb[i] = st;
    st *= db[i];
  }
  for (size_t i = 0; i < r; ++i) {
    p.sa[i] = (da[i] == 1 && p.out[i] != 1) ? 0 : full_sa[i];
    p.sb[i] = (db[i] == 1 && p.out[i] != 1) ? 0 : full_sb[i];
  }
  return p;
}

// Walks every output index of `plan`, invoking f(out_flat, a_flat, b_flat).
template <typename F>
void for_bcast(const BcastPlan& plan, F&& f) {
  const size_t r = plan.out.size();
  const size_t total = numel(plan.out);
  if (total == 0) return;
  std::vector<size_t> idx(r, 0);
  size_t ia = 0, ib = 0;
  for (size_t flat = 0; flat < total; ++flat) {
    f(flat, ia, ib);
    // odometer increment
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      ia += plan.sa[d];
      ib += plan.sb[d];
      if (idx[d] < plan.out[d]) break;
      ia -= plan.sa[d] * plan.out[d];
      ib -= plan.sb[d] * plan.out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ==================== elementwise ops ====================

namespace detail {

// Shared implementation for broadcastable binary ops.
// fwd(a, b) -> out; bwd_a(g, a, b), bwd_b(g, a, b) -> grad contributions.
template <typename Real, typename F, typename Da, typename Db>
Tensor<Real> binary_op(const Tensor<Real>& a, const Tensor<Real>& b,
                       const char* name, F fwd, Da dfa, Db dfb) {
  const bool fast = a.shape() == b.shape();
  Tensor<Real> out;
  if (fast) {
    std::vector<Real> v(a.size());
    const Real* pa = a.ptr();
    const Real* pb = b.ptr();
    for (size_t i = 0; i < v.size(); ++i) v[i] = fwd(pa[i], pb[i]);
    out = Tensor<Real>::from(a.shape(), std::move(v));
  } else {
    auto plan = make_bcast(a.shape(), b.shape(), name);
    std::vector<Real> v(numel(plan.out));
    const Real* pa = a.ptr();
    const Real* pb = b.ptr();
    for_bcast(plan, [&](size_t o, size_t ia, size_t ib) {
      v[o] = fwd(pa[ia], pb[ib]);
    });
    out = Tensor<Real>::from(plan.out, std::move(v));
  }
  auto* tape = Tape<Real>::current();
  const bool need = tape && (a.requires_grad() || b.requires_grad());
  if (need) {
    out.set_requires_grad(true);
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    if (fast) {
      tape->record({an, bn, on}, [=]() {
        if (on->grad.empty()) return;
        const size_t n = on->grad.size();
        if (an->requires_grad) {
          an->ensure_grad();
          for (size_t i = 0; i < n; ++i)
            an->grad[i] += dfa(on->grad[i], an->value[i], bn->value[i]);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (size_t i = 0; i < n; ++i)
            bn->grad[i] += dfb(on->grad[i], an->value[i], bn->value[i]);
        }
      });
    } else {
      auto plan = make_bcast(a.shape(), b.shape(), name);
      tape->record({an, bn, on}, [=]() {
        if (on->grad.empty()) return;
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for_bcast(plan, [&](size_t o, size_t ia, size_t ib) {
          const Real g = on->grad[o];
          if (an->requires_grad)
            an->grad[ia] += dfa(g, an->value[ia], bn->value[ib]);
          if (bn->requires_grad)
            bn->grad[ib] += dfb(g, an->value[ia], bn->value[ib]);
        });
      });
    }
  }
  return out;
}

template <typename Real, typename F, typename D>
Tensor<Real> unary_op(const Tensor<Real>& x, F fwd, D dfdx) {
  std::vector<Real> v(x.size());
  const Real* px = x.ptr();
  for (size_t i = 0; i < v.size(); ++i) v[i] = fwd(px[i]);
  Tensor<Real> out = Tensor<Real>::from(x.shape(), std::move(v));
  auto* tape = Tape<Real>::current();
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto on = out.node();
    tape->record({xn, on}, [=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += on->grad[i] * dfdx(xn->value[i], on->value[i]);
    });
  }
  return out;
}

template <typename Real>
inline Real stable_sigmoid(Real z) {
  if (z >= 0) return Real(1) / (Real(1) + std::exp(-z));
  const Real e = std::exp(z);
  return e / (Real(1) + e);
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_op(
      a, b, "add", [](Real x, Real y) { return x + y; },
      [](Real g, Real, Real) { return g; }, [](Real g, Real, Real) { return g; });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_op(
      a, b, "sub", [](Real x, Real y) { return x - y; },
      [](Real g, Real, Real) { return g; },
      [](Real g, Real, Real) { return -g; });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_op(
      a, b, "mul", [](Real x, Real y) { return x * y; },
      [](Real g, Real, Real y) { return g * y; },
      [](Real g, Real x, Real) { return g * x; });
}

template <typename Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_op(
      a, b, "div", [](Real x, Real y) { return x / y; },
      [](Real g, Real, Real y) { return g / y; },
      [](Real g, Real x, Real y) { return -g * x / (y * y); });
}

template <typename Real>
Tensor<Real> mul_scalar(const Tensor<Real>& x, Real c) {
  return detail::unary_op(
      x, [c](Real v) { return v * c; }, [c](Real, Real) { return c; });
}

template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, Real c) {
  return detail::unary_op(
      x, [c](Real v) { return v + c; }, [](Real, Real) { return Real(1); });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
  return detail::unary_op(
      x, [](Real v) { return detail::stable_sigmoid(v); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary_op(
      x,
      [](Real v) {
        return Real(0.5) * v * (Real(1) + Real(std::erf(double(v) * kInvSqrt2)));
      },
      [](Real v, Real) {
        const double cdf = 0.5 * (1.0 + std::erf(double(v) * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(v) * double(v));
        return Real(cdf + double(v) * pdf);
      });
}

template <typename Real>
Tensor<Real> relu6(const Tensor<Real>& x) {
  return detail::unary_op(
      x,
      [](Real v) { return std::min(std::max(v, Real(0)), Real(6)); },
      [](Real v, Real) { return (v > Real(0) && v < Real(6)) ? Real(1) : Real(0); });
}

template <typename Real>
Tensor<Real> exp(const Tensor<Real>& x) {
  return detail::unary_op(
      x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

template <typename Real>
Tensor<Real> log(const Tensor<Real>& x) {
  return detail::unary_op(
      x, [](Real v) { return std::log(v); },
      [](Real v, Real) { return Real(1) / v; });
}

template <typename Real>
Tensor<Real> sqrt(const Tensor<Real>& x) {
  return detail::unary_op(
      x, [](Real v) { return std::sqrt(v); },
      [](Real, Real y) { return Real(0.5) / y; });
}

template <typename Real>
Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) {
  return add(a, b);
}
template <typename Real>
Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) {
  return sub(a, b);
}
template <typename Real>
Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) {
  return mul(a, b);
}

// ==================== matmul / bmm ====================

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimError("matmul: incompatible shapes " + shape_str(a.shape()) +
                   " and " + shape_str(b.shape()));
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> v(m * n, Real(0));
  detail::mm_nn_acc(a.ptr(), b.ptr(), v.data(), m, k, n);
  Tensor<Real> out = Tensor<Real>::from({m, n}, std::move(v));
  auto* tape = Tape<Real>::current();
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    tape->record({an, bn, on}, [=]() {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        // dA = dC * B^T
        detail::mm_nt_acc(on->grad.data(), bn->value.data(), an->grad.data(),
                          m, n, k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB = A^T * dC
        detail::mm_tn_acc(an->value.data(), on->grad.data(), bn->grad.data(),
                          k, m, n);
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> bmm(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1))
    throw DimError("bmm: incompatible shapes " + shape_str(a.shape()) +
                   " and " + shape_str(b.shape()));
  const size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<Real> v(bs * m * n, Real(0));
  for (size_t i = 0; i < bs; ++i)
    detail::mm_nn_acc(a.ptr() + i * m * k, b.ptr() + i * k * n,
                      v.data() + i * m * n, m, k, n);
  Tensor<Real> out = Tensor<Real>::from({bs, m, n}, std::move(v));
  auto* tape = Tape<Real>::current();
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    tape->record({an, bn, on}, [=]() {
      if (on->grad.empty()) return;
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      // dA = dC * B^T via the row kernel on a transposed slice
      std::vector<Real> bt(an->requires_grad ? k * n : 0);
      for (size_t i = 0; i < bs; ++i) {
        const Real* g = on->grad.data() + i * m * n;
        if (an->requires_grad) {
          const Real* bsl = bn->value.data() + i * k * n;
          for (size_t p = 0; p < k; ++p)
            for (size_t j = 0; j < n; ++j) bt[j * k + p] = bsl[p * n + j];
          detail::mm_nn_acc(g, bt.data(), an->grad.data() + i * m * k, m, n,
                            k);
        }
        if (bn->requires_grad)
          detail::mm_tn_acc(an->value.data() + i * m * k, g,
                            bn->grad.data() + i * k * n, k, m, n);
      }
    });
  }
  return out;
}

// ==================== shape ops ====================

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, const Shape& s) {
  if (numel(s) != x.size())
    throw DimError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                   shape_str(s));
  Tensor<Real> out = Tensor<Real>::from(s, x.data());
  auto* tape = Tape<Real>::current();
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto on = out.node();
    tape->record({xn, on}, [=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> permute(const Tensor<Real>& x, const std::vector<size_t>& perm) {
  const size_t r = x.rank();
  if (perm.size() != r)
    throw DimError("permute: rank " + std::to_string(r) + " vs perm size " +
                   std::to_string(perm.size()));
  Shape out_shape(r);
  for (size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  // strides of the source
  std::vector<size_t> xs(r, 1);
  for (size_t i = r - 1; i-- > 0;) xs[i] = xs[i + 1] * x.dim(i + 1);
  std::vector<size_t> src_stride(r);
  for (size_t i = 0; i < r; ++i) src_stride[i] = xs[perm[i]];

  std::vector<Real> v(x.size());
  std::vector<size_t> idx(r, 0);
  size_t src = 0;
  const Real* px = x.ptr();
  for (size_t o = 0; o < v.size(); ++o) {
    v[o] = px[src];
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  Tensor<Real> out = Tensor<Real>::from(out_shape, std::move(v));
  auto* tape = Tape<Real>::current();
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto on = out.node();
    auto stride = src_stride;
    auto oshape = out_shape;
    tape->record({xn, on}, [=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      std::vector<size_t> it(oshape.size(), 0);
      size_t s = 0;
      for (size_t o = 0; o < on->grad.size(); ++o) {
        xn->grad[s] += on->grad[o];
        for (size_t d = oshape.size(); d-- > 0;) {
          it[d]++;
          s += stride[d];
          if (it[d] < oshape[d]) break;
          s -= stride[d] * oshape[d];
          it[d] = 0;
        }
      }
    });
  }
  return out;
}

// ==================== reductions ====================

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real acc = 0;
  for (Real v : x.data()) acc += v;
  Tensor<Real> out = Tensor<Real>::scalar(acc);
  auto* tape = Tape<Real>::current();
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto on = out.node();
    tape->record({xn, on}, [=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      const Real g = on->grad[0];
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  return mul_scalar(sum(x), Real(1) / Real(x.size()));
}

// ==================== softmax ====================

namespace detail {

// exp for the float path: 2^round(x*log2e) * poly(remainder), accurate to
// ~1 ulp over the post-max-subtraction range and vectorizable, which libm's
// scalar expf is not. Doubles keep std::exp.
template <typename Real>
inline Real softmax_exp(Real x) {
  return std::exp(x);
}

inline float softmax_exp(float x) {
  x = x < -87.0f ? -87.0f : x;
  const float z = x * 1.44269504088896341f;
  const float nf = std::floor(z + 0.5f);
  const float t = (z - nf) * 0.693147180559945286f;
  float p = 1.0f / 720;
  p = p * t + 1.0f / 120;
  p = p * t + 1.0f / 24;
  p = p * t + 1.0f / 6;
  p = p * t + 0.5f;
  p = p * t + 1.0f;
  p = p * t + 1.0f;
  const uint32_t bits = uint32_t(int32_t(nf) + 127) << 23;
  float scale;
  std::memcpy(&scale, &bits, sizeof scale);
  return p * scale;
}

}  // namespace detail

// Row-normalized exponentials along `axis`, computed with max-subtraction.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, int axis) {
  const size_t r = x.rank();
  if (axis < 0) axis += int(r);
  if (axis < 0 || size_t(axis) >= r)
    throw DimError("softmax: axis out of range for shape " +
                   shape_str(x.shape()));
  size_t outer = 1, inner = 1;
  const size_t len = x.dim(size_t(axis));
  for (size_t i = 0; i < size_t(axis); ++i) outer *= x.dim(i);
  for (size_t i = size_t(axis) + 1; i < r; ++i) inner *= x.dim(i);

  std::vector<Real> v(x.size());
  const Real* px = x.ptr();
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      const size_t base = o * len * inner + in;
      Real mx = px[base];
      for (size_t l = 1; l < len; ++l)
        mx = std::max(mx, px[base + l * inner]);
      Real denom = 0;
      for (size_t l = 0; l < len; ++l) {
        const Real e = detail::softmax_exp(px[base + l * inner] - mx);
        v[base + l * inner] = e;
        denom += e;
      }
      const Real inv = Real(1) / denom;
      for (size_t l = 0; l < len; ++l) v[base + l * inner] *= inv;
    }
  }
  Tensor<Real> out = Tensor<Real>::from(x.shape(), std::move(v));
  auto* tape = Tape<Real>::current();
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto on = out.node();
    tape->record({xn, on}, [=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
          const size_t base = o * len * inner + in;
          Real dot = 0;
          for (size_t l = 0; l < len; ++l) {
            const size_t i = base + l * inner;
            dot += on->grad[i] * on->value[i];
          }
          for (size_t l = 0; l < len; ++l) {
            const size_t i = base + l * inner;
            xn->grad[i] += on->value[i] * (on->grad[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ==================== gather / scatter ====================

namespace detail {

inline void check_selection(const SelectionIndex& idx, size_t batch,
                            size_t hw) {
  if (idx.size() != batch)
    throw IndexError("selection: " + std::to_string(idx.size()) +
                     " sample lists for batch " + std::to_string(batch));
  const size_t k = idx.empty() ? 0 : idx[0].size();
  for (size_t b = 0; b < idx.size(); ++b) {
    if (idx[b].size() != k)
      throw IndexError("selection: sample " + std::to_string(b) + " has " +
                       std::to_string(idx[b].size()) + " indices, expected " +
                       std::to_string(k));
    std::vector<bool> seen(hw, false);
    for (uint32_t p : idx[b]) {
      if (p >= hw)
        throw IndexError("selection: sample " + std::to_string(b) +
                         " index " + std::to_string(p) + " out of range [0," +
                         std::to_string(hw) + ")");
      if (seen[p])
        throw IndexError("selection: sample " + std::to_string(b) +
                         " duplicate index " + std::to_string(p));
      seen[p] = true;
    }
  }
}

}  // namespace detail

// x (B,C,H,W), indices (B lists of K positions) -> tokens (B,K,C).
template <typename Real>
Tensor<Real> gather(const Tensor<Real>& x, const SelectionIndex& indices) {
  if (x.rank() != 4)
    throw DimError("gather: expected rank-4 feature map, got " +
                   shape_str(x.shape()));
  const size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const size_t hw = H * W;
  detail::check_selection(indices, B, hw);
  const size_t K = indices.empty() ? 0 : indices[0].size();

  std::vector<Real> v(B * K * C);
  const Real* px = x.ptr();
  for (size_t b = 0; b < B; ++b)
    for (size_t k = 0; k < K; ++k) {
      const size_t pos = indices[b][k];
      for (size_t c = 0; c < C; ++c)
        v[(b * K + k) * C + c] = px[(b * C + c) * hw + pos];
    }
  Tensor<Real> out = Tensor<Real>::from({B, K, C}, std::move(v));
  auto* tape = Tape<Real>::current();
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto on = out.node();
    auto idx = indices;
    tape->record({xn, on}, [=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t b = 0; b < B; ++b)
        for (size_t k = 0; k < K; ++k) {
          const size_t pos = idx[b][k];
          for (size_t c = 0; c < C; ++c)
            xn->grad[(b * C + c) * hw + pos] += on->grad[(b * K + k) * C + c];
        }
    });
  }
  return out;
}

// Writes token vectors back at their source positions; all other positions
// keep the base values. Gradients flow to both the tokens and the base
// (the base gradient is masked out at overwritten positions).
template <typename Real>
Tensor<Real> scatter(const Tensor<Real>& base, const Tensor<Real>& tokens,
                     const SelectionIndex& indices) {
  if (base.rank() != 4 || tokens.rank() != 3)
    throw DimError("scatter: expected map rank 4 and tokens rank 3, got " +
                   shape_str(base.shape()) + " and " +
                   shape_str(tokens.shape()));
  const size_t B = base.dim(0), C = base.dim(1), H = base.dim(2),
               W = base.dim(3);
  const size_t hw = H * W;
  detail::check_selection(indices, B, hw);
  const size_t K = indices.empty() ? 0 : indices[0].size();
  if (tokens.dim(0) != B || tokens.dim(1) != K || tokens.dim(2) != C)
    throw DimError("scatter: tokens " + shape_str(tokens.shape()) +
                   " do not match map " + shape_str(base.shape()) + " with K=" +
                   std::to_string(K));

  std::vector<Real> v = base.data();
  const Real* pt = tokens.ptr();
  for (size_t b = 0; b < B; ++b)
    for (size_t k = 0; k < K; ++k) {
      const size_t pos = indices[b][k];
      for (size_t c = 0; c < C; ++c)
        v[(b * C + c) * hw + pos] = pt[(b * K + k) * C + c];
    }
  Tensor<Real> out = Tensor<Real>::from(base.shape(), std::move(v));
  auto* tape = Tape<Real>::current();
  if (tape && (base.requires_grad() || tokens.requires_grad())) {
    out.set_requires_grad(true);
    auto bn = base.node();
    auto tn = tokens.node();
    auto on = out.node();
    auto idx = indices;
    tape->record({bn, tn, on}, [=]() {
      if (on->grad.empty()) return;
      if (tn->requires_grad) {
        tn->ensure_grad();
        for (size_t b = 0; b < B; ++b)
          for (size_t k = 0; k < K; ++k) {
            const size_t pos = idx[b][k];
            for (size_t c = 0; c < C; ++c)
              tn->grad[(b * K + k) * C + c] += on->grad[(b * C + c) * hw + pos];
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        std::vector<bool> replaced(B * hw, false);
        for (size_t b = 0; b < B; ++b)
          for (uint32_t p : idx[b]) replaced[b * hw + p] = true;
        for (size_t b = 0; b < B; ++b)
          for (size_t c = 0; c < C; ++c)
            for (size_t p = 0; p < hw; ++p)
              if (!replaced[b * hw + p])
                bn->grad[(b * C + c) * hw + p] += on->grad[(b * C + c) * hw + p];
      }
    });
  }
  return out;
}

// Looks up rows of a shared (N,C) table by per-sample index lists,
// producing (B,K,C); the backward pass scatter-adds into the table rows.
template <typename Real>
Tensor<Real> take_rows(const Tensor<Real>& table, const SelectionIndex& indices) {
  if (table.rank() != 2)
    throw DimError("take_rows: table must be rank 2, got " +
                   shape_str(table.shape()));
  const size_t N = table.dim(0), C = table.dim(1);
  const size_t B = indices.size();
  detail::check_selection(indices, B, N);
  const size_t K = indices.empty() ? 0 : indices[0].size();
  std::vector<Real> v(B * K * C);
  const Real* pt = table.ptr();
  for (size_t b = 0; b < B; ++b)
    for (size_t k = 0; k < K; ++k) {
      const Real* row = pt + indices[b][k] * C;
      std::copy(row, row + C, v.data() + (b * K + k) * C);
    }
  Tensor<Real> out = Tensor<Real>::from({B, K, C}, std::move(v));
  auto* tape = Tape<Real>::current();
  if (tape && table.requires_grad()) {
    out.set_requires_grad(true);
    auto tn = table.node();
    auto on = out.node();
    auto idx = indices;
    tape->record({tn, on}, [=]() {
      if (on->grad.empty()) return;
      tn->ensure_grad();
      for (size_t b = 0; b < B; ++b)
        for (size_t k = 0; k < K; ++k) {
          Real* row = tn->grad.data() + idx[b][k] * C;
          const Real* g = on->grad.data() + (b * K + k) * C;
          for (size_t c = 0; c < C; ++c) row[c] += g[c];
        }
    });
  }
  return out;
}

// ==================== loss ====================

// Mean cross-entropy over the batch from raw logits (B, C).
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits,
                           const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw DimError("cross_entropy: logits must be rank 2, got " +
                   shape_str(logits.shape()));
  const size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B)
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) +
                        " labels for batch " + std::to_string(B));
  for (size_t b = 0; b < B; ++b)
    if (labels[b] < 0 || size_t(labels[b]) >= C)
      throw ContractError("cross_entropy: label " + std::to_string(labels[b]) +
                          " outside [0," + std::to_string(C) + ")");
  const Real* pz = logits.ptr();
  Real total = 0;
  std::vector<Real> probs(B * C);
  for (size_t b = 0; b < B; ++b) {
    const Real* row = pz + b * C;
    Real mx = row[0];
    for (size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    Real denom = 0;
    for (size_t c = 0; c < C; ++c) {
      const Real e = std::exp(row[c] - mx);
      probs[b * C + c] = e;
      denom += e;
    }
    const Real inv = Real(1) / denom;
    for (size_t c = 0; c < C; ++c) probs[b * C + c] *= inv;
    total += std::log(denom) + mx - row[labels[b]];
  }
  Tensor<Real> out = Tensor<Real>::scalar(total / Real(B));
  auto* tape = Tape<Real>::current();
  if (tape && logits.requires_grad()) {
    out.set_requires_grad(true);
    auto zn = logits.node();
    auto on = out.node();
    auto lbl = labels;
    auto p = std::move(probs);
    tape->record({zn, on}, [=]() {
      if (on->grad.empty()) return;
      zn->ensure_grad();
      const Real g = on->grad[0] / Real(B);
      for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < C; ++c)
          zn->grad[b * C + c] +=
              g * (p[b * C + c] - (size_t(lbl[b]) == c ? Real(1) : Real(0)));
    });
  }
  return out;
}

// ==================== random fills ====================

template <typename Real>
void fill_uniform(Tensor<Real>& t, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  for (Real& v : t.data()) v = Real(d(rng));
}

template <typename Real>
void fill_normal(Tensor<Real>& t, Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> d(mean, stddev);
  for (Real& v : t.data()) v = Real(d(rng));
}

// Normal(0, stddev) with draws outside two standard deviations redrawn.
template <typename Real>
void fill_trunc_normal(Tensor<Real>& t, Rng& rng, double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  for (Real& v : t.data()) {
    double z = d(rng);
    while (std::abs(z) > 2.0 * stddev) z = d(rng);
    v = Real(z);
  }
}

template <typename Real>
bool all_finite(const Tensor<Real>& t) {
  for (Real v : t.data())
    if (!std::isfinite(double(v))) return false;
  return true;
}

}  // namespace fvit
